//! (description, sketch) pairs: manifest ingestion, prompt templates,
//! seeded splits and a procedural fixture generator.
//!
//! Manifest format: one JSON object per line with `id`, `image_path` and
//! `description`. Blank lines and lines starting with `#` are ignored.
//! Relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordError, Result};
use crate::image::GrayImage;

pub const DEFAULT_TEMPLATE: &str = "The suspect is described as {demographic} with {physical attributes}.";
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchPair {
    pub id: String,
    pub image: GrayImage,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE)
    }
}

enum Segment<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    fn segments(&self) -> Result<Vec<Segment<'_>>> {
        let mut out = Vec::new();
        let mut rest = self.template.as_str();
        while let Some(open) = rest.find('{') {
            out.push(Segment::Literal(&rest[..open]));
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Validation(format!("unclosed slot in template {:?}", self.template)))?;
            out.push(Segment::Slot(&rest[open + 1..open + close]));
            rest = &rest[open + close + 1..];
        }
        out.push(Segment::Literal(rest));
        Ok(out)
    }

    pub fn slots(&self) -> Result<Vec<String>> {
        Ok(self
            .segments()?
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.to_string()),
                Segment::Literal(_) => None,
            })
            .collect())
    }

    /// Substitutes every `{slot}`; fails listing all slots without a value.
    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<String> {
        let segments = self.segments()?;
        let mut missing: Vec<String> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) if !values.contains_key(*name) => Some(name.to_string()),
                _ => None,
            })
            .collect();
        if !missing.is_empty() {
            missing.dedup();
            return Err(Error::MissingSlots(missing));
        }
        Ok(segments
            .iter()
            .map(|s| match s {
                Segment::Literal(l) => *l,
                Segment::Slot(name) => values[*name].as_str(),
            })
            .collect())
    }
}

/// Renders the default template from its two slots.
pub fn describe(demographic: &str, physical_attributes: &str) -> String {
    let mut slots = BTreeMap::new();
    slots.insert("demographic".to_string(), demographic.to_string());
    slots.insert("physical attributes".to_string(), physical_attributes.to_string());
    PromptTemplate::default().render(&slots).expect("default template slots are filled")
}

pub fn parse_manifest(text: &str) -> std::result::Result<Vec<(usize, ManifestRecord)>, Vec<RecordError>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(trimmed) {
            Ok(r) => records.push((i + 1, r)),
            Err(e) => errors.push(RecordError {
                line: i + 1,
                id: None,
                message: format!("malformed record: {e}"),
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(errors)
    }
}

/// Reads a manifest, decoding and resizing every image to `size × size`.
/// All record problems are collected into one [`Error::Ingest`].
pub fn load_manifest(path: &Path, size: usize) -> Result<Vec<SketchPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = parse_manifest(&text).map_err(Error::Ingest)?;

    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(records.len());
    for (line, r) in records {
        let fail = |message: String| RecordError {
            line,
            id: Some(r.id.clone()),
            message,
        };
        if r.id.trim().is_empty() {
            errors.push(RecordError {
                line,
                id: None,
                message: "empty id".into(),
            });
            continue;
        }
        if !seen.insert(r.id.clone()) {
            errors.push(fail("duplicate id".into()));
            continue;
        }
        if r.description.trim().is_empty() {
            errors.push(fail("empty description".into()));
            continue;
        }
        let image_path = {
            let p = PathBuf::from(&r.image_path);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let image = match std::fs::read(&image_path) {
            Ok(bytes) => match GrayImage::decode(&bytes) {
                Ok(img) => img.resize_nearest(size, size),
                Err(e) => {
                    errors.push(fail(format!("{}: {e}", image_path.display())));
                    continue;
                }
            },
            Err(e) => {
                errors.push(fail(format!("{}: {e}", image_path.display())));
                continue;
            }
        };
        pairs.push(SketchPair {
            id: r.id,
            image,
            description: r.description,
        });
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Ingest(errors))
    }
}

/// Writes each image as `<id>.pgm` next to a `manifest.jsonl`; returns the manifest path.
pub fn write_dataset(dir: &Path, pairs: &[SketchPair]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for p in pairs {
        let file = format!("{}.pgm", p.id);
        p.image.save_pgm(&dir.join(&file))?;
        let record = ManifestRecord {
            id: p.id.clone(),
            image_path: file,
            description: p.description.clone(),
        };
        manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Size of the training side for `n` items: `floor(ratio·n)`, kept within `1..n`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    (((n as f64) * ratio + 1e-9).floor() as usize).clamp(1, n - 1)
}

/// Seeded shuffle, then the first `floor(ratio·N)` items train, the rest validate.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 pairs to split, got {}", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_size(items.len(), ratio);
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

const DEMOGRAPHICS: [&str; 8] = [
    "a male in his 20s",
    "a female in her 30s",
    "a male in his 50s",
    "a female in her 60s",
    "a teenage boy",
    "a young woman",
    "an elderly man",
    "a middle aged woman",
];

const MOTIFS: [&str; 8] = ["level", "rising", "upright", "falling", "shallow", "steep", "tilted", "leaning"];

/// Hatching density words, one per stripe frequency level.
pub const LEVELS: [&str; 8] = ["faint", "light", "soft", "even", "firm", "heavy", "dense", "bold"];

pub const FIXTURE_SIZE: usize = 64;

/// Description of fixture item `(cluster, level)`.
pub fn fixture_description(cluster: usize, level: usize) -> String {
    let demographic = DEMOGRAPHICS
        .get(cluster)
        .map_or_else(|| format!("a person from group {cluster}"), |s| s.to_string());
    let motif = MOTIFS.get(cluster).copied().unwrap_or("patterned");
    describe(
        &demographic,
        &format!("{motif} shading and {} hatching", LEVELS[level % LEVELS.len()]),
    )
}

/// One fixture sketch: a cluster-specific head outline filled with stripes whose
/// orientation encodes the cluster and whose frequency encodes `level`.
pub fn fixture_image(cluster: usize, num_clusters: usize, level: usize, rng: &mut impl Rng) -> GrayImage {
    let size = FIXTURE_SIZE as f32;
    let theta = std::f32::consts::PI * cluster as f32 / num_clusters as f32;
    let (ct, st) = (theta.cos(), theta.sin());
    let freq = 2.0 + (level % LEVELS.len()) as f32;
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let cx = 32.0 + [-6.0, 0.0, 6.0][cluster % 3];
    let cy = 34.0 + [-4.0, 4.0][(cluster / 3) % 2];
    let rx = 16.0 + 3.0 * ((cluster % 4) as f32);
    let ry = 22.0 - 2.0 * ((cluster % 2) as f32);
    let bar_y = 6 + 12 * (cluster % 4);
    let bar_x = if cluster.is_multiple_of(2) { 2 } else { 56 };
    let mut noise = ChaCha8Rng::seed_from_u64(rng.gen());
    GrayImage::from_fn(FIXTURE_SIZE, FIXTURE_SIZE, |x, y| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let inside = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0;
        let base = if (bar_x..bar_x + 6).contains(&x) && (bar_y..bar_y + 10).contains(&y) {
            30.0
        } else if inside {
            let t = (fx * ct + fy * st) / size;
            128.0 + 90.0 * (std::f32::consts::TAU * freq * t + phase).sin()
        } else {
            245.0 - 10.0 * (level % LEVELS.len()) as f32
        };
        let jitter: f32 = noise.gen_range(-6.0..6.0);
        (base + jitter).round().clamp(0.0, 255.0) as u8
    })
}

/// `num_clusters × pairs_per_cluster` pairs, cluster-major. Item `i` of a
/// cluster uses hatching level `i mod 8`.
pub fn synth_fixture(num_clusters: usize, pairs_per_cluster: usize, seed: u64) -> Result<Vec<SketchPair>> {
    if num_clusters < 2 {
        return Err(Error::Validation(format!("fixture needs at least 2 clusters, got {num_clusters}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_clusters * pairs_per_cluster);
    for c in 0..num_clusters {
        for i in 0..pairs_per_cluster {
            out.push(SketchPair {
                id: format!("c{c}_{i:03}"),
                image: fixture_image(c, num_clusters, i, &mut rng),
                description: fixture_description(c, i),
            });
        }
    }
    Ok(out)
}

/// `n` pairs dealt round-robin over `num_clusters` clusters.
pub fn synth_fixture_sized(num_clusters: usize, n: usize, seed: u64) -> Result<Vec<SketchPair>> {
    if num_clusters < 2 {
        return Err(Error::Validation(format!("fixture needs at least 2 clusters, got {num_clusters}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|k| {
            let (c, i) = (k % num_clusters, k / num_clusters);
            SketchPair {
                id: format!("c{c}_{i:03}"),
                image: fixture_image(c, num_clusters, i, &mut rng),
                description: fixture_description(c, i),
            }
        })
        .collect())
}

const LINE_WORDS: [&str; 8] = ["flat", "angled", "oblique", "askew", "upright", "slanting", "sloped", "canted"];

/// Generic captioned drawings for pretraining a base encoder: eight line
/// orientations and eight stroke densities drawn at random. Captions name the
/// line style and density instead of describing a suspect.
pub fn synth_captioned(n: usize, seed: u64) -> Vec<SketchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let style = rng.gen_range(0..LINE_WORDS.len());
            let level = rng.gen_range(0..LEVELS.len());
            SketchPair {
                id: format!("g{k:04}"),
                image: fixture_image(style, LINE_WORDS.len(), level, &mut rng),
                description: format!("a sketch with {} lines and {} strokes", LINE_WORDS[style], LEVELS[level]),
            }
        })
        .collect()
}

/// Cluster index encoded in a fixture id (`c<cluster>_<item>`).
pub fn fixture_cluster(id: &str) -> Option<usize> {
    id.strip_prefix('c')?.split('_').next()?.parse().ok()
}
