//! 8-bit grayscale images, binary PGM (P5) codec and nearest-neighbor resize.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("image size {width}x{height} is empty")));
        }
        if pixels.len() != width * height {
            return Err(Error::dim("image pixels", &[width * height], &[pixels.len()]));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn same_size(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_size(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::dim("image size (width, height)", &[width, height], &[self.width, self.height]));
        }
        Ok(())
    }

    /// Nearest-neighbor resize; source pixel = floor(dst · src / dst_size).
    pub fn resize_nearest(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        GrayImage::from_fn(width, height, |x, y| {
            let sx = x * self.width / width;
            let sy = y * self.height / height;
            self.get(sx, sy)
        })
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments.
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    c if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::ImageDecode("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::ImageDecode(format!("unsupported PGM magic {:?}", fields[0])));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::ImageDecode(format!("bad PGM {what} {s:?}")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(Error::ImageDecode(format!("only 8-bit PGM is supported (maxval {maxval})")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(Error::ImageDecode(format!(
                "PGM raster has {} bytes, expected {n}",
                bytes.len().saturating_sub(pos)
            )));
        }
        GrayImage::new(width, height, bytes[pos..pos + n].to_vec())
    }

    /// Decodes PGM, or PNG (converted to 8-bit luma).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P5") {
            return Self::from_pgm(bytes);
        }
        if bytes.starts_with(b"\x89PNG") {
            let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
                .map_err(|e| Error::ImageDecode(e.to_string()))?
                .into_luma8();
            let (w, h) = img.dimensions();
            return GrayImage::new(w as usize, h as usize, img.into_raw());
        }
        Err(Error::ImageDecode("unrecognized image format (expected PGM P5 or PNG)".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}
