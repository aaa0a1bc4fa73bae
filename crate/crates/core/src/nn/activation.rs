//! GELU (tanh approximation) and its derivative.

use crate::tensor::Tensor;

/// `sqrt(2/π)`
const GELU_SCALE: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `pre` is the activation input recorded during the forward pass.
pub fn gelu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| gelu_grad(x) * g)
        .collect();
    Tensor::new(pre.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn derivative_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-4;
            let f = |v: f64| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044_715 * v * v * v)).tanh());
            let numeric = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((gelu_grad(x as f32) as f64 - numeric).abs() < 1e-5, "x={x}");
        }
    }
}
