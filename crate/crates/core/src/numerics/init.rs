use crate::numerics::{SplitRng, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitRng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-limit, limit))
}

/// `[fan_in × fan_out]` weight matrix.
pub fn linear_weight(fan_in: usize, fan_out: usize, rng: &mut SplitRng) -> Tensor {
    glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)
}

/// `[k·k·c_in × c_out]` convolution weight (im2col layout).
pub fn conv_weight(kernel: usize, c_in: usize, c_out: usize, rng: &mut SplitRng) -> Tensor {
    let k2 = kernel * kernel;
    glorot_uniform(&[k2 * c_in, c_out], k2 * c_in, k2 * c_out, rng)
}
