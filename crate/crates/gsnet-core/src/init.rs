//! Parameter initialization: fan-in-scaled (He-style) uniform for weights,
//! zeros for biases, ones/zeros for norm scales. All draws come from the
//! caller's seeded stream, so construction order fixes every value.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// U(-sqrt(6/fan_in), +sqrt(6/fan_in))
pub fn he_uniform(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.range(-bound, bound)).collect();
    Tensor::param(data, shape).expect("init shape")
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![0.0; shape.iter().product()], shape).expect("init shape")
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![1.0; shape.iter().product()], shape).expect("init shape")
}
