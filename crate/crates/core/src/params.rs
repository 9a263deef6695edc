//! Named trainable parameters and weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// A named trainable tensor. `constrained` marks factor matrices that the
/// semi-orthogonal constraint machinery acts on during training.
#[derive(Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    constrained: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter { name: name.into(), tensor: tensor.requires_grad(), constrained: false }
    }

    /// A parameter subject to the semi-orthogonal constraint.
    pub fn constrained(name: impl Into<String>, tensor: Tensor) -> Self {
        let mut p = Parameter::new(name, tensor);
        p.constrained = true;
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({}, {:?})", self.name, self.tensor.shape())
    }
}

/// Fan counts for the supported weight shapes: [in, out] matrices and
/// [k, in, out] convolution kernels.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [a, b] => (*a, *b),
        [k, d_in, d_out] => (k * d_in, k * d_out),
        other => panic!("no fan convention for shape {other:?}"),
    }
}

/// Uniform init in +/- sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = fans(&shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::raw(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot_uniform(vec![10, 20], &mut rng);
        let bound = (6.0 / 30.0f64).sqrt();
        assert!(t.values().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn parameter_requires_grad() {
        let p = Parameter::new("w", Tensor::zeros(vec![2, 2]));
        assert!(p.tensor().requires_grad_flag());
        assert!(!p.is_constrained());
        assert!(Parameter::constrained("u", Tensor::zeros(vec![2, 4])).is_constrained());
    }
}
