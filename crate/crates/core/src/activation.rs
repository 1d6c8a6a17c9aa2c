//! Elementwise activations: ReLU, ELU (α = 1) and SELU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Elu,
    Selu,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            ActivationKind::Selu => {
                SELU_LAMBDA * if x > 0.0 { x } else { SELU_ALPHA * x.exp_m1() }
            }
        }
    }

    /// Derivative at `x`; the right derivative at 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    ELU_ALPHA * x.exp()
                }
            }
            ActivationKind::Selu => {
                SELU_LAMBDA * if x > 0.0 { 1.0 } else { SELU_ALPHA * x.exp() }
            }
        }
    }

    fn apply_t<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        match self {
            ActivationKind::Relu => x.max(zero),
            ActivationKind::Elu => {
                if x > zero {
                    x
                } else {
                    T::from_f64_lossy(ELU_ALPHA) * x.exp_m1()
                }
            }
            ActivationKind::Selu => {
                let l = T::from_f64_lossy(SELU_LAMBDA);
                if x > zero {
                    l * x
                } else {
                    l * T::from_f64_lossy(SELU_ALPHA) * x.exp_m1()
                }
            }
        }
    }

    fn derivative_t<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        match self {
            ActivationKind::Relu => {
                if x > zero {
                    T::one()
                } else {
                    zero
                }
            }
            ActivationKind::Elu => {
                if x > zero {
                    T::one()
                } else {
                    T::from_f64_lossy(ELU_ALPHA) * x.exp()
                }
            }
            ActivationKind::Selu => {
                let l = T::from_f64_lossy(SELU_LAMBDA);
                if x > zero {
                    l
                } else {
                    l * T::from_f64_lossy(SELU_ALPHA) * x.exp()
                }
            }
        }
    }
}

/// Activation layer; caches its input for the backward pass.
pub struct Activation<T> {
    pub kind: ActivationKind,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let kind = self.kind;
        self.cache = Some(x.clone());
        x.map(|v| kind.apply_t(v))
    }

    pub fn backward(&mut self, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
        let kind = self.kind;
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("activation backward called without a forward".into()))?;
        x.zip_map(grad_y, |xv, g| g * kind.derivative_t(xv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(ActivationKind::Relu.apply(-1.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply(2.0), 2.0);
    }

    #[test]
    fn selu_at_zero() {
        assert_eq!(ActivationKind::Selu.apply(0.0), 0.0);
        assert!((ActivationKind::Selu.derivative(1e-300) - 1.0507009873554805).abs() < 1e-15);
        // left derivative at 0 is λα
        assert!((ActivationKind::Selu.derivative(-1e-300) - SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
    }

    #[test]
    fn elu_is_identity_for_nonnegative() {
        for x in [0.0, 0.5, 3.0, 1e6] {
            assert_eq!(ActivationKind::Elu.apply(x), x);
        }
        assert!((ActivationKind::Elu.apply(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn selu_constants() {
        assert!((SELU_LAMBDA - 1.0507).abs() < 1e-4);
        assert!((SELU_ALPHA - 1.6733).abs() < 1e-4);
    }

    #[test]
    fn layer_matches_scalar_form() {
        let x = Tensor::<f64>::from_f64(&[4], &[-2.0, -0.1, 0.3, 4.0]).unwrap();
        for kind in [ActivationKind::Relu, ActivationKind::Elu, ActivationKind::Selu] {
            let mut a = Activation::new(kind);
            let y = a.forward(&x);
            for (yv, xv) in y.data().iter().zip(x.data()) {
                assert!((yv - kind.apply(*xv)).abs() < 1e-15);
            }
            let g = a.backward(&Tensor::full(&[4], 1.0)).unwrap();
            for (gv, xv) in g.data().iter().zip(x.data()) {
                assert!((gv - kind.derivative(*xv)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut a = Activation::<f32>::new(ActivationKind::Relu);
        assert!(a.backward(&Tensor::zeros(&[1])).is_err());
    }
}
