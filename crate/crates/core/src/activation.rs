//! Pointwise activations usable at the internal and external positions of a
//! residual block.

use serde::{Deserialize, Serialize};

const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Initial slope of a PReLU layer.
pub const PRELU_INIT: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Selu,
    Prelu,
    Swish,
    Mish,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::Selu,
        ActivationKind::Prelu,
        ActivationKind::Swish,
        ActivationKind::Mish,
    ];

    pub fn has_slope(self) -> bool {
        self == ActivationKind::Prelu
    }
}

/// An activation together with its learned slope (PReLU only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub slope: f32,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation {
            kind,
            slope: PRELU_INIT,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval(self.kind, self.slope as f64, x)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn eval(kind: ActivationKind, slope: f64, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::Prelu => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        ActivationKind::Selu => {
            if x > 0.0 {
                SELU_SCALE * x
            } else {
                SELU_SCALE * SELU_ALPHA * x.exp_m1()
            }
        }
        ActivationKind::Swish => x * sigmoid(x),
        ActivationKind::Mish => x * softplus(x).tanh(),
    }
}

/// Derivative with respect to the input.
pub fn derivative(kind: ActivationKind, slope: f64, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Prelu => {
            if x >= 0.0 {
                1.0
            } else {
                slope
            }
        }
        ActivationKind::Selu => {
            if x > 0.0 {
                SELU_SCALE
            } else {
                SELU_SCALE * SELU_ALPHA * x.exp()
            }
        }
        ActivationKind::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        ActivationKind::Mish => {
            let t = softplus(x).tanh();
            t + x * (1.0 - t * t) * sigmoid(x)
        }
    }
}

/// Apply `act` to every element.
pub fn apply_activation(act: &Activation, x: &[f32]) -> Vec<f32> {
    let slope = act.slope as f64;
    match act.kind {
        ActivationKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        kind => x
            .iter()
            .map(|&v| eval(kind, slope, v as f64) as f32)
            .collect(),
    }
}

/// Backward pass: returns `dL/dx` and `dL/dslope` (zero unless PReLU).
pub fn activation_backward(act: &Activation, x: &[f32], dy: &[f32]) -> (Vec<f32>, f32) {
    let slope = act.slope as f64;
    let mut dslope = 0.0f64;
    let dx = match act.kind {
        ActivationKind::Relu => x
            .iter()
            .zip(dy)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        ActivationKind::Prelu => x
            .iter()
            .zip(dy)
            .map(|(&v, &g)| {
                if v >= 0.0 {
                    g
                } else {
                    dslope += (g as f64) * (v as f64);
                    (slope as f32) * g
                }
            })
            .collect(),
        kind => x
            .iter()
            .zip(dy)
            .map(|(&v, &g)| (derivative(kind, slope, v as f64) * g as f64) as f32)
            .collect(),
    };
    (dx, dslope as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(eval(ActivationKind::Relu, 0.0, -1.0), 0.0);
        assert_eq!(eval(ActivationKind::Swish, 0.0, 0.0), 0.0);
        assert_eq!(eval(ActivationKind::Mish, 0.0, 0.0), 0.0);
        // 1 * tanh(ln(1 + e)), evaluated with mpmath at 30 digits
        let mish1 = 0.865_098_388_267_310_3;
        assert!((eval(ActivationKind::Mish, 0.0, 1.0) - mish1).abs() < 1e-12);
        assert!((eval(ActivationKind::Prelu, 0.25, -2.0) + 0.5).abs() < 1e-15);
        assert!((eval(ActivationKind::Selu, 0.0, 1.0) - SELU_SCALE).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for kind in ActivationKind::ALL {
            for &x in &[-3.0, -0.7, -0.1, 0.2, 0.9, 4.0] {
                let fd = (eval(kind, 0.25, x + h) - eval(kind, 0.25, x - h)) / (2.0 * h);
                let an = derivative(kind, 0.25, x);
                assert!((fd - an).abs() < 1e-6, "{kind:?} at {x}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn activations_bounded_below_and_continuous_at_zero() {
        for kind in ActivationKind::ALL {
            let left = eval(kind, 0.25, -1e-9);
            let right = eval(kind, 0.25, 1e-9);
            assert!((left - right).abs() < 1e-8);
            let floor = (-200..=0)
                .map(|i| eval(kind, 0.25, i as f64 * 0.05))
                .fold(f64::INFINITY, f64::min);
            // PReLU is unbounded below for a positive slope; the others are not
            if kind != ActivationKind::Prelu {
                assert!(floor > -2.0, "{kind:?}");
            }
        }
    }

    #[test]
    fn prelu_slope_gradient() {
        let act = Activation::new(ActivationKind::Prelu);
        let x = [-2.0f32, 1.0, -0.5];
        let dy = [1.0f32, 1.0, 2.0];
        let (dx, ds) = activation_backward(&act, &x, &dy);
        assert_eq!(dx, vec![0.25, 1.0, 0.5]);
        assert!((ds - (-2.0 - 1.0)).abs() < 1e-6);
    }
}
