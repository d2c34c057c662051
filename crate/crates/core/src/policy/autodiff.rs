//! Forward-mode automatic differentiation with dense gradient tangents.
//!
//! Code written against [`Scalar`] runs on plain `f64` for values and on
//! [`Dual`] to obtain the gradient with respect to every seeded variable in
//! a single pass.

use std::ops::{Add, Mul, Neg, Sub};

pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn constant(x: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    /// `max(x, 0) + ln(1 + exp(-|x|))`, stable for any finite `x`.
    fn softplus(&self) -> Self;

    fn scale(&self, c: f64) -> Self {
        self.clone() * Self::constant(c)
    }
}

pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn softplus(&self) -> Self {
        softplus_f64(*self)
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

/// Value plus gradient. An empty tangent stands for the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: Vec<f64>,
}

impl Dual {
    /// Variable `index` of `n`, with a unit tangent.
    pub fn variable(v: f64, index: usize, n: usize) -> Self {
        let mut d = vec![0.0; n];
        d[index] = 1.0;
        Dual { v, d }
    }

    pub fn variables(values: &[f64]) -> Vec<Dual> {
        let n = values.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Dual::variable(v, i, n))
            .collect()
    }

    /// Gradient padded to length `n`.
    pub fn gradient(&self, n: usize) -> Vec<f64> {
        let mut g = self.d.clone();
        g.resize(n, 0.0);
        g
    }

    fn map_tangent(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.d.iter().map(|&x| f(x)).collect()
    }
}

fn combine(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| f(a.get(i).copied().unwrap_or(0.0), b.get(i).copied().unwrap_or(0.0)))
        .collect()
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: combine(&self.d, &o.d, |x, y| x + y),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: combine(&self.d, &o.d, |x, y| x - y),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, o: Dual) -> Dual {
        let (a, b) = (self.v, o.v);
        Dual {
            v: a * b,
            d: combine(&self.d, &o.d, |x, y| {
                // skip 0 * inf so infinite parameters with zero features stay finite
                let l = if x == 0.0 { 0.0 } else { x * b };
                let r = if y == 0.0 { 0.0 } else { a * y };
                l + r
            }),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.map_tangent(|x| -x),
        }
    }
}

impl Scalar for Dual {
    fn constant(x: f64) -> Self {
        Dual { v: x, d: Vec::new() }
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            d: self.map_tangent(|x| if x == 0.0 { 0.0 } else { e * x }),
        }
    }
    fn ln(&self) -> Self {
        let inv = 1.0 / self.v;
        Dual {
            v: self.v.ln(),
            d: self.map_tangent(|x| x * inv),
        }
    }
    fn softplus(&self) -> Self {
        let s = sigmoid(self.v);
        Dual {
            v: softplus_f64(self.v),
            d: self.map_tangent(|x| x * s),
        }
    }
    fn scale(&self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            d: self.map_tangent(|x| x * c),
        }
    }
}

/// `ln Σ exp(x_i)`, shifted by the maximum value for stability.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> Option<S> {
    let m = xs
        .iter()
        .map(Scalar::value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let shift = S::constant(m);
    let mut acc = S::constant(0.0);
    for x in xs {
        if x.value() == f64::NEG_INFINITY {
            continue;
        }
        acc = acc + (x.clone() - shift.clone()).exp();
    }
    Some(acc.ln() + shift)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: &[S]) -> S {
        // x0 * exp(x1) - ln(x0) + softplus(x1 - x0)
        x[0].clone() * x[1].exp() - x[0].ln() + (x[1].clone() - x[0].clone()).softplus()
    }

    #[test]
    fn dual_gradient_matches_hand_derivative() {
        let (a, b) = (1.7f64, -0.4f64);
        let out = f(&Dual::variables(&[a, b]));
        assert!((out.v - f(&[a, b])).abs() < 1e-15);
        let s = sigmoid(b - a);
        let da = b.exp() - 1.0 / a - s;
        let db = a * b.exp() + s;
        assert!((out.d[0] - da).abs() < 1e-14);
        assert!((out.d[1] - db).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus_f64(-1000.0), 0.0);
        assert_eq!(softplus_f64(1000.0), 1000.0);
        assert!((softplus_f64(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn log_sum_exp_ignores_negative_infinity() {
        let xs = [0.0, f64::NEG_INFINITY, 0.0];
        assert!((log_sum_exp(&xs).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(log_sum_exp(&[f64::NEG_INFINITY]).is_none());
    }
}
