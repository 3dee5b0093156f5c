//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::Result;
use crate::rng::{self, Domain};
use rand::seq::index::sample;

/// Denominator floor of [`derivative_error`]. With a loss of order one the
/// function values carry rounding of about 2e-16, so at `h = 1e-4` a
/// difference quotient is only resolved to about 1e-12 absolute; below this
/// magnitude a relative comparison would measure rounding, not the gradient.
pub const ABS_FLOOR: f64 = 1e-4;

/// A deterministic scalar function of a set of named `f64` tensors.
pub trait Objective {
    fn value(&self) -> Result<f64>;

    /// Analytic gradients, one buffer per tensor in `visit_params` order.
    fn gradient(&mut self) -> Result<Vec<Vec<f64>>>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>));
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Backward and finite-difference derivatives at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares backward gradients with the fourth-order central difference
/// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h`.
///
/// At most `per_param` coordinates of each tensor are probed (all of them
/// when the tensor is small), chosen by `seed`.
pub fn finite_difference_check<O: Objective>(
    obj: &mut O,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = obj.gradient()?;
    let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
    let mut counter = 0u64;
    obj.visit_params(&mut |name, t| {
        let n = t.numel();
        let idx = if n <= per_param {
            (0..n).collect()
        } else {
            let mut r = rng::stream(seed, Domain::Perturbation, counter, 0);
            let mut v = sample(&mut r, n, per_param).into_vec();
            v.sort_unstable();
            v
        };
        counter += 1;
        plan.push((name.to_string(), idx));
    });

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    for (pi, (name, coords)) in plan.iter().enumerate() {
        for &c in coords {
            let mut at = |k: f64| perturbed(obj, pi, c, k * h);
            let numeric = (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * h);
            let err = derivative_error(analytic[pi][c], numeric);
            report.coordinates_checked += 1;
            if err > report.max_error || report.worst_param.is_empty() {
                report.max_error = err;
                report.worst_param = name.clone();
                report.worst_index = c;
                report.worst_analytic = analytic[pi][c];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn perturbed<O: Objective>(obj: &mut O, param: usize, coord: usize, delta: f64) -> Result<f64> {
    let mut original = 0.0;
    let mut i = 0;
    obj.visit_params(&mut |_, t| {
        if i == param {
            original = t.data()[coord];
            t.data_mut()[coord] = original + delta;
        }
        i += 1;
    });
    let v = obj.value();
    let mut i = 0;
    obj.visit_params(&mut |_, t| {
        if i == param {
            t.data_mut()[coord] = original;
        }
        i += 1;
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    /// f(p) = sum_i c_i p_i^2 + p_0 p_1
    struct Quadratic {
        p: Tensor<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self) -> Result<f64> {
            let d = self.p.data();
            Ok(d.iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v * v)
                .sum::<f64>()
                + d[0] * d[1])
        }

        fn gradient(&mut self) -> Result<Vec<Vec<f64>>> {
            let mut g = Graph::new();
            let n = self.p.numel();
            let coef: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let vp = g.param(&self.p);
            let c = g.constant(&[n], coef)?;
            let sq = g.mul(vp, vp)?;
            let w = g.mul(sq, c)?;
            let s = g.sum(w);
            let p0 = g.narrow(vp, 0, 0, 1)?;
            let p1 = g.narrow(vp, 0, 1, 1)?;
            let cross = g.mul(p0, p1)?;
            let loss = g.add(s, cross)?;
            let grads = g.backward(loss)?;
            Ok(vec![grads.get(&self.p).unwrap().to_vec()])
        }

        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let p = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7])
            .unwrap()
            .with_requires_grad(true);
        let mut q = Quadratic { p };
        let r = finite_difference_check(&mut q, 1e-4, 16, 1).unwrap();
        assert_eq!(r.coordinates_checked, 4);
        assert!(r.max_error < 1e-9, "{r:?}");
    }

    #[test]
    fn small_derivatives_are_compared_against_the_floor() {
        assert_eq!(derivative_error(0.0, 5e-9), 5e-9 / ABS_FLOOR);
        assert!((derivative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
