//! Finite-difference verification of analytic gradients.
//!
//! Intended for the 64-bit mode: central differences in f32 drown in
//! rounding noise. The error metric is `|a - n| / max(|a|, |n|, 1)` — a
//! relative error with a unit floor so that near-zero gradients compare
//! absolutely instead of dividing by zero.

use crate::error::{Result, SptError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which elements of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum ProbePlan {
    /// Every element of every parameter.
    All,
    /// A seeded random subset per parameter; full coverage stays affordable
    /// for small models, this keeps per-op unit tests fast.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst probe.
    pub worst: String,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn` evaluated around `params`.
///
/// `loss_fn` receives the full parameter list with one element perturbed
/// and must return the scalar loss. A non-finite loss aborts the check,
/// naming the parameter under probe.
pub fn grad_check<T: Scalar>(
    names: &[&str],
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    mut loss_fn: impl FnMut(&[Tensor<T>]) -> Result<T>,
    h: f64,
    tolerance: f64,
    plan: ProbePlan,
) -> Result<GradCheckReport> {
    if names.len() != params.len() || params.len() != analytic.len() {
        return Err(SptError::config(
            "grad_check: names, params and analytic gradients must align",
        ));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;

    for p in 0..params.len() {
        let n = params[p].len();
        let indices: Vec<usize> = match plan {
            ProbePlan::All => (0..n).collect(),
            ProbePlan::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e37));
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(per_param.min(n));
                all
            }
        };
        for idx in indices {
            let orig = work[p].data()[idx];
            let step = T::from_f64(h);

            work[p].data_mut()[idx] = orig + step;
            let up = loss_fn(&work)?.to_f64();
            work[p].data_mut()[idx] = orig - step;
            let down = loss_fn(&work)?.to_f64();
            work[p].data_mut()[idx] = orig;

            if !up.is_finite() || !down.is_finite() {
                return Err(SptError::numeric(format!(
                    "non-finite loss while probing {}[{}]",
                    names[p], idx
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p].data()[idx].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{}[{}]", names[p], idx);
            }
        }
    }

    Ok(GradCheckReport {
        checked,
        max_rel_err,
        worst,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    #[test]
    fn quadratic_matches_central_difference() {
        // f(x) = x^2 at x = 3: analytic gradient 6; central differences are
        // exact for quadratics up to rounding.
        let x = Tensor::from_vec(vec![1], vec![3.0f64]).unwrap();
        let analytic = Tensor::from_vec(vec![1], vec![6.0f64]).unwrap();
        let report = grad_check(
            &["x"],
            &[x],
            &[analytic],
            |p| Ok(p[0].data()[0] * p[0].data()[0]),
            1e-5,
            1e-8,
            ProbePlan::All,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let analytic = Tensor::zeros(vec![3]);
        let report = grad_check(
            &["x"],
            &[x],
            &[analytic],
            |_| Ok(42.0f64),
            1e-4,
            1e-10,
            ProbePlan::All,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.pass);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let x = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
        let analytic = Tensor::zeros(vec![1]);
        let err = grad_check(
            &["theta"],
            &[x],
            &[analytic],
            |p| Ok(p[0].data()[0].sqrt()), // NaN on the downward probe
            1e-5,
            1e-6,
            ProbePlan::All,
        )
        .unwrap_err();
        assert!(err.to_string().contains("theta[0]"), "{err}");
    }

    #[test]
    fn tape_ops_pass_randomized_probes() {
        // Composite graph: softmax(layer_norm(x W)) fed to cross-entropy.
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = Tensor::<f64>::randn(vec![5, 4], 0.7, &mut rng).with_requires_grad(true);
        let gamma = Tensor::<f64>::randn(vec![4], 0.3, &mut rng)
            .map(|v| v + 1.0)
            .with_requires_grad(true);
        let beta = Tensor::<f64>::randn(vec![4], 0.3, &mut rng).with_requires_grad(true);
        let x = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let labels = [0usize, 2, 1];

        let run = |ps: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
            let mut tape = Tape::new();
            let wid = tape.leaf(ps[0].clone().with_requires_grad(true));
            let gid = tape.leaf(ps[1].clone().with_requires_grad(true));
            let bid = tape.leaf(ps[2].clone().with_requires_grad(true));
            let xid = tape.constant(x.clone());
            let h = tape.matmul(xid, wid)?;
            let ln = tape.layer_norm(h, gid, bid, 1e-6)?;
            let sm = tape.softmax(ln, 1)?;
            // gelu keeps the composite nonlinear in every branch
            let ge = tape.gelu(sm);
            let loss = tape.cross_entropy(ge, &labels)?;
            let lv = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let out = vec![
                grads.take(wid).unwrap(),
                grads.take(gid).unwrap(),
                grads.take(bid).unwrap(),
            ];
            Ok((lv, Some(out)))
        };

        let params = vec![w, gamma, beta];
        let (_, analytic) = run(&params).unwrap();
        let report = grad_check(
            &["w", "gamma", "beta"],
            &params,
            &analytic.unwrap(),
            |ps| run(ps).map(|(l, _)| l),
            1e-5,
            1e-6,
            ProbePlan::Sample {
                per_param: 10,
                seed: 99,
            },
        )
        .unwrap();
        assert!(
            report.pass,
            "worst {} rel err {:.3e}",
            report.worst, report.max_rel_err
        );
    }
}
