use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Inputs larger than this are checked on a seeded coordinate sample.
const FULL_CHECK_LIMIT: usize = 256;
const SAMPLED_COORDS: usize = 96;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Positions of inputs that do not require gradients.
    pub skipped: Vec<usize>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given step.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let fresh: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requires_grad_(t.requires_grad())).collect();
    let out = f(&fresh)?;
    if !out.shape().is_scalar() {
        return Err(shape_err!(
            "finite_diff_check: function must be scalar-valued, got {}",
            out.shape()
        ));
    }
    out.backward()?;

    let mut report = GradCheck::default();
    // Returns f at the perturbed point and the perturbation actually realized.
    let eval = |which: usize, coord: usize, delta: f64| -> Result<(f64, f64)> {
        let mut realized = 0.0;
        let args: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.to_vec();
                    let base = d[coord];
                    d[coord] += delta;
                    realized = d[coord] - base;
                    Tensor::from_vec(t.shape(), d).expect("same shape")
                } else {
                    t.detach()
                }
            })
            .collect();
        Ok((f(&args)?.item()?, realized))
    };

    for (which, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            report.skipped.push(which);
            continue;
        }
        let analytic = fresh[which].grad().unwrap_or_else(|| vec![0.0; t.shape().numel()]);
        let numel = t.shape().numel();
        let coords: Vec<usize> = if numel <= FULL_CHECK_LIMIT {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ which as u64);
            let mut c = sample(&mut rng, numel, SAMPLED_COORDS).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let (plus, dp) = eval(which, coord, step)?;
            let (minus, dm) = eval(which, coord, -step)?;
            let numeric = (plus - minus) / (dp - dm);
            let err = rel_error(analytic[coord], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
