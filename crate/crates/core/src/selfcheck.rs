//! Finite-difference gradient suite over the differentiable operations,
//! the guided convolution, every loss and a small end-to-end generator
//! pass, all in double precision.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{
    d_loss_from_probs, exclusion_loss, g_loss_from_probs, mask_loss, perceptual_loss, rec_loss, ExclusionScale,
    MaskThresholds, Reduction,
};
use crate::model::{
    build_network, forward_discriminator, forward_gt, partial_conv, MaskBundle, ModelConfig, NetworkKind, RagVariant,
    Width,
};
use crate::seed;
use crate::tensor::{
    concat_channels, conv2d, conv_transpose2d, downsample2x, finite_diff_check, mask_mean3x3, maxpool2x2,
    spatial_gradient, Tensor,
};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for composite losses and network passes.
pub const COMPOSITE_TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

type Scalarize<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

struct Inputs {
    rng: rand_chacha::ChaCha8Rng,
}

impl Inputs {
    fn normal(&mut self, dims: [usize; 4]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::variable(dims, data).expect("dims match")
    }

    fn uniform(&mut self, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::variable(dims, data).expect("dims match")
    }

    /// Magnitudes in `[0.1, 1)` with random signs, away from kinks at 0.
    fn away_from_zero(&mut self, dims: [usize; 4]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.rng.gen_range(0.1..1.0);
                if self.rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::variable(dims, data).expect("dims match")
    }

    fn constant(&mut self, dims: [usize; 4]) -> Tensor<f64> {
        self.normal(dims).detach()
    }
}

/// `Σ x ∘ w` for a fixed random `w`, turning any output into a scalar with
/// a non-trivial upstream gradient.
fn project(x: &Tensor<f64>, salt: u64) -> Result<Tensor<f64>> {
    let mut inputs = Inputs {
        rng: seed::rng(salt, seed::label("project")),
    };
    let w = inputs.constant(x.shape().dims());
    Ok(x.mul(&w)?.sum())
}

pub fn run_suite(seed_value: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut inp = Inputs {
        rng: seed::rng(seed_value, seed::label("gradcheck")),
    };
    let mut check = |name: &str, tol: f64, f: Scalarize, args: &[Tensor<f64>]| -> Result<()> {
        let r = finite_diff_check(f, args, STEP)?;
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            coords: r.coords_checked,
            tolerance: tol,
        });
        Ok(())
    };

    let s = [2, 2, 4, 4];
    let (a, b) = (inp.normal(s), inp.normal(s));
    let away = inp.away_from_zero(s);
    let pos = inp.uniform(s, 0.1, 0.9);
    check(
        "add",
        OP_TOL,
        &|v| project(&v[0].add(&v[1])?, 1),
        &[a.clone(), b.clone()],
    )?;
    check(
        "sub",
        OP_TOL,
        &|v| project(&v[0].sub(&v[1])?, 2),
        &[a.clone(), b.clone()],
    )?;
    check(
        "mul",
        OP_TOL,
        &|v| project(&v[0].mul(&v[1])?, 3),
        &[a.clone(), b.clone()],
    )?;
    check(
        "scale",
        OP_TOL,
        &|v| project(&v[0].scale(-1.5), 4),
        std::slice::from_ref(&a),
    )?;
    check(
        "relu",
        OP_TOL,
        &|v| project(&v[0].relu(), 5),
        std::slice::from_ref(&away),
    )?;
    check(
        "leaky_relu",
        OP_TOL,
        &|v| project(&v[0].leaky_relu(0.2), 6),
        std::slice::from_ref(&away),
    )?;
    check(
        "sigmoid",
        OP_TOL,
        &|v| project(&v[0].sigmoid(), 7),
        std::slice::from_ref(&a),
    )?;
    check("tanh", OP_TOL, &|v| project(&v[0].tanh(), 8), std::slice::from_ref(&a))?;
    check("abs", OP_TOL, &|v| project(&v[0].abs(), 9), std::slice::from_ref(&away))?;
    check(
        "sqrt",
        OP_TOL,
        &|v| project(&v[0].sqrt(), 10),
        std::slice::from_ref(&pos),
    )?;
    check(
        "ln_clamped",
        OP_TOL,
        &|v| project(&v[0].ln_clamped(1e-7, 1.0 - 1e-7), 11),
        std::slice::from_ref(&pos),
    )?;
    check("mean", OP_TOL, &|v| Ok(v[0].mean()), std::slice::from_ref(&a))?;
    check("l1_norm", OP_TOL, &|v| Ok(v[0].l1_norm()), std::slice::from_ref(&away))?;
    check(
        "frobenius_norm",
        OP_TOL,
        &|v| Ok(v[0].frobenius_norm()),
        std::slice::from_ref(&a),
    )?;
    check(
        "concat_channels",
        OP_TOL,
        &|v| project(&concat_channels(&v[0], &v[1])?, 12),
        &[a.clone(), b.clone()],
    )?;
    check(
        "channel_mean",
        OP_TOL,
        &|v| project(&v[0].channel_mean(), 13),
        std::slice::from_ref(&a),
    )?;
    check(
        "spatial_gradient",
        OP_TOL,
        &|v| {
            let (gx, gy) = spatial_gradient(&v[0])?;
            project(&gx, 14)?.add(&project(&gy, 15)?)
        },
        std::slice::from_ref(&a),
    )?;
    check(
        "downsample2x",
        OP_TOL,
        &|v| project(&downsample2x(&v[0])?, 16),
        std::slice::from_ref(&a),
    )?;
    check(
        "maxpool2x2",
        OP_TOL,
        &|v| project(&maxpool2x2(&v[0])?, 17),
        std::slice::from_ref(&a),
    )?;
    check(
        "mask_mean3x3",
        OP_TOL,
        &|v| project(&mask_mean3x3(&v[0])?, 18),
        std::slice::from_ref(&a),
    )?;
    let w = inp.normal([3, 2, 3, 3]);
    let bias = inp.normal([1, 3, 1, 1]);
    check(
        "conv2d",
        OP_TOL,
        &|v| project(&conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)?, 19),
        &[a.clone(), w.clone(), bias.clone()],
    )?;
    check(
        "conv2d_stride2",
        OP_TOL,
        &|v| project(&conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)?, 20),
        &[a.clone(), w.clone(), bias.clone()],
    )?;
    let wt = inp.normal([2, 3, 2, 2]);
    check(
        "conv_transpose2d",
        OP_TOL,
        &|v| project(&conv_transpose2d(&v[0], &v[1], Some(&v[2]))?, 21),
        &[a.clone(), wt, bias.clone()],
    )?;

    // Masks strictly inside (0, 1), as produced by the sigmoid heads.
    let mask = inp.uniform(s, 0.05, 0.95);
    for (name, renorm) in [("partial_conv", true), ("partial_conv_no_renorm", false)] {
        check(
            name,
            OP_TOL,
            &|v| project(&partial_conv(&v[0], &v[1], &v[2], &v[3], renorm)?, 22),
            &[a.clone(), mask.clone(), w.clone(), bias.clone()],
        )?;
    }

    let img = [2, 3, 16, 16];
    let (t_hat, r_hat) = (inp.uniform(img, 0.0, 1.0), inp.uniform(img, 0.0, 1.0));
    let (t, r) = (inp.uniform(img, 0.0, 1.0).detach(), inp.uniform(img, 0.0, 1.0).detach());
    let has = [true, false];
    for red in [Reduction::Sum, Reduction::Mean] {
        check(
            &format!("rec_loss_{}", if red == Reduction::Sum { "sum" } else { "mean" }),
            COMPOSITE_TOL,
            &|v| rec_loss(&v[0], &t, Some((&v[1], &r)), &has, red),
            &[t_hat.clone(), r_hat.clone()],
        )?;
    }
    let cfg = ModelConfig {
        width: Width::new(1, 16)?,
        seed: seed_value,
        ..ModelConfig::default()
    };
    let extractor = build_network::<f64>(NetworkKind::Perceptual, &cfg)?;
    check(
        "perceptual_loss",
        COMPOSITE_TOL,
        &|v| perceptual_loss(&extractor, &v[0], &t, Some((&v[1], &r)), &has),
        &[t_hat.clone(), r_hat.clone()],
    )?;
    // The adaptive reflection weight is a stop-gradient constant, so central
    // differences only agree with it held fixed.
    check(
        "exclusion_loss",
        COMPOSITE_TOL,
        &|v| exclusion_loss(&v[0], &v[1], ExclusionScale::Fixed(0.8)),
        &[t_hat.clone(), r_hat.clone()],
    )?;

    // Mask loss against a reflection spanning all three threshold regions.
    let r_gt = {
        let data = (0..2 * 3 * 8 * 8)
            .map(|i| match (i / 8) % 3 {
                0 => 0.0,
                1 => 0.5,
                _ => 0.9,
            })
            .collect();
        Tensor::<f64>::from_vec([2, 3, 8, 8], data)?
    };
    let level_dims = |k: usize, c: usize| [2, c, 8 >> k, 8 >> k];
    let mut mask_inputs = Vec::new();
    for k in 0..4 {
        mask_inputs.push(inp.uniform(level_dims(k, 2), 0.05, 0.95));
        mask_inputs.push(inp.uniform(level_dims(k, 3), 0.05, 0.95));
    }
    let thresholds = MaskThresholds::default();
    for red in [Reduction::Sum, Reduction::Mean] {
        check(
            &format!("mask_loss_{}", if red == Reduction::Sum { "sum" } else { "mean" }),
            COMPOSITE_TOL,
            &|v| mask_loss(&MaskBundle::from_pairs(v)?, &r_gt, &[true, true], &thresholds, red),
            &mask_inputs,
        )?;
    }

    let probs = inp.uniform([2, 1, 1, 1], 0.1, 0.9);
    let probs2 = inp.uniform([2, 1, 1, 1], 0.1, 0.9);
    check(
        "d_loss",
        COMPOSITE_TOL,
        &|v| d_loss_from_probs(&v[0], &v[1]),
        &[probs.clone(), probs2],
    )?;
    check("g_loss", COMPOSITE_TOL, &|v| Ok(g_loss_from_probs(&v[0])), &[probs])?;
    let disc = build_network::<f64>(NetworkKind::Discriminator, &cfg)?;
    let observed = inp.uniform([1, 3, 16, 16], 0.0, 1.0);
    let cand = inp.uniform([1, 3, 16, 16], 0.0, 1.0);
    check(
        "discriminator",
        COMPOSITE_TOL,
        &|v| forward_discriminator(&disc, &v[0], &v[1]).map(|p| p.sum()),
        &[observed.clone(), cand.clone()],
    )?;

    // End to end through the guidance blocks and guided convolutions.
    for variant in [RagVariant::Full, RagVariant::TwoChannelMask] {
        let gt = build_network::<f64>(NetworkKind::GT, &ModelConfig { variant, ..cfg })?;
        check(
            &format!("forward_gt_{}", variant.name()),
            COMPOSITE_TOL,
            &|v| {
                let (t, masks) = forward_gt(&gt, &v[0], &v[1])?;
                let m = masks.level(1).expect("masked variant");
                project(&t, 23)?.add(&project(&m.diff, 24)?)
            },
            &[observed.clone(), cand.clone()],
        )?;
    }
    Ok(out)
}
