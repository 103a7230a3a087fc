//! Training objectives. Batched losses are per-sample values averaged over
//! the batch, so a batch of one reproduces the single-image formulas.

use crate::error::{shape_err, Error, Result};
use crate::model::{forward_discriminator, perceptual_features, MaskBundle, Network};
use crate::tensor::{concat_channels, downsample2x, spatial_gradient, Scalar, Shape, Tensor};

/// Bound applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;
/// Scales whose reflection gradient mass falls below this contribute nothing
/// to the exclusion loss.
pub const EXCLUSION_FLOOR: f64 = 1e-8;
const EXCLUSION_SCALES: usize = 3;
const LAMBDA_T: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub percep: f64,
    pub excl: f64,
    pub adv: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            percep: 1.0,
            excl: 0.2,
            adv: 0.01,
            mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("percep", self.percep),
            ("excl", self.excl),
            ("adv", self.adv),
            ("mask", self.mask),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!(
                    "loss weight {name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Reflection-intensity thresholds: heavy above `phi`, clean below `xi`,
/// and the weak/strong evaluation split at `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskThresholds {
    pub phi: f64,
    pub xi: f64,
    pub tau: f64,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            phi: 0.3,
            xi: 0.01,
            tau: 0.40,
        }
    }
}

impl MaskThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("phi", self.phi), ("xi", self.xi), ("tau", self.tau)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("threshold {name} = {v} must lie in (0,1)")));
            }
        }
        if self.xi >= self.phi {
            return Err(Error::Invalid(format!(
                "threshold xi = {} must be below phi = {}",
                self.xi, self.phi
            )));
        }
        Ok(())
    }
}

/// `Sum` keeps raw ℓ1 sums; `Mean` divides by the number of entries summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// How the reflection-side gradient scale of the exclusion loss is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ExclusionScale {
    /// `‖∇T‖₁ / ‖∇R‖₁` per scale, held constant for differentiation.
    #[default]
    Adaptive,
    Fixed(f64),
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(N,c,h,w)` constant holding `keep[n]` as 0/1 for every entry of sample n.
fn sample_weights<S: Scalar>(shape: Shape, keep: &[bool]) -> Result<Tensor<S>> {
    if keep.len() != shape.n {
        return Err(shape_err!("{} sample flags for a batch of {}", keep.len(), shape.n));
    }
    let per = shape.numel() / shape.n.max(1);
    let data = keep
        .iter()
        .flat_map(|&k| std::iter::repeat_n(if k { S::one() } else { S::zero() }, per))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Batch-averaged ℓ1 distance, with optional per-sample inclusion.
fn l1_term<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    keep: Option<&[bool]>,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    same_shape(pred, target, "l1 term")?;
    let s = pred.shape();
    let mut diff = pred.sub(target)?;
    if let Some(keep) = keep {
        if keep.iter().all(|&k| !k) {
            return Ok(Tensor::scalar(S::zero()));
        }
        diff = diff.mul(&sample_weights(s, keep)?)?;
    }
    let total = diff.l1_norm();
    let denom = match reduction {
        Reduction::Sum => s.n,
        Reduction::Mean => s.numel(),
    };
    Ok(total.scale(1.0 / denom.max(1) as f64))
}

/// `‖T̂ − T‖₁ + ‖R̂ − R‖₁`; the reflection term covers only samples with
/// `has_reflection[n]` set.
pub fn rec_loss<S: Scalar>(
    t_hat: &Tensor<S>,
    t: &Tensor<S>,
    reflection: Option<(&Tensor<S>, &Tensor<S>)>,
    has_reflection: &[bool],
    reduction: Reduction,
) -> Result<Tensor<S>> {
    let mut loss = l1_term(t_hat, t, None, reduction)?;
    if let Some((r_hat, r)) = reflection {
        loss = loss.add(&l1_term(r_hat, r, Some(has_reflection), reduction)?)?;
    }
    Ok(loss)
}

/// `‖R̂ − R‖₁` alone, over samples with reflection ground truth. Used while
/// the reflection network trains by itself.
pub fn reflection_rec_loss<S: Scalar>(
    r_hat: &Tensor<S>,
    r: &Tensor<S>,
    has_reflection: &[bool],
    reduction: Reduction,
) -> Result<Tensor<S>> {
    l1_term(r_hat, r, Some(has_reflection), reduction)
}

/// `Σ_l κ_l ‖φ_l(Ŷ) − φ_l(Y)‖₁` with `κ_l = 1/(C_l·H_l·W_l)`.
fn feature_distance<S: Scalar>(
    extractor: &Network<S>,
    pred: &Tensor<S>,
    target: &Tensor<S>,
    keep: Option<&[bool]>,
) -> Result<Tensor<S>> {
    same_shape(pred, target, "perceptual")?;
    let fp = perceptual_features(extractor, pred)?;
    let ft = perceptual_features(extractor, &target.detach())?;
    let mut loss = Tensor::scalar(S::zero());
    for (a, b) in fp.iter().zip(&ft) {
        // Mean over the batch of κ_l·Σ|·| is the mean over every entry.
        loss = loss.add(&l1_term(a, &b.detach(), keep, Reduction::Mean)?)?;
    }
    Ok(loss)
}

pub fn perceptual_loss<S: Scalar>(
    extractor: &Network<S>,
    t_hat: &Tensor<S>,
    t: &Tensor<S>,
    reflection: Option<(&Tensor<S>, &Tensor<S>)>,
    has_reflection: &[bool],
) -> Result<Tensor<S>> {
    let mut loss = feature_distance(extractor, t_hat, t, None)?;
    if let Some((r_hat, r)) = reflection {
        if has_reflection.iter().any(|&k| k) {
            loss = loss.add(&feature_distance(extractor, r_hat, r, Some(has_reflection))?)?;
        }
    }
    Ok(loss)
}

/// Perceptual distance of `R̂` alone, over samples with reflection ground
/// truth.
pub fn reflection_perceptual_loss<S: Scalar>(
    extractor: &Network<S>,
    r_hat: &Tensor<S>,
    r: &Tensor<S>,
    has_reflection: &[bool],
) -> Result<Tensor<S>> {
    if !has_reflection.iter().any(|&k| k) {
        return Ok(Tensor::scalar(S::zero()));
    }
    feature_distance(extractor, r_hat, r, Some(has_reflection))
}

fn abs_sum<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data().iter().chain(b.data()).map(|v| v.as_f64().abs()).sum()
}

fn exclusion_single<S: Scalar>(t: &Tensor<S>, r: &Tensor<S>, scale: ExclusionScale) -> Result<Tensor<S>> {
    let (mut t, mut r) = (t.clone(), r.clone());
    let mut total = Tensor::scalar(S::zero());
    for level in 0..EXCLUSION_SCALES {
        if level > 0 {
            t = downsample2x(&t)?;
            r = downsample2x(&r)?;
        }
        let (tx, ty) = spatial_gradient(&t)?;
        let (rx, ry) = spatial_gradient(&r)?;
        let r_mass = abs_sum(&rx, &ry);
        if r_mass < EXCLUSION_FLOOR {
            continue;
        }
        let lambda_r = match scale {
            ExclusionScale::Adaptive => abs_sum(&tx, &ty) / r_mass,
            ExclusionScale::Fixed(v) => v,
        };
        let psi =
            |gt: &Tensor<S>, gr: &Tensor<S>| gt.abs().scale(LAMBDA_T).tanh().mul(&gr.abs().scale(lambda_r).tanh());
        let joint = concat_channels(&psi(&tx, &rx)?, &psi(&ty, &ry)?)?;
        total = total.add(&joint.frobenius_norm().sqrt())?;
    }
    Ok(total.scale(1.0 / EXCLUSION_SCALES as f64))
}

/// Multi-scale penalty on co-located gradients of the two layers.
pub fn exclusion_loss<S: Scalar>(t_hat: &Tensor<S>, r_hat: &Tensor<S>, scale: ExclusionScale) -> Result<Tensor<S>> {
    same_shape(t_hat, r_hat, "exclusion_loss")?;
    let s = t_hat.shape();
    let div = 1 << (EXCLUSION_SCALES - 1);
    if !s.h.is_multiple_of(div) || !s.w.is_multiple_of(div) || s.h < 2 * div || s.w < 2 * div {
        return Err(shape_err!(
            "exclusion_loss: spatial size {}x{} must be a multiple of {div} and at least {}",
            s.h,
            s.w,
            2 * div
        ));
    }
    let mut total = Tensor::scalar(S::zero());
    for n in 0..s.n {
        let per = exclusion_single(&t_hat.select_batch(n)?, &r_hat.select_batch(n)?, scale)?;
        total = total.add(&per)?;
    }
    Ok(total.scale(1.0 / s.n.max(1) as f64))
}

/// Channel-mean luminance of `r`, average-pooled `times` times.
fn luminance_at<S: Scalar>(r: &Tensor<S>, times: usize) -> Result<Vec<f64>> {
    let mut l = r.detach().channel_mean();
    for _ in 0..times {
        l = downsample2x(&l)?;
    }
    Ok(l.data().iter().map(|v| v.as_f64()).collect())
}

/// Selection `(N,c,h,w)` from a per-pixel `(N,1,h,w)` predicate, together
/// with the number of selected entries.
fn selection<S: Scalar>(shape: Shape, lum: &[f64], keep: &[bool], pred: impl Fn(f64) -> bool) -> (Tensor<S>, usize) {
    let plane = shape.plane();
    let mut data = Vec::with_capacity(shape.numel());
    let mut count = 0;
    for n in 0..shape.n {
        for _ in 0..shape.c {
            for &v in &lum[n * plane..(n + 1) * plane] {
                let on = keep[n] && pred(v);
                count += on as usize;
                data.push(if on { S::one() } else { S::zero() });
            }
        }
    }
    (Tensor::from_vec(shape, data).expect("selection shape"), count)
}

fn selected_term<S: Scalar>(
    values: &Tensor<S>,
    sel: &Tensor<S>,
    count: usize,
    batch: usize,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    if count == 0 {
        return Ok(Tensor::scalar(S::zero()));
    }
    let sum = values.mul(sel)?.l1_norm();
    Ok(match reduction {
        Reduction::Sum => sum.scale(1.0 / batch as f64),
        Reduction::Mean => sum.scale(1.0 / count as f64),
    })
}

/// Drives the difference mask toward 0 where the reflection is heavy and all
/// masks toward 1 where it is nearly absent. Pixels in between are free.
/// Samples without reflection ground truth are excluded.
pub fn mask_loss<S: Scalar>(
    masks: &MaskBundle<S>,
    r_gt: &Tensor<S>,
    has_reflection: &[bool],
    thresholds: &MaskThresholds,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    let rs = r_gt.shape();
    if has_reflection.len() != rs.n {
        return Err(shape_err!(
            "mask_loss: {} sample flags for a batch of {}",
            has_reflection.len(),
            rs.n
        ));
    }
    let mut total = Tensor::scalar(S::zero());
    for (k, level) in masks.levels().iter().enumerate() {
        let ms = level.diff.shape();
        if ms.n != rs.n || ms.h << k != rs.h || ms.w << k != rs.w {
            return Err(shape_err!(
                "mask_loss: level {} mask {ms} does not match reflection {rs} downsampled {k} times",
                k + 1
            ));
        }
        let lum = luminance_at(r_gt, k)?;
        let heavy = |v: f64| v > thresholds.phi;
        let clean = |v: f64| v < thresholds.xi;

        let (sel, count) = selection::<S>(ms, &lum, has_reflection, heavy);
        total = total.add(&selected_term(&level.diff, &sel, count, rs.n, reduction)?)?;

        // The regularizer counts both groups as one term.
        let (sel_d, count_d) = selection::<S>(ms, &lum, has_reflection, clean);
        let (sel_e, count_e) = selection::<S>(level.dec.shape(), &lum, has_reflection, clean);
        let count = count_d + count_e;
        if count > 0 {
            let dev = concat_channels(&level.diff.add_scalar(-1.0), &level.dec.add_scalar(-1.0))?;
            let sel = concat_channels(&sel_d, &sel_e)?;
            total = total.add(&selected_term(&dev, &sel, count, rs.n, reduction)?)?;
        }
    }
    Ok(total)
}

fn log_prob<S: Scalar>(p: &Tensor<S>) -> Tensor<S> {
    p.ln_clamped(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// `−E[log D(real)] − E[log(1 − D(fake))]` from discriminator outputs.
pub fn d_loss_from_probs<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>) -> Result<Tensor<S>> {
    let on_real = log_prob(real).mean();
    let on_fake = log_prob(&fake.scale(-1.0).add_scalar(1.0)).mean();
    Ok(on_real.add(&on_fake)?.scale(-1.0))
}

/// `−E[log D(fake)]`.
pub fn g_loss_from_probs<S: Scalar>(fake: &Tensor<S>) -> Tensor<S> {
    log_prob(fake).mean().scale(-1.0)
}

/// Discriminator objective. The candidate is detached, so no gradient
/// reaches the generator.
pub fn adv_d_loss<S: Scalar>(
    disc: &Network<S>,
    observed: &Tensor<S>,
    t: &Tensor<S>,
    t_hat: &Tensor<S>,
) -> Result<Tensor<S>> {
    let real = forward_discriminator(disc, &observed.detach(), &t.detach())?;
    let fake = forward_discriminator(disc, &observed.detach(), &t_hat.detach())?;
    d_loss_from_probs(&real, &fake)
}

/// Generator adversarial objective; pass a frozen discriminator to keep its
/// parameters out of the graph.
pub fn adv_g_loss<S: Scalar>(disc: &Network<S>, observed: &Tensor<S>, t_hat: &Tensor<S>) -> Result<Tensor<S>> {
    let fake = forward_discriminator(disc, &observed.detach(), t_hat)?;
    Ok(g_loss_from_probs(&fake))
}

/// The five objective terms of one step; `adv` is absent when the
/// adversarial term is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts<T> {
    pub rec: T,
    pub percep: T,
    pub excl: T,
    pub adv: Option<T>,
    pub mask: T,
}

impl<S: Scalar> LossParts<Tensor<S>> {
    pub fn values(&self) -> LossParts<f64> {
        let v = |t: &Tensor<S>| t.item().map(|x| x.as_f64()).unwrap_or(f64::NAN);
        LossParts {
            rec: v(&self.rec),
            percep: v(&self.percep),
            excl: v(&self.excl),
            adv: self.adv.as_ref().map(v),
            mask: v(&self.mask),
        }
    }
}

/// `λ1·rec + λ2·percep + λ3·excl + λ4·adv + λ5·mask`.
pub fn total_loss<S: Scalar>(parts: &LossParts<Tensor<S>>, weights: &LossWeights) -> Result<Tensor<S>> {
    let mut total = parts.rec.scale(weights.rec).add(&parts.percep.scale(weights.percep))?;
    total = total.add(&parts.excl.scale(weights.excl))?;
    if let Some(adv) = &parts.adv {
        total = total.add(&adv.scale(weights.adv))?;
    }
    total.add(&parts.mask.scale(weights.mask))
}

impl LossParts<f64> {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        let mut t = weights.rec * self.rec + weights.percep * self.percep;
        t += weights.excl * self.excl;
        if let Some(adv) = self.adv {
            t += weights.adv * adv;
        }
        t + weights.mask * self.mask
    }
}
