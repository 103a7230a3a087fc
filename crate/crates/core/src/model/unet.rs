use super::{Builder, Network, NetworkKind, RagVariant, Width};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{concat_channels, conv2d, conv_transpose2d, mask_mean3x3, maxpool2x2, renormalize, Scalar, Tensor};

/// Division guard for the mask-mean renormalization.
pub const MASK_EPS: f64 = 1e-8;

/// Encoder stages as (base channels, conv count); features are taken before
/// each pooling.
const ENCODER: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

/// Decoder levels from coarse to fine: (level, skip/upsampled channels,
/// fused conv output, trailing conv outputs).
const DECODER: [(usize, usize, usize, &[usize]); 4] = [
    (4, 512, 1024, &[1024, 1024, 1024, 256]),
    (3, 256, 512, &[512, 512, 512, 128]),
    (2, 128, 256, &[256, 64]),
    (1, 64, 128, &[128, 64]),
];

/// How a decoder level merges its skip feature with the upsampled one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Guidance {
    /// Concatenate and convolve.
    Plain,
    /// Two encoders with a guidance block per level.
    Dual(RagVariant),
    /// One encoder, difference against the decoder feature.
    Single,
}

/// Every stage feeds the decoder in the observation encoder; the
/// reflection encoder stops one stage short since its deepest feature has
/// no consumer.
pub(crate) const FULL_DEPTH: usize = 5;
pub(crate) const GUIDE_DEPTH: usize = 4;

pub(crate) fn build_encoder<S: Scalar>(b: &mut Builder<S>, prefix: &str, width: Width, stages: usize) {
    let mut cin = 3;
    for (s, &(base, convs)) in ENCODER.iter().enumerate().take(stages) {
        let c = width.scale(base);
        for j in 0..convs {
            b.conv(&format!("{prefix}.s{}.c{}", s + 1, j + 1), cin, c, 3);
            cin = c;
        }
    }
}

pub(crate) fn build_decoder<S: Scalar>(b: &mut Builder<S>, width: Width, guidance: Guidance) {
    let mut prev = width.scale(ENCODER[4].0);
    for &(level, base, fused, trailing) in &DECODER {
        let skip = width.scale(base);
        let name = |part: &str| format!("dec.l{level}.{part}");
        b.conv_transpose(&name("up"), prev, skip);
        let head_in = match guidance {
            Guidance::Plain | Guidance::Dual(RagVariant::NoMask) => None,
            Guidance::Dual(_) => Some(3 * skip),
            Guidance::Single => Some(2 * skip),
        };
        if let Some(cin) = head_in {
            let cout = match guidance {
                Guidance::Dual(RagVariant::TwoChannelMask) => 2,
                _ => 2 * skip,
            };
            b.conv(&name("mask.hidden"), cin, cin, 1);
            b.conv(&name("mask.out"), cin, cout, 1);
        }
        let mut c = width.scale(fused);
        b.conv(&name("fuse"), 2 * skip, c, 3);
        for (j, &out) in trailing.iter().enumerate() {
            let out = width.scale(out);
            b.conv(&name(&format!("c{}", j + 1)), c, out, 3);
            c = out;
        }
        prev = c;
    }
    b.conv("dec.out", prev, 3, 3);
}

fn check_input<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<()> {
    let s = x.shape();
    if s.c != 3 {
        return Err(shape_err!("{what}: expected 3 channels, got {}", s.c));
    }
    if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) || s.h == 0 || s.w == 0 {
        let pad = |d: usize| (16 - d % 16) % 16;
        return Err(shape_err!(
            "{what}: spatial size {}x{} must be a positive multiple of 16; pad by {} rows and {} columns",
            s.h,
            s.w,
            pad(s.h),
            pad(s.w)
        ));
    }
    Ok(())
}

fn expect_kind<S: Scalar>(net: &Network<S>, kind: NetworkKind) -> Result<()> {
    if net.kind() != kind {
        return Err(Error::Invalid(format!("expected a {kind} network, got {}", net.kind())));
    }
    Ok(())
}

pub(crate) fn conv<S: Scalar>(net: &Network<S>, name: &str, x: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let w = net.param(&format!("{name}.w"))?;
    let pad = w.shape().h / 2;
    conv2d(x, w, Some(net.param(&format!("{name}.b"))?), stride, pad)
}

/// Encoder features at full, 1/2, 1/4, 1/8 and 1/16 resolution, the first
/// `stages` of them.
pub(crate) fn encode<S: Scalar>(
    net: &Network<S>,
    prefix: &str,
    x: &Tensor<S>,
    stages: usize,
) -> Result<Vec<Tensor<S>>> {
    let mut feats = Vec::with_capacity(stages);
    let mut h = x.clone();
    for (s, &(_, convs)) in ENCODER.iter().enumerate().take(stages) {
        if s > 0 {
            h = maxpool2x2(&h)?;
        }
        for j in 0..convs {
            h = conv(net, &format!("{prefix}.s{}.c{}", s + 1, j + 1), &h, 1)?.relu();
        }
        feats.push(h.clone());
    }
    Ok(feats)
}

/// Masks of one decoder level: one governing the skip (difference) group
/// and one governing the upsampled decoder group.
#[derive(Clone, Debug)]
pub struct MaskLevel<S: Scalar> {
    pub diff: Tensor<S>,
    pub dec: Tensor<S>,
}

/// Masks ordered from the finest level (1, full resolution) to the coarsest
/// (4, 1/8 resolution). Empty when the variant has no mask.
#[derive(Clone, Debug)]
pub struct MaskBundle<S: Scalar> {
    levels: Vec<MaskLevel<S>>,
}

impl<S: Scalar> MaskBundle<S> {
    pub fn empty() -> Self {
        MaskBundle { levels: Vec::new() }
    }

    /// Builds a bundle from alternating `diff, dec` tensors, finest level
    /// first, each level half the resolution of the previous.
    pub fn from_pairs(tensors: &[Tensor<S>]) -> Result<Self> {
        if !tensors.len().is_multiple_of(2) {
            return Err(shape_err!("MaskBundle::from_pairs: odd tensor count {}", tensors.len()));
        }
        let mut levels: Vec<MaskLevel<S>> = Vec::with_capacity(tensors.len() / 2);
        for pair in tensors.chunks(2) {
            let (d, e) = (pair[0].shape(), pair[1].shape());
            if d.n != e.n || d.h != e.h || d.w != e.w {
                return Err(shape_err!("MaskBundle::from_pairs: {d} and {e} differ spatially"));
            }
            if let Some(prev) = levels.last().map(|l| l.diff.shape()) {
                if prev.h != 2 * d.h || prev.w != 2 * d.w {
                    return Err(shape_err!("MaskBundle::from_pairs: level {d} is not half of {prev}"));
                }
            }
            levels.push(MaskLevel {
                diff: pair[0].clone(),
                dec: pair[1].clone(),
            });
        }
        Ok(MaskBundle { levels })
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    /// Level `i` in `1..=4`.
    pub fn level(&self, i: usize) -> Option<&MaskLevel<S>> {
        i.checked_sub(1).and_then(|k| self.levels.get(k))
    }

    pub fn levels(&self) -> &[MaskLevel<S>] {
        &self.levels
    }
}

fn mask_head<S: Scalar>(net: &Network<S>, level: usize, input: &Tensor<S>) -> Result<Tensor<S>> {
    let hidden = conv(net, &format!("dec.l{level}.mask.hidden"), input, 1)?.relu();
    Ok(conv(net, &format!("dec.l{level}.mask.out"), &hidden, 1)?.sigmoid())
}

fn split_mask<S: Scalar>(raw: Tensor<S>, skip: usize, variant: RagVariant) -> Result<MaskLevel<S>> {
    let c = raw.shape().c;
    if variant == RagVariant::TwoChannelMask {
        Ok(MaskLevel {
            diff: raw.slice_channels(0, 1)?,
            dec: raw.slice_channels(1, 1)?,
        })
    } else {
        Ok(MaskLevel {
            diff: raw.slice_channels(0, skip)?,
            dec: raw.slice_channels(skip, c - skip)?,
        })
    }
}

/// Guidance block of one decoder level: the difference feature
/// `F_I − F_R` (or `F_I` under `NoDiff`) and the sigmoid mask computed from
/// `concat(F_I, F_R, F_dec)` by two 1×1 convolutions.
pub fn rag_block<S: Scalar>(
    net: &Network<S>,
    level: usize,
    f_obs: &Tensor<S>,
    f_refl: &Tensor<S>,
    f_dec: &Tensor<S>,
) -> Result<(Tensor<S>, Option<MaskLevel<S>>)> {
    let (a, r, d) = (f_obs.shape(), f_refl.shape(), f_dec.shape());
    if a != r {
        return Err(shape_err!(
            "rag_block: observation feature {a} vs reflection feature {r}"
        ));
    }
    if d.n != a.n || d.h != a.h || d.w != a.w {
        return Err(shape_err!(
            "rag_block: decoder feature {d} does not match skip {a} spatially"
        ));
    }
    let variant = net.config().variant;
    let diff = match variant {
        RagVariant::NoDiff => f_obs.clone(),
        _ => f_obs.sub(f_refl)?,
    };
    if !variant.has_mask() {
        return Ok((diff, None));
    }
    let head_in = concat_channels(&concat_channels(f_obs, f_refl)?, f_dec)?;
    let raw = mask_head(net, level, &head_in)?;
    Ok((diff, Some(split_mask(raw, a.c, variant)?)))
}

/// Mask-renormalized convolution: `conv(F ∘ M) / M̄ + b` where `M̄ > ε`,
/// else `0`. `M̄` is the 3×3 zero-padded mask mean averaged over input
/// channels, one value per pixel shared by all outputs. With `renorm`
/// false this is `conv(F ∘ M) + b`.
pub fn partial_conv<S: Scalar>(
    features: &Tensor<S>,
    mask: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    renorm: bool,
) -> Result<Tensor<S>> {
    if features.shape() != mask.shape() {
        return Err(shape_err!(
            "partial_conv: features {} and mask {} differ",
            features.shape(),
            mask.shape()
        ));
    }
    if weight.shape().h != 3 || weight.shape().w != 3 {
        return Err(shape_err!("partial_conv: kernel must be 3x3, got {}", weight.shape()));
    }
    let masked = features.mul(mask)?;
    if !renorm {
        return conv2d(&masked, weight, Some(bias), 1, 1);
    }
    let raw = conv2d(&masked, weight, None, 1, 1)?;
    let mbar = mask_mean3x3(mask)?.channel_mean();
    renormalize(&raw, &mbar, bias, MASK_EPS)
}

fn full_mask<S: Scalar>(m: &MaskLevel<S>, skip: usize, up: usize) -> Result<Tensor<S>> {
    let widen = |t: &Tensor<S>, c: usize| {
        if t.shape().c == c {
            Ok(t.clone())
        } else {
            t.expand_channels(c)
        }
    };
    concat_channels(&widen(&m.diff, skip)?, &widen(&m.dec, up)?)
}

/// Shared decoder. `skip` supplies each level's fused feature and mask from
/// the upsampled decoder feature.
fn decode<S, F>(net: &Network<S>, bottom: &Tensor<S>, mut fuse: F) -> Result<(Tensor<S>, MaskBundle<S>)>
where
    S: Scalar,
    F: FnMut(usize, usize, &Tensor<S>) -> Result<(Tensor<S>, Option<MaskLevel<S>>)>,
{
    let mut h = bottom.clone();
    let mut levels = Vec::new();
    for (k, &(level, _, _, trailing)) in DECODER.iter().enumerate() {
        let name = |part: &str| format!("dec.l{level}.{part}");
        let up = conv_transpose2d(&h, net.param(&name("up.w"))?, Some(net.param(&name("up.b"))?))?;
        let (fused, mask) = fuse(level, 3 - k, &up)?;
        h = fused.relu();
        levels.extend(mask);
        for j in 0..trailing.len() {
            h = conv(net, &name(&format!("c{}", j + 1)), &h, 1)?.relu();
        }
    }
    let out = conv(net, "dec.out", &h, 1)?.sigmoid();
    levels.reverse();
    Ok((out, MaskBundle { levels }))
}

fn fuse_conv<S: Scalar>(
    net: &Network<S>,
    level: usize,
    skip: &Tensor<S>,
    up: &Tensor<S>,
    mask: Option<&MaskLevel<S>>,
) -> Result<Tensor<S>> {
    let features = concat_channels(skip, up)?;
    let name = format!("dec.l{level}.fuse");
    let Some(m) = mask else {
        return conv(net, &name, &features, 1);
    };
    let m = full_mask(m, skip.shape().c, up.shape().c)?;
    let renorm = net.config().variant != RagVariant::MaskNoRenorm;
    partial_conv(
        &features,
        &m,
        net.param(&format!("{name}.w"))?,
        net.param(&format!("{name}.b"))?,
        renorm,
    )
}

/// Reflection estimate, a plain U-Net with a sigmoid output.
pub fn forward_gr<S: Scalar>(net: &Network<S>, observed: &Tensor<S>) -> Result<Tensor<S>> {
    expect_kind(net, NetworkKind::GR)?;
    check_input(observed, "forward_gr")?;
    let feats = encode(net, "enc", observed, FULL_DEPTH)?;
    let (out, _) = decode(net, &feats[4], |level, k, up| {
        Ok((fuse_conv(net, level, &feats[k], up, None)?, None))
    })?;
    Ok(out)
}

/// Transmission estimate guided by the reflection estimate, with the masks
/// of all four decoder levels.
pub fn forward_gt<S: Scalar>(
    net: &Network<S>,
    observed: &Tensor<S>,
    reflection: &Tensor<S>,
) -> Result<(Tensor<S>, MaskBundle<S>)> {
    expect_kind(net, NetworkKind::GT)?;
    check_input(observed, "forward_gt")?;
    if observed.shape() != reflection.shape() {
        return Err(shape_err!(
            "forward_gt: observation {} and reflection {} differ",
            observed.shape(),
            reflection.shape()
        ));
    }
    let f_obs = encode(net, "enc_i", observed, FULL_DEPTH)?;
    let f_refl = encode(net, "enc_r", reflection, GUIDE_DEPTH)?;
    decode(net, &f_obs[4], |level, k, up| {
        let (diff, mask) = rag_block(net, level, &f_obs[k], &f_refl[k], up)?;
        let fused = fuse_conv(net, level, &diff, up, mask.as_ref())?;
        Ok((fused, mask))
    })
}

/// Single encoder-decoder; each level guides with `F_I − F_dec`.
pub fn forward_one_stage<S: Scalar>(net: &Network<S>, observed: &Tensor<S>) -> Result<(Tensor<S>, MaskBundle<S>)> {
    expect_kind(net, NetworkKind::OneStage)?;
    check_input(observed, "forward_one_stage")?;
    let feats = encode(net, "enc", observed, FULL_DEPTH)?;
    decode(net, &feats[4], |level, k, up| {
        let skip = &feats[k];
        let diff = skip.sub(up)?;
        let raw = mask_head(net, level, &concat_channels(skip, up)?)?;
        let mask = split_mask(raw, skip.shape().c, RagVariant::Full)?;
        let fused = fuse_conv(net, level, &diff, up, Some(&mask))?;
        Ok((fused, Some(mask)))
    })
}

#[cfg(test)]
mod tests {
    use super::super::{build_network, count_params, ModelConfig};
    use super::*;

    fn cfg(variant: RagVariant) -> ModelConfig {
        ModelConfig {
            width: Width::new(1, 16).unwrap(),
            variant,
            use_adversarial: false,
            seed: 3,
        }
    }

    fn image(seed: u64, h: usize) -> Tensor<f32> {
        let mut rng = crate::seed::rng(seed, 0);
        use rand::Rng;
        Tensor::from_vec([1, 3, h, h], (0..3 * h * h).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn gr_shape_range_and_zero_output_layer() {
        let mut net = build_network::<f32>(NetworkKind::GR, &cfg(RagVariant::Full)).unwrap();
        let x = image(1, 32);
        let y = forward_gr(&net, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let n = net.param("dec.out.w").unwrap().shape().numel();
        net.set_param("dec.out.w", vec![0.0; n]).unwrap();
        assert!(forward_gr(&net, &x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let net = build_network::<f32>(NetworkKind::GR, &cfg(RagVariant::Full)).unwrap();
        let err = forward_gr(&net, &image(1, 24)).unwrap_err().to_string();
        assert!(err.contains("pad by 8 rows"), "{err}");
    }

    #[test]
    fn gt_masks_cover_four_levels() {
        for variant in [
            RagVariant::Full,
            RagVariant::TwoChannelMask,
            RagVariant::MaskNoRenorm,
            RagVariant::NoDiff,
        ] {
            let net = build_network::<f32>(NetworkKind::GT, &cfg(variant)).unwrap();
            let (t, masks) = forward_gt(&net, &image(1, 32), &image(2, 32)).unwrap();
            assert_eq!(t.shape().dims(), [1, 3, 32, 32]);
            assert_eq!(masks.len(), 4);
            for (i, side) in [(1, 32), (2, 16), (3, 8), (4, 4)] {
                let m = masks.level(i).unwrap();
                assert_eq!(m.diff.shape().h, side);
                for v in m.diff.data().iter().chain(m.dec.data()) {
                    assert!(*v > 0.0 && *v < 1.0);
                }
                if variant == RagVariant::TwoChannelMask {
                    assert_eq!(m.diff.shape().c, 1);
                }
            }
        }
    }

    #[test]
    fn no_mask_variant_returns_no_masks() {
        let net = build_network::<f32>(NetworkKind::GT, &cfg(RagVariant::NoMask)).unwrap();
        let (_, masks) = forward_gt(&net, &image(1, 16), &image(2, 16)).unwrap();
        assert!(masks.is_empty());
    }

    #[test]
    fn identical_features_give_zero_difference() {
        let net = build_network::<f32>(NetworkKind::GT, &cfg(RagVariant::Full)).unwrap();
        let f = image(4, 16).slice_channels(0, 2).unwrap();
        let f = concat_channels(&f, &f).unwrap();
        let (diff, mask) = rag_block(&net, 1, &f, &f, &f).unwrap();
        assert!(diff.data().iter().all(|&v| v == 0.0));
        assert!(mask.is_some());
    }

    #[test]
    fn wrong_network_kind_is_rejected() {
        let net = build_network::<f32>(NetworkKind::GR, &cfg(RagVariant::Full)).unwrap();
        assert!(forward_gt(&net, &image(1, 16), &image(1, 16)).is_err());
    }

    #[test]
    fn width_is_monotone() {
        let at = |d| {
            let c = ModelConfig {
                width: Width::new(1, d).unwrap(),
                ..cfg(RagVariant::Full)
            };
            count_params(&build_network::<f32>(NetworkKind::GT, &c).unwrap())
        };
        assert!(at(8) < at(4));
        assert!(at(16) < at(8));
    }

    #[test]
    fn partial_conv_zero_mask_suppresses_bias() {
        let f = image(1, 16);
        let w = Tensor::full([2, 3, 3, 3], 0.3f32);
        let b = Tensor::full([1, 2, 1, 1], 0.7f32);
        let y = partial_conv(&f, &Tensor::zeros(f.shape()), &w, &b, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
