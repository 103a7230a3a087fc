//! Network construction and evaluation: the reflection estimator, the
//! guided transmission network, the single-stage variant, the
//! discriminator and the frozen perceptual feature pyramid.

mod aux;
mod unet;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Shape, Tensor};

pub use aux::{forward_discriminator, perceptual_features};
pub use unet::{forward_gr, forward_gt, forward_one_stage, partial_conv, rag_block, MaskBundle, MaskLevel, MASK_EPS};

/// Channel scale as an exact fraction; `scale(c) = round(c · num / den)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Width {
    num: u32,
    den: u32,
}

impl Width {
    pub const FULL: Width = Width { num: 1, den: 1 };
    pub const DESK: Width = Width { num: 1, den: 8 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Invalid(format!("width {num}/{den} must be positive")));
        }
        if (64 * num as u64) < den as u64 {
            return Err(Error::Invalid(format!(
                "width {num}/{den} gives fewer than one channel at the 64-channel stage"
            )));
        }
        Ok(Width { num, den })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Scaled channel count, rounded half up; never zero for a valid width.
    pub fn scale(self, channels: usize) -> usize {
        let n = channels as u64 * self.num as u64;
        let d = self.den as u64;
        ((2 * n + d) / (2 * d)) as usize
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Width {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("width `{s}` is not a positive fraction like 1/8"));
        let (num, den) = match s.trim().split_once('/') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (s.trim(), "1"),
        };
        Width::new(num.parse().map_err(|_| bad())?, den.parse().map_err(|_| bad())?)
    }
}

/// Guidance and mask ablations of the transmission network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RagVariant {
    Full,
    /// Vanilla convolution on `concat(F_diff, F_dec)`; no mask head.
    NoMask,
    /// `conv(F ∘ M) + b` without the mask-mean renormalization.
    MaskNoRenorm,
    /// One mask channel for the difference group and one for the decoder group.
    TwoChannelMask,
    /// Encoder features of the observation replace `F_I − F_R`.
    NoDiff,
    /// Single encoder-decoder predicting the transmission directly.
    OneStage,
}

impl RagVariant {
    pub const ALL: [RagVariant; 6] = [
        RagVariant::Full,
        RagVariant::NoMask,
        RagVariant::MaskNoRenorm,
        RagVariant::TwoChannelMask,
        RagVariant::NoDiff,
        RagVariant::OneStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RagVariant::Full => "full",
            RagVariant::NoMask => "no_mask",
            RagVariant::MaskNoRenorm => "mask_no_renorm",
            RagVariant::TwoChannelMask => "two_channel_mask",
            RagVariant::NoDiff => "no_diff",
            RagVariant::OneStage => "one_stage",
        }
    }

    pub fn has_mask(self) -> bool {
        self != RagVariant::NoMask
    }

    pub(crate) fn code(self) -> u32 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u32
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for RagVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RagVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Invalid(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub width: Width,
    pub variant: RagVariant,
    pub use_adversarial: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: Width::DESK,
            variant: RagVariant::Full,
            use_adversarial: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    GR,
    GT,
    OneStage,
    Discriminator,
    Perceptual,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::GR => "g_r",
            NetworkKind::GT => "g_t",
            NetworkKind::OneStage => "one_stage",
            NetworkKind::Discriminator => "discriminator",
            NetworkKind::Perceptual => "perceptual",
        }
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Named parameters plus the wiring selected by `kind` and `config`.
/// Names are unique; order is construction order.
#[derive(Clone, Debug)]
pub struct Network<S: Scalar = f32> {
    kind: NetworkKind,
    config: ModelConfig,
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Network<S> {
    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    /// Perceptual extractor parameters never take gradients.
    pub fn is_frozen(&self) -> bool {
        self.kind == NetworkKind::Perceptual
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].tensor)
            .ok_or_else(|| Error::Invalid(format!("{} has no parameter `{name}`", self.kind)))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replaces a parameter's values with a fresh leaf of the same shape.
    pub fn set_param(&mut self, name: &str, values: Vec<S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("{} has no parameter `{name}`", self.kind)))?;
        let shape = self.params[i].tensor.shape();
        if values.len() != shape.numel() {
            return Err(shape_err!(
                "parameter `{name}` has shape {shape}, got {} values",
                values.len()
            ));
        }
        let leaf = Tensor::from_vec(shape, values)?.requires_grad_(!self.is_frozen());
        self.params[i].tensor = leaf;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Same parameters as constants, so no gradient reaches them.
    pub fn frozen(&self) -> Network<S> {
        let mut out = self.clone();
        for p in &mut out.params {
            p.tensor = p.tensor.detach();
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let trainable = !self.is_frozen();
        Network {
            kind: self.kind,
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast::<T>().requires_grad_(trainable),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

pub fn count_params<S: Scalar>(net: &Network<S>) -> usize {
    net.params.iter().map(|p| p.tensor.shape().numel()).sum()
}

/// Accumulates parameters in construction order with seeded He fan-in
/// normal weights and zero biases.
pub(crate) struct Builder<S: Scalar> {
    rng: rand_chacha::ChaCha8Rng,
    params: Vec<Parameter<S>>,
    trainable: bool,
}

impl<S: Scalar> Builder<S> {
    fn new(seed: u64, kind: NetworkKind) -> Self {
        Builder {
            rng: seed::rng(seed, seed::label(kind.name())),
            params: Vec::new(),
            trainable: kind != NetworkKind::Perceptual,
        }
    }

    fn push(&mut self, name: String, shape: Shape, std: f64) {
        let data = if std == 0.0 {
            vec![S::zero(); shape.numel()]
        } else {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..shape.numel())
                .map(|_| S::from_f64(normal.sample(&mut self.rng)))
                .collect()
        };
        let t = Tensor::from_vec(shape, data).expect("shape matches data");
        self.params.push(Parameter {
            name,
            tensor: t.requires_grad_(self.trainable),
        });
    }

    /// `(cout, cin, k, k)` weight and `cout` bias.
    pub(crate) fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        self.push(format!("{name}.w"), Shape::new(cout, cin, k, k), (2.0 / fan_in).sqrt());
        self.push(format!("{name}.b"), Shape::new(1, cout, 1, 1), 0.0);
    }

    /// `(cin, cout, 2, 2)` weight; each output pixel sees exactly one tap
    /// per input channel, so the fan-in is `cin`.
    pub(crate) fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize) {
        self.push(
            format!("{name}.w"),
            Shape::new(cin, cout, 2, 2),
            (2.0 / cin as f64).sqrt(),
        );
        self.push(format!("{name}.b"), Shape::new(1, cout, 1, 1), 0.0);
    }

    fn finish(self, kind: NetworkKind, config: ModelConfig) -> Network<S> {
        let mut index = HashMap::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let clash = index.insert(p.name.clone(), i);
            debug_assert!(clash.is_none(), "duplicate parameter {}", p.name);
        }
        Network {
            kind,
            config,
            params: self.params,
            index,
        }
    }
}

/// Builds a network with deterministic initialization from `config.seed`.
pub fn build_network<S: Scalar>(kind: NetworkKind, config: &ModelConfig) -> Result<Network<S>> {
    let width = Width::new(config.width.num, config.width.den)?;
    let mut b = Builder::new(config.seed, kind);
    match kind {
        NetworkKind::GR => {
            unet::build_encoder(&mut b, "enc", width, unet::FULL_DEPTH);
            unet::build_decoder(&mut b, width, unet::Guidance::Plain);
        }
        NetworkKind::GT => {
            if config.variant == RagVariant::OneStage {
                return Err(Error::Invalid(
                    "variant one_stage has no separate g_t; build one_stage instead".into(),
                ));
            }
            unet::build_encoder(&mut b, "enc_i", width, unet::FULL_DEPTH);
            unet::build_encoder(&mut b, "enc_r", width, unet::GUIDE_DEPTH);
            unet::build_decoder(&mut b, width, unet::Guidance::Dual(config.variant));
        }
        NetworkKind::OneStage => {
            unet::build_encoder(&mut b, "enc", width, unet::FULL_DEPTH);
            unet::build_decoder(&mut b, width, unet::Guidance::Single);
        }
        NetworkKind::Discriminator => aux::build_discriminator(&mut b, width),
        NetworkKind::Perceptual => aux::build_perceptual(&mut b, width),
    }
    Ok(b.finish(kind, *config))
}

/// The generator pair used for training and inference. `g_r` is absent for
/// the single-stage variant.
#[derive(Clone, Debug)]
pub struct Generator<S: Scalar = f32> {
    pub g_r: Option<Network<S>>,
    pub g_t: Network<S>,
}

/// Outputs of one generator pass.
pub struct Prediction<S: Scalar> {
    pub reflection: Option<Tensor<S>>,
    pub transmission: Tensor<S>,
    pub masks: MaskBundle<S>,
}

impl<S: Scalar> Generator<S> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        if config.variant == RagVariant::OneStage {
            Ok(Generator {
                g_r: None,
                g_t: build_network(NetworkKind::OneStage, config)?,
            })
        } else {
            Ok(Generator {
                g_r: Some(build_network(NetworkKind::GR, config)?),
                g_t: build_network(NetworkKind::GT, config)?,
            })
        }
    }

    pub fn forward(&self, observed: &Tensor<S>) -> Result<Prediction<S>> {
        match &self.g_r {
            Some(g_r) => {
                let r_hat = forward_gr(g_r, observed)?;
                let (t_hat, masks) = forward_gt(&self.g_t, observed, &r_hat)?;
                Ok(Prediction {
                    reflection: Some(r_hat),
                    transmission: t_hat,
                    masks,
                })
            }
            None => {
                let (t_hat, masks) = forward_one_stage(&self.g_t, observed)?;
                Ok(Prediction {
                    reflection: None,
                    transmission: t_hat,
                    masks,
                })
            }
        }
    }

    pub fn networks(&self) -> impl Iterator<Item = &Network<S>> {
        self.g_r.iter().chain(std::iter::once(&self.g_t))
    }

    pub fn count_params(&self) -> usize {
        self.networks().map(count_params).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scaling_rounds_and_rejects_zero() {
        let w = Width::new(1, 8).unwrap();
        assert_eq!(w.scale(64), 8);
        assert_eq!(w.scale(3), 0);
        assert_eq!(Width::new(1, 3).unwrap().scale(64), 21);
        assert!(Width::new(1, 65).is_err());
        assert!(Width::new(0, 1).is_err());
        assert_eq!("1/8".parse::<Width>().unwrap(), Width::DESK);
        assert_eq!("1".parse::<Width>().unwrap(), Width::FULL);
        assert!("x/2".parse::<Width>().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in RagVariant::ALL {
            assert_eq!(v.name().parse::<RagVariant>().unwrap(), v);
            assert_eq!(RagVariant::from_code(v.code()), Some(v));
        }
        assert!("bogus".parse::<RagVariant>().is_err());
    }

    #[test]
    fn single_conv_count() {
        let mut b = Builder::<f32>::new(0, NetworkKind::GR);
        b.conv("c", 3, 64, 3);
        let net = b.finish(NetworkKind::GR, ModelConfig::default());
        assert_eq!(count_params(&net), 1792);
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = ModelConfig::default();
        let a = build_network::<f32>(NetworkKind::GT, &cfg).unwrap();
        let b = build_network::<f32>(NetworkKind::GT, &cfg).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert!(p
                .tensor
                .data()
                .iter()
                .zip(q.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let other = build_network::<f32>(NetworkKind::GT, &ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params()[0].tensor.to_vec(), other.params()[0].tensor.to_vec());
    }

    #[test]
    fn set_param_checks_shape_and_keeps_trainable() {
        let mut net = build_network::<f32>(NetworkKind::GR, &ModelConfig::default()).unwrap();
        assert!(net.set_param("dec.out.b", vec![0.0; 2]).is_err());
        assert!(net.set_param("nope", vec![]).is_err());
        net.set_param("dec.out.b", vec![0.5; 3]).unwrap();
        assert!(net.param("dec.out.b").unwrap().requires_grad());
    }

    #[test]
    fn one_stage_config_rejects_gt() {
        let cfg = ModelConfig {
            variant: RagVariant::OneStage,
            ..Default::default()
        };
        assert!(build_network::<f32>(NetworkKind::GT, &cfg).is_err());
        let g = Generator::<f32>::build(&cfg).unwrap();
        assert!(g.g_r.is_none());
    }
}
