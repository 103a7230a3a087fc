use super::unet::conv;
use super::{Builder, Network, NetworkKind, Width};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{concat_channels, maxpool2x2, Scalar, Tensor};

const DISC_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub(crate) const DISC_SLOPE: f64 = 0.2;

/// Perceptual stages as base widths; two 3×3 convs each, pooling between.
const PERCEP_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

pub(crate) fn build_discriminator<S: Scalar>(b: &mut Builder<S>, width: Width) {
    let mut cin = 6;
    for (i, &c) in DISC_CHANNELS.iter().enumerate() {
        let c = width.scale(c);
        b.conv(&format!("d.c{}", i + 1), cin, c, 3);
        cin = c;
    }
    b.conv("d.head", cin, 1, 1);
}

pub(crate) fn build_perceptual<S: Scalar>(b: &mut Builder<S>, width: Width) {
    let mut cin = 3;
    for (i, &c) in PERCEP_CHANNELS.iter().enumerate() {
        let c = width.scale(c);
        b.conv(&format!("p.s{}.c1", i + 1), cin, c, 3);
        b.conv(&format!("p.s{}.c2", i + 1), c, c, 3);
        cin = c;
    }
}

/// Probability per sample, shape `(N,1,1,1)`, that `candidate` is a real
/// transmission layer of `observed`.
pub fn forward_discriminator<S: Scalar>(
    net: &Network<S>,
    observed: &Tensor<S>,
    candidate: &Tensor<S>,
) -> Result<Tensor<S>> {
    if net.kind() != NetworkKind::Discriminator {
        return Err(Error::Invalid(format!("expected a discriminator, got {}", net.kind())));
    }
    if observed.shape() != candidate.shape() {
        return Err(shape_err!(
            "forward_discriminator: observation {} and candidate {} differ",
            observed.shape(),
            candidate.shape()
        ));
    }
    let mut h = concat_channels(observed, candidate)?;
    for i in 0..DISC_CHANNELS.len() {
        h = conv(net, &format!("d.c{}", i + 1), &h, 2)?.leaky_relu(DISC_SLOPE);
    }
    Ok(conv(net, "d.head", &h.spatial_mean(), 1)?.sigmoid())
}

/// Feature maps after the second ReLU of each of the five stages.
pub fn perceptual_features<S: Scalar>(net: &Network<S>, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    if net.kind() != NetworkKind::Perceptual {
        return Err(Error::Invalid(format!(
            "expected a perceptual extractor, got {}",
            net.kind()
        )));
    }
    let mut feats = Vec::with_capacity(PERCEP_CHANNELS.len());
    let mut h = x.clone();
    for i in 0..PERCEP_CHANNELS.len() {
        if i > 0 {
            h = maxpool2x2(&h)?;
        }
        h = conv(net, &format!("p.s{}.c1", i + 1), &h, 1)?.relu();
        h = conv(net, &format!("p.s{}.c2", i + 1), &h, 1)?.relu();
        feats.push(h.clone());
    }
    Ok(feats)
}
