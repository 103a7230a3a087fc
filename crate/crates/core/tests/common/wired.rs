//! A hand-wired transmission network without guidance masks, reading the
//! same named parameters but composed here from the tensor primitives.

use ragnet::model::Network;
use ragnet::tensor::{concat_channels, conv2d, conv_transpose2d, maxpool2x2};
use ragnet::Tensor;

fn conv(net: &Network<f32>, name: &str, x: &Tensor<f32>) -> Tensor<f32> {
    let w = net.param(&format!("{name}.w")).unwrap();
    let b = net.param(&format!("{name}.b")).unwrap();
    conv2d(x, w, Some(b), 1, w.shape().h / 2).unwrap()
}

fn encoder(net: &Network<f32>, prefix: &str, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut feats = Vec::new();
    let mut h = x.clone();
    for stage in 1.. {
        if !net.has_param(&format!("{prefix}.s{stage}.c1.w")) {
            break;
        }
        if stage > 1 {
            h = maxpool2x2(&h).unwrap();
        }
        let mut j = 1;
        while net.has_param(&format!("{prefix}.s{stage}.c{j}.w")) {
            h = conv(net, &format!("{prefix}.s{stage}.c{j}"), &h).relu();
            j += 1;
        }
        feats.push(h.clone());
    }
    feats
}

/// `F_I − F_R` at every level, concatenated with the upsampled decoder
/// feature and convolved.
pub fn vanilla_forward_gt(net: &Network<f32>, observed: &Tensor<f32>, reflection: &Tensor<f32>) -> Tensor<f32> {
    let f_i = encoder(net, "enc_i", observed);
    let f_r = encoder(net, "enc_r", reflection);
    let mut h = f_i.last().unwrap().clone();
    for level in (1..=4).rev() {
        let p = format!("dec.l{level}");
        let up = conv_transpose2d(
            &h,
            net.param(&format!("{p}.up.w")).unwrap(),
            Some(net.param(&format!("{p}.up.b")).unwrap()),
        )
        .unwrap();
        let diff = f_i[level - 1].sub(&f_r[level - 1]).unwrap();
        h = conv(net, &format!("{p}.fuse"), &concat_channels(&diff, &up).unwrap()).relu();
        let mut j = 1;
        while net.has_param(&format!("{p}.c{j}.w")) {
            h = conv(net, &format!("{p}.c{j}"), &h).relu();
            j += 1;
        }
    }
    conv(net, "dec.out", &h).sigmoid()
}
