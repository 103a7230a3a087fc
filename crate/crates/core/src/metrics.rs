//! Image-quality metrics and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::image::{crop, hstack, pad_reflect, write_pnm};
use crate::model::Generator;
use crate::synthesis::Sample;
use crate::tensor::{Scalar, Tensor};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let n = a.shape().numel().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log10(peak² / MSE)`; identical inputs give `+inf`.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Channel-mean grayscale planes, one per batch entry.
fn gray<S: Scalar>(x: &Tensor<S>) -> Vec<Vec<f64>> {
    let s = x.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            (0..plane)
                .map(|p| {
                    (0..s.c)
                        .map(|c| x.data()[(n * s.c + c) * plane + p].as_f64())
                        .sum::<f64>()
                        / s.c as f64
                })
                .collect()
        })
        .collect()
}

/// Single-scale SSIM on channel-mean grayscale with an 11×11 Gaussian
/// window (σ 1.5), peak 1, averaged over valid window positions and the
/// batch.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(shape_err!(
            "ssim: images of {}x{} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            s.h,
            s.w
        ));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (s.h - SSIM_WINDOW + 1, s.w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for (x, y) in gray(a).iter().zip(gray(b).iter()) {
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let w = g[u] * g[v];
                        let k = (i + u) * s.w + j + v;
                        mx += w * x[k];
                        my += w * y[k];
                        xx += w * x[k] * x[k];
                        yy += w * y[k] * y[k];
                        xy += w * x[k] * y[k];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (s.n * oh * ow) as f64)
}

/// Binary split of the image plane into weak (`weak[p]`) and strong
/// reflection pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub weak: Vec<bool>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Weak,
    Strong,
}

impl RegionMask {
    pub fn selects(&self, p: usize, side: Side) -> bool {
        self.weak[p] == (side == Side::Weak)
    }

    pub fn count(&self, side: Side) -> usize {
        (0..self.weak.len()).filter(|&p| self.selects(p, side)).count()
    }
}

/// Weak where the channel mean of the full-resolution difference mask
/// exceeds `tau`.
pub fn weak_strong_split<S: Scalar>(m_diff: &Tensor<S>, tau: f64) -> Result<RegionMask> {
    let s = m_diff.shape();
    if s.n != 1 {
        return Err(shape_err!("weak_strong_split: expected one image, got {s}"));
    }
    Ok(RegionMask {
        height: s.h,
        width: s.w,
        weak: gray(m_diff)[0].iter().map(|&v| v > tau).collect(),
        tau,
    })
}

/// Squared error summed over the selected pixels (all channels) and the
/// number of selected entries.
fn masked_sse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, mask: &RegionMask, side: Side) -> Result<(f64, usize)> {
    same_shape(a, b, "region_psnr")?;
    let s = a.shape();
    if s.n != 1 || s.h != mask.height || s.w != mask.width {
        return Err(shape_err!(
            "region_psnr: image {s} vs mask {}x{}",
            mask.height,
            mask.width
        ));
    }
    let plane = s.plane();
    let (mut sse, mut count) = (0.0, 0);
    for c in 0..s.c {
        for p in (0..plane).filter(|&p| mask.selects(p, side)) {
            sse += (a.data()[c * plane + p].as_f64() - b.data()[c * plane + p].as_f64()).powi(2);
            count += 1;
        }
    }
    Ok((sse, count))
}

/// Masked-MSE PSNR over one side of the split; `None` when that side is
/// empty.
pub fn region_mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, mask: &RegionMask, side: Side) -> Result<Option<f64>> {
    let (sse, count) = masked_sse(a, b, mask, side)?;
    Ok((count > 0).then(|| sse / count as f64))
}

pub fn region_psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, mask: &RegionMask, side: Side) -> Result<Option<f64>> {
    Ok(region_mse(a, b, mask, side)?.map(|m| psnr_from_mse(m, 1.0)))
}

/// PSNR of the reflection estimate against the residual `clamp01(I − T)`.
pub fn reflection_detection_psnr<S: Scalar>(r_hat: &Tensor<S>, observed: &Tensor<S>, t_gt: &Tensor<S>) -> Result<f64> {
    same_shape(observed, t_gt, "reflection_detection_psnr")?;
    let residual = observed.detach().sub(&t_gt.detach())?.clamp01();
    psnr(r_hat, &residual, 1.0)
}

/// Per-image outputs and scores.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_weak: Option<f64>,
    pub psnr_strong: Option<f64>,
    pub refl_det_psnr: Option<f64>,
    pub observed: Tensor<f32>,
    pub reflection: Option<Tensor<f32>>,
    pub transmission: Tensor<f32>,
    /// Level-1 masks, absent for mask-free variants.
    pub mask_diff: Option<Tensor<f32>>,
    pub mask_dec: Option<Tensor<f32>>,
}

/// Runs the generator on one sample (reflect-padded to a multiple of 16,
/// outputs cropped back) and scores it.
pub fn evaluate_sample(generator: &Generator<f32>, sample: &Sample, tau: f64) -> Result<ImageResult> {
    let (padded, h, w) = pad_reflect(&sample.observed, 16)?;
    let pred = generator.forward(&padded)?;
    let t_hat = crop(&pred.transmission, h, w)?;
    let r_hat = pred.reflection.as_ref().map(|r| crop(r, h, w)).transpose()?;
    let level1 = pred.masks.level(1);
    let mask_diff = level1.map(|m| crop(&m.diff, h, w)).transpose()?;
    let mask_dec = level1.map(|m| crop(&m.dec, h, w)).transpose()?;
    let t = &sample.transmission;
    let (psnr_weak, psnr_strong) = match &mask_diff {
        Some(m) => {
            let split = weak_strong_split(m, tau)?;
            (
                region_psnr(&t_hat, t, &split, Side::Weak)?,
                region_psnr(&t_hat, t, &split, Side::Strong)?,
            )
        }
        None => (None, None),
    };
    Ok(ImageResult {
        name: sample.name.clone(),
        psnr: psnr(&t_hat, t, 1.0)?,
        ssim: ssim(&t_hat, t)?,
        psnr_weak,
        psnr_strong,
        refl_det_psnr: r_hat
            .as_ref()
            .map(|r| reflection_detection_psnr(r, &sample.observed, t))
            .transpose()?,
        observed: sample.observed.clone(),
        reflection: r_hat.map(|r| r.detach()),
        transmission: t_hat.detach(),
        mask_diff: mask_diff.map(|m| m.detach()),
        mask_dec: mask_dec.map(|m| m.detach()),
    })
}

pub const REPORT_HEADER: &str = "image,psnr,ssim,psnr_weak,psnr_strong,refl_det_psnr";
pub const REPORT_FILE: &str = "metrics.csv";

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn parse_value(s: &str) -> Option<Option<f64>> {
    match s {
        "n/a" => Some(None),
        "inf" => Some(Some(f64::INFINITY)),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
    }
}

/// One parsed CSV row: the image name and its five metric columns.
pub type ReportRow = (String, [Option<f64>; 5]);

pub fn report_csv(results: &[ImageResult]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in results {
        let cols = [Some(r.psnr), Some(r.ssim), r.psnr_weak, r.psnr_strong, r.refl_det_psnr];
        let cols: Vec<String> = cols.into_iter().map(fmt_value).collect();
        let _ = writeln!(out, "{},{}", r.name, cols.join(","));
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(Error::format("report", 0, format!("expected header `{REPORT_HEADER}`"))),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 || f[0].is_empty() {
                return Err(Error::format("report line", i + 1, "expected 6 comma-separated fields"));
            }
            let mut vals = [None; 5];
            for (v, s) in vals.iter_mut().zip(&f[1..]) {
                *v = parse_value(s).ok_or_else(|| Error::format("report line", i + 1, format!("bad value `{s}`")))?;
            }
            Ok((f[0].to_string(), vals))
        })
        .collect()
}

/// Heatmap of a mask: channel mean by default, or all channels side by side.
pub fn mask_heatmap<S: Scalar>(mask: &Tensor<S>, per_channel: bool) -> Result<Tensor<S>> {
    if per_channel && mask.shape().c > 1 {
        let chans = (0..mask.shape().c)
            .map(|c| mask.detach().slice_channels(c, 1))
            .collect::<Result<Vec<_>>>()?;
        hstack(&chans.iter().collect::<Vec<_>>())
    } else {
        Ok(mask.detach().channel_mean())
    }
}

/// Writes the metrics CSV plus, per image, the two level-1 mask heatmaps
/// (`_mdiff.pgm`, `_mdec.pgm`) and an `I | R̂ | T̂` panel (`_panel.ppm`).
pub fn emit_report(results: &[ImageResult], out_dir: &Path, per_channel: bool) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join(REPORT_FILE);
    fs::write(&csv, report_csv(results)).map_err(|e| Error::io(&csv, e))?;
    for r in results {
        if let (Some(md), Some(me)) = (&r.mask_diff, &r.mask_dec) {
            write_pnm(
                &out_dir.join(format!("{}_mdiff.pgm", r.name)),
                &mask_heatmap(md, per_channel)?,
            )?;
            write_pnm(
                &out_dir.join(format!("{}_mdec.pgm", r.name)),
                &mask_heatmap(me, per_channel)?,
            )?;
        }
        let blank = Tensor::zeros(r.observed.shape());
        let refl = r.reflection.as_ref().unwrap_or(&blank);
        let panel = hstack(&[&r.observed, refl, &r.transmission])?;
        write_pnm(&out_dir.join(format!("{}_panel.ppm", r.name)), &panel)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full([1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.add_scalar(0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = Tensor::<f64>::full([1, 3, 12, 12], 0.3);
        let b = Tensor::<f64>::full([1, 3, 12, 12], 0.4);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * 0.3 * 0.4 + c1) / (0.09 + 0.16 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros([1, 1, 10, 12]), &Tensor::zeros([1, 1, 10, 12])).is_err());
    }

    #[test]
    fn split_thresholds() {
        let m = Tensor::<f64>::full([1, 4, 2, 2], 0.5);
        assert!(weak_strong_split(&m, 0.4).unwrap().weak.iter().all(|&w| w));
        let m = Tensor::<f64>::full([1, 4, 2, 2], 0.3);
        let split = weak_strong_split(&m, 0.4).unwrap();
        assert_eq!(split.count(Side::Weak), 0);
        let a = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert_eq!(region_psnr(&a, &a.add_scalar(0.1), &split, Side::Weak).unwrap(), None);
    }

    #[test]
    fn csv_round_trip() {
        let img = Tensor::<f32>::zeros([1, 3, 2, 2]);
        let r = ImageResult {
            name: "x".into(),
            psnr: 12.3456789,
            ssim: f64::INFINITY,
            psnr_weak: None,
            psnr_strong: Some(-1.5),
            refl_det_psnr: Some(0.0),
            observed: img.clone(),
            reflection: None,
            transmission: img,
            mask_diff: None,
            mask_dec: None,
        };
        let text = report_csv(&[r]);
        let rows = parse_report_csv(&text).unwrap();
        assert_eq!(rows[0].0, "x");
        assert_eq!(
            rows[0].1,
            [Some(12.345679), Some(f64::INFINITY), None, Some(-1.5), Some(0.0)]
        );
        assert_eq!(parse_report_csv(&format!("{REPORT_HEADER}\n")).unwrap().len(), 0);
        assert!(parse_report_csv("bad\n").is_err());
    }
}
