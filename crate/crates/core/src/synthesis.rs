//! Deterministic synthetic training triples: a transmission scene plus a
//! blurred, attenuated reflection scene, blended either linearly with
//! clipping or with an over-exposure model that breaks `I = T + R`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::image::{read_rgb, write_pnm};
use crate::seed;
use crate::tensor::Tensor;

/// Synthesized layers sit on this grid so that `T + R` and `(T + R) − R`
/// are exact in single precision.
const GRID: f64 = 65536.0;

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BlendMode {
    #[default]
    LinearClip,
    Overexpose,
}

impl BlendMode {
    pub fn name(self) -> &'static str {
        match self {
            BlendMode::LinearClip => "linear_clip",
            BlendMode::Overexpose => "overexpose",
        }
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_clip" => Ok(BlendMode::LinearClip),
            "overexpose" => Ok(BlendMode::Overexpose),
            _ => Err(Error::Invalid(format!(
                "unknown blend mode `{s}`; expected linear_clip or overexpose"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisParams {
    pub blur_sigma: (f64, f64),
    pub decay: (f64, f64),
    pub mode: BlendMode,
    pub patch_size: usize,
    /// Generation size as a multiple of `patch_size` before cropping.
    pub scale_range: (f64, f64),
    /// Over-exposure gain applied to `max(0, T + R − 1)`.
    pub boost: f64,
    /// Pixels whose `T + R` exceeds this in any channel saturate to white.
    pub saturation: f64,
    pub seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            blur_sigma: (2.0, 5.0),
            decay: (0.6, 1.0),
            mode: BlendMode::LinearClip,
            patch_size: 32,
            scale_range: (1.0, 2.0),
            boost: 0.5,
            saturation: 1.3,
            seed: 0,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Invalid(format!(
                    "{name} range [{lo}, {hi}] must satisfy lo <= hi"
                )));
            }
            Ok(())
        };
        range("blur_sigma", self.blur_sigma)?;
        range("decay", self.decay)?;
        range("scale", self.scale_range)?;
        if self.blur_sigma.0 <= 0.0 {
            return Err(Error::Invalid("blur_sigma must be positive".into()));
        }
        if self.decay.0 <= 0.0 || self.decay.1 > 1.0 {
            return Err(Error::Invalid("decay range must lie in (0, 1]".into()));
        }
        if self.scale_range.0 < 1.0 || self.scale_range.1 > 16.0 {
            return Err(Error::Invalid("scale range must lie in [1, 16]".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(16) {
            return Err(Error::Invalid(format!(
                "patch_size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        if !(self.boost >= 0.0 && self.boost.is_finite()) || !(self.saturation > 1.0 && self.saturation.is_finite()) {
            return Err(Error::Invalid("boost must be >= 0 and saturation > 1".into()));
        }
        Ok(())
    }
}

/// A square RGB image as channel planes, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.size + y) * self.size + x]
    }

    fn into_tensor(self) -> Tensor<f32> {
        let data = self.data.iter().map(|&v| v as f32).collect();
        Tensor::from_vec([1, 3, self.size, self.size], data).expect("canvas shape")
    }

    fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 || s.h != s.w {
            return Err(shape_err!("expected a square (1,3,H,H) image, got {s}"));
        }
        Ok(Canvas {
            size: s.h,
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    fn crop(&self, y0: usize, x0: usize, size: usize) -> Canvas {
        let mut out = Canvas::new(size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    *out.at(c, y, x) = self.data[(c * self.size + y0 + y) * self.size + x0 + x];
                }
            }
        }
        out
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Filled rectangle or ellipse, optionally striped; `(cy, cx, ry, rx)` in
/// unit coordinates.
struct Shape {
    ellipse: bool,
    center: (f64, f64),
    radius: (f64, f64),
    color: [f64; 3],
    stripes: Option<f64>,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, radius: (f64, f64), tone: (f64, f64)) -> Self {
        Shape {
            ellipse: rng.gen_bool(0.5),
            center: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
            radius: (rng.gen_range(radius.0..radius.1), rng.gen_range(radius.0..radius.1)),
            color: color(rng, tone.0, tone.1),
            stripes: rng.gen_bool(0.4).then(|| rng.gen_range(4.0..12.0)),
        }
    }

    /// Coverage in `[0,1]` with a one-pixel soft edge.
    fn coverage(&self, y: f64, x: f64, px: f64) -> f64 {
        let dy = (y - self.center.0) / self.radius.0;
        let dx = (x - self.center.1) / self.radius.1;
        let d = if self.ellipse {
            (dy * dy + dx * dx).sqrt()
        } else {
            dy.abs().max(dx.abs())
        };
        let edge = px / self.radius.0.min(self.radius.1);
        ((1.0 - d) / edge + 0.5).clamp(0.0, 1.0)
    }

    fn paint(&self, canvas: &mut Canvas) {
        let n = canvas.size;
        let px = 1.0 / n as f64;
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = ((y as f64 + 0.5) * px, (x as f64 + 0.5) * px);
                let a = self.coverage(fy, fx, px);
                if a == 0.0 {
                    continue;
                }
                let shade = match self.stripes {
                    Some(f) => 0.75 + 0.25 * (std::f64::consts::TAU * f * (fx + fy)).sin(),
                    None => 1.0,
                };
                for c in 0..3 {
                    let v = canvas.at(c, y, x);
                    *v = (1.0 - a) * *v + a * self.color[c] * shade;
                }
            }
        }
    }
}

fn transmission_scene(rng: &mut ChaCha8Rng, size: usize) -> Canvas {
    let mut cv = Canvas::new(size);
    let (c0, c1) = (color(rng, 0.05, 0.8), color(rng, 0.05, 0.8));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    // Low-frequency waves per channel: (fy, fx, phase, amplitude).
    let waves: Vec<[f64; 4]> = (0..3 * 3)
        .map(|_| {
            [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.1),
            ]
        })
        .collect();
    let px = 1.0 / size as f64;
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = ((y as f64 + 0.5) * px, (x as f64 + 0.5) * px);
                let t = ((fy - 0.5) * dy + (fx - 0.5) * dx + 0.5).clamp(0.0, 1.0);
                let mut v = c0[c] * (1.0 - t) + c1[c] * t;
                for w in &waves[3 * c..3 * c + 3] {
                    v += w[3] * (std::f64::consts::TAU * (w[0] * fy + w[1] * fx) + w[2]).sin();
                }
                *cv.at(c, y, x) = v;
            }
        }
    }
    for _ in 0..rng.gen_range(3..8) {
        Shape::random(rng, (0.05, 0.3), (0.0, 0.9)).paint(&mut cv);
    }
    cv.data.iter_mut().for_each(|v| *v = snap(v.clamp(0.0, 0.9)));
    cv
}

/// Bright objects on a black background, so the blurred reflection keeps
/// both heavy and empty regions.
fn reflection_scene(rng: &mut ChaCha8Rng, size: usize) -> Canvas {
    let mut cv = Canvas::new(size);
    for _ in 0..rng.gen_range(3..6) {
        Shape::random(rng, (0.1, 0.3), (0.5, 1.0)).paint(&mut cv);
    }
    cv.data.iter_mut().for_each(|v| *v = snap(v.clamp(0.0, 1.0)));
    cv
}

/// Two procedural images `(T, R_src)` of the given size.
pub fn generate_base_pair(seed: u64, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = seed::rng(seed, seed::label("base"));
    let t = transmission_scene(&mut rng, size);
    let r = reflection_scene(&mut rng, size);
    (t.into_tensor(), r.into_tensor())
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Normalized Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflect padding, per channel.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let s = img.shape();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for y in 0..s.h {
            for x in 0..s.w {
                tmp[base + y * s.w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[base + y * s.w + reflect(x as isize + j as isize - r, s.w)])
                    .sum();
            }
        }
        for y in 0..s.h {
            for x in 0..s.w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[base + reflect(y as isize + j as isize - r, s.h) * s.w + x])
                    .sum();
                out[base + y * s.w + x] = v as f32;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// `decay · blur(R_src, σ)` with `σ` and `decay` drawn from the configured
/// ranges.
pub fn synthesize_reflection(r_src: &Tensor<f32>, params: &SynthesisParams, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = seed::rng(seed, seed::label("reflection"));
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let sigma = draw(&mut rng, params.blur_sigma);
    let decay = draw(&mut rng, params.decay);
    let blurred = gaussian_blur(r_src, sigma)?;
    let data = blurred
        .data()
        .iter()
        .map(|&v| snap((decay * v as f64).clamp(0.0, 1.0)) as f32)
        .collect();
    Tensor::from_vec(r_src.shape(), data)
}

/// Observation from the two layers; the flag reports whether any pixel hit
/// the saturation rule.
pub fn blend(
    t: &Tensor<f32>,
    r: &Tensor<f32>,
    mode: BlendMode,
    boost: f64,
    saturation: f64,
) -> Result<(Tensor<f32>, bool)> {
    let s = t.shape();
    if s != r.shape() {
        return Err(shape_err!(
            "blend: transmission {s} and reflection {} differ",
            r.shape()
        ));
    }
    let in_range = |x: &Tensor<f32>| x.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_range(t) || !in_range(r) {
        return Err(Error::Invalid("blend: layer values must lie in [0, 1]".into()));
    }
    let sum: Vec<f32> = t.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
    let mut out: Vec<f32> = match mode {
        BlendMode::LinearClip => sum.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        BlendMode::Overexpose => sum
            .iter()
            .map(|&v| (v as f64 + boost * (v as f64 - 1.0).max(0.0)).clamp(0.0, 1.0) as f32)
            .collect(),
    };
    let mut saturated = false;
    if mode == BlendMode::Overexpose {
        let plane = s.plane();
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                if (0..s.c).any(|c| sum[base + c * plane + p] as f64 > saturation) {
                    saturated = true;
                    (0..s.c).for_each(|c| out[base + c * plane + p] = 1.0);
                }
            }
        }
    }
    Ok((Tensor::from_vec(s, out)?, saturated))
}

#[derive(Clone, Debug)]
pub struct ImageTriple {
    pub observed: Tensor<f32>,
    pub transmission: Tensor<f32>,
    pub reflection: Tensor<f32>,
    pub mode: BlendMode,
    pub saturated: bool,
    pub has_reflection: bool,
    pub seed: u64,
}

/// Where base scenes come from.
#[derive(Clone, Debug, Default)]
pub enum SceneSource {
    #[default]
    Procedural,
    /// Square-cropped images; pairs are drawn by seed.
    Images(Vec<Tensor<f32>>),
}

impl SceneSource {
    /// Loads every `.ppm`/`.pgm` in a directory in name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm" || x == "pgm"))
            .collect();
        paths.sort();
        if paths.len() < 2 {
            return Err(Error::Invalid(format!(
                "{}: need at least two .ppm/.pgm images",
                dir.display()
            )));
        }
        let images = paths.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
        Ok(SceneSource::Images(images))
    }
}

fn random_crop(img: &Canvas, size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let slack = img.size - size;
    let y0 = rng.gen_range(0..=slack);
    let x0 = rng.gen_range(0..=slack);
    img.crop(y0, x0, size)
}

fn square(t: &Tensor<f32>) -> Result<Canvas> {
    let s = t.shape();
    let side = s.h.min(s.w);
    let mut cv = Canvas::new(side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                *cv.at(c, y, x) = snap(t.at(0, c, y, x) as f64);
            }
        }
    }
    Ok(cv)
}

/// One complete triple for `seed`.
pub fn synthesize_triple(params: &SynthesisParams, source: &SceneSource, seed: u64) -> Result<ImageTriple> {
    params.validate()?;
    let patch = params.patch_size;
    let mut rng = seed::rng(seed, seed::label("crop"));
    let (t_full, r_full) = match source {
        SceneSource::Procedural => {
            let (lo, hi) = params.scale_range;
            let scale = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            let size = ((patch as f64 * scale).round() as usize).max(patch);
            let (t, r) = generate_base_pair(seed, size);
            (Canvas::from_tensor(&t)?, Canvas::from_tensor(&r)?)
        }
        SceneSource::Images(images) => {
            let i = rng.gen_range(0..images.len());
            let j = (i + rng.gen_range(1..images.len())) % images.len();
            let (t, r) = (square(&images[i])?, square(&images[j])?);
            if t.size < patch || r.size < patch {
                return Err(Error::Invalid(format!(
                    "source images must be at least {patch} pixels on each side"
                )));
            }
            (t, r)
        }
    };
    let t = random_crop(&t_full, patch, &mut rng).into_tensor();
    let r_src = random_crop(&r_full, patch, &mut rng).into_tensor();
    let r = synthesize_reflection(&r_src, params, seed)?;
    let (i, saturated) = blend(&t, &r, params.mode, params.boost, params.saturation)?;
    Ok(ImageTriple {
        observed: i,
        transmission: t,
        reflection: r,
        mode: params.mode,
        saturated,
        has_reflection: true,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub observed: String,
    pub transmission: String,
    pub reflection: String,
    pub mode: BlendMode,
    pub seed: u64,
    pub has_reflection: bool,
}

/// Tab-separated sample list: `index I T R mode seed has_reflection_gt`.
/// Blank lines and `#` comments are ignored when parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format("manifest line", lineno + 1, msg);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 tab-separated fields, found {}", f.len())));
            }
            for name in &f[1..4] {
                if name.is_empty() {
                    return Err(bad("empty file name".into()));
                }
            }
            let has_reflection = match f[6] {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(bad(format!("has_reflection_gt `{other}` is not true/false"))),
            };
            entries.push(ManifestEntry {
                index: f[0].parse().map_err(|_| bad(format!("bad index `{}`", f[0])))?,
                observed: f[1].to_string(),
                transmission: f[2].to_string(),
                reflection: f[3].to_string(),
                mode: f[4].parse().map_err(|e: Error| bad(e.to_string()))?,
                seed: f[5].parse().map_err(|_| bad(format!("bad seed `{}`", f[5])))?,
                has_reflection,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    e.index, e.observed, e.transmission, e.reflection, e.mode, e.seed, e.has_reflection
                )
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }
}

/// Writes `n` triples and the manifest into `out_dir` using up to `threads`
/// workers. Output bytes do not depend on the thread count.
pub fn make_dataset(
    n: usize,
    params: &SynthesisParams,
    source: &SceneSource,
    out_dir: &Path,
    threads: usize,
) -> Result<Manifest> {
    params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seeds: Vec<u64> = (0..n).map(|i| seed::derive(params.seed, i as u64)).collect();
    let work = |i: usize| -> Result<ManifestEntry> {
        let triple = synthesize_triple(params, source, seeds[i])?;
        let name = |tag: &str| format!("{i:05}_{tag}.ppm");
        write_pnm(&out_dir.join(name("I")), &triple.observed)?;
        write_pnm(&out_dir.join(name("T")), &triple.transmission)?;
        write_pnm(&out_dir.join(name("R")), &triple.reflection)?;
        Ok(ManifestEntry {
            index: i,
            observed: name("I"),
            transmission: name("T"),
            reflection: name("R"),
            mode: triple.mode,
            seed: triple.seed,
            has_reflection: triple.has_reflection,
        })
    };
    let entries = parallel_map(n, threads, work)?;
    let manifest = Manifest { entries };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Runs `f(0..n)` on up to `threads` scoped workers, returning results in
/// index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(threads)).enumerate() {
            let f = &f;
            let start = w * n.div_ceil(threads);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// A loaded training or evaluation sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub observed: Tensor<f32>,
    pub transmission: Tensor<f32>,
    pub reflection: Tensor<f32>,
    pub has_reflection: bool,
}

/// Loads every manifest entry; file names resolve against the manifest's
/// directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let observed = read_rgb(&dir.join(&e.observed))?;
        let transmission = read_rgb(&dir.join(&e.transmission))?;
        let reflection = read_rgb(&dir.join(&e.reflection))?;
        if observed.shape() != transmission.shape() || observed.shape() != reflection.shape() {
            return Err(shape_err!("sample {}: I, T and R sizes differ", e.index));
        }
        out.push(Sample {
            name: e.observed.trim_end_matches(".ppm").trim_end_matches("_I").to_string(),
            observed,
            transmission,
            reflection,
            has_reflection: e.has_reflection,
        });
    }
    Ok(out)
}
