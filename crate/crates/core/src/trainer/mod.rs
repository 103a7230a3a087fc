//! Two-phase training: the reflection network alone, then both generator
//! stages jointly with the full objective, alternating with discriminator
//! updates when the adversarial term is enabled.
//!
//! Every epoch ends with a checkpoint holding parameters, optimizer moments
//! and the schedule position. Shuffling is a pure function of the seed and
//! the epoch index, so resuming from any checkpoint replays the rest of an
//! uninterrupted run exactly.

mod adam;
mod checkpoint;
pub mod smoke;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use adam::{adam_update, AdamConfig, AdamState, Moments};
pub use checkpoint::{encoded_len, Checkpoint, NamedTensor, MAGIC, VERSION};

use crate::error::{shape_err, Error, Result};
use crate::losses::{
    adv_d_loss, adv_g_loss, exclusion_loss, mask_loss, perceptual_loss, rec_loss, reflection_perceptual_loss,
    reflection_rec_loss, total_loss, ExclusionScale, LossParts, LossWeights, MaskThresholds, Reduction,
};
use crate::model::{build_network, forward_gr, Generator, ModelConfig, Network, NetworkKind, RagVariant, Width};
use crate::seed;
use crate::synthesis::Sample;
use crate::tensor::{concat_batch, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iter,phase,rec,percep,excl,adv,mask,total";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub phase1_epochs: u32,
    pub phase2_epochs: u32,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            phase1_epochs: 2,
            phase2_epochs: 8,
            batch_size: 4,
        }
    }
}

impl Schedule {
    /// Epoch counts for a full-width run on real data.
    pub const FULL_SCALE: Schedule = Schedule {
        phase1_epochs: 50,
        phase2_epochs: 100,
        batch_size: 4,
    };

    pub fn total_epochs(&self) -> u32 {
        self.phase1_epochs + self.phase2_epochs
    }

    /// 1 or 2 for a zero-based epoch index.
    pub fn phase_of(&self, epoch: u32) -> u8 {
        if epoch < self.phase1_epochs {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub thresholds: MaskThresholds,
    pub rec_reduction: Reduction,
    pub mask_reduction: Reduction,
    pub exclusion_scale: ExclusionScale,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Stops gradients from the second stage reaching the reflection
    /// network during joint training.
    pub detach_reflection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            thresholds: MaskThresholds::default(),
            rec_reduction: Reduction::Sum,
            mask_reduction: Reduction::Mean,
            exclusion_scale: ExclusionScale::Adaptive,
            adam: AdamConfig::default(),
            schedule: Schedule::default(),
            detach_reflection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Width::new(self.model.width.num(), self.model.width.den())?;
        self.weights.validate()?;
        self.thresholds.validate()?;
        self.adam.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if let ExclusionScale::Fixed(v) = self.exclusion_scale {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!(
                    "fixed exclusion scale must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Settings that must agree between a checkpoint and the run resuming
    /// from it, as raw words.
    fn fingerprint(&self) -> Vec<u32> {
        let mut w = model_words(&self.model);
        let mut f64s = |v: f64| {
            let b = v.to_bits();
            w.push(b as u32);
            w.push((b >> 32) as u32);
        };
        let lw = &self.weights;
        for v in [lw.rec, lw.percep, lw.excl, lw.adv, lw.mask] {
            f64s(v);
        }
        let th = &self.thresholds;
        for v in [th.phi, th.xi, th.tau] {
            f64s(v);
        }
        let a = &self.adam;
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            f64s(v);
        }
        f64s(match self.exclusion_scale {
            ExclusionScale::Adaptive => -1.0,
            ExclusionScale::Fixed(v) => v,
        });
        let red = |r: Reduction| (r == Reduction::Mean) as u32;
        w.extend([
            red(self.rec_reduction),
            red(self.mask_reduction),
            self.schedule.phase1_epochs,
            self.schedule.phase2_epochs,
            self.schedule.batch_size as u32,
            self.detach_reflection as u32,
        ]);
        w
    }
}

fn model_words(m: &ModelConfig) -> Vec<u32> {
    vec![
        m.width.num(),
        m.width.den(),
        m.variant.code(),
        m.use_adversarial as u32,
        m.seed as u32,
        (m.seed >> 32) as u32,
    ]
}

fn model_from_words(w: &[u32]) -> Result<ModelConfig> {
    let bad = || Error::Invalid("checkpoint model description is malformed".into());
    if w.len() != 6 || w[3] > 1 {
        return Err(bad());
    }
    Ok(ModelConfig {
        width: Width::new(w[0], w[1])?,
        variant: RagVariant::from_code(w[2]).ok_or_else(bad)?,
        use_adversarial: w[3] == 1,
        seed: w[4] as u64 | (w[5] as u64) << 32,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub phase: u8,
    pub parts: LossParts<f64>,
    pub total: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let p = &self.parts;
        let adv = p.adv.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.phase, p.rec, p.percep, p.excl, adv, p.mask, self.total
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |msg: String| Error::format("train log", 0, msg);
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| bad(format!("field {} `{}` is not a number", i + 1, f[i])))
        };
        Ok(LogRow {
            iter: f[0].parse().map_err(|_| bad(format!("bad iteration `{}`", f[0])))?,
            phase: match f[1] {
                "1" => 1,
                "2" => 2,
                other => return Err(bad(format!("bad phase `{other}`"))),
            },
            parts: LossParts {
                rec: num(2)?,
                percep: num(3)?,
                excl: num(4)?,
                adv: if f[5] == "n/a" { None } else { Some(num(5)?) },
                mask: num(6)?,
            },
            total: num(7)?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(
            "train log",
            0,
            format!("{}: missing header `{LOG_HEADER}`", path.display()),
        ));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            LogRow::parse_csv(l).map_err(|e| match e {
                Error::Format { what, msg, .. } => Error::Format {
                    what,
                    offset: i + 2,
                    msg,
                },
                other => other,
            })
        })
        .collect()
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub discriminator: Option<Network<f32>>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed iterations.
    pub iter: u64,
}

fn push_network(ck: &mut Checkpoint, net: &Network<f32>) {
    for p in net.params() {
        let dims = p.tensor.shape().dims().map(|d| d as u32).to_vec();
        ck.push(NamedTensor::new(
            format!("{}/{}", net.kind(), p.name),
            dims,
            p.tensor.to_vec(),
        ));
    }
}

fn restore_network(ck: &Checkpoint, net: &mut Network<f32>) -> Result<()> {
    let names: Vec<(String, [usize; 4])> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().dims()))
        .collect();
    for (name, dims) in names {
        let key = format!("{}/{name}", net.kind());
        let t = ck.require(&key)?;
        if t.dims.iter().map(|&d| d as usize).ne(dims) {
            return Err(shape_err!(
                "checkpoint tensor `{key}` has dims {:?}, model expects {dims:?}",
                t.dims
            ));
        }
        net.set_param(&name, t.data.clone())?;
    }
    Ok(())
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, st: &AdamState<f32>) {
    ck.push(NamedTensor::from_words(
        format!("{prefix}.steps"),
        &[st.steps as u32, (st.steps >> 32) as u32],
    ));
    for (key, m) in &st.moments {
        let len = m.first.len() as u32;
        ck.push(NamedTensor::from_words(format!("{prefix}/{key}.t"), &[m.step]));
        ck.push(NamedTensor::new(
            format!("{prefix}/{key}.m"),
            vec![len],
            m.first.clone(),
        ));
        ck.push(NamedTensor::new(
            format!("{prefix}/{key}.v"),
            vec![len],
            m.second.clone(),
        ));
    }
}

fn restore_adam(ck: &Checkpoint, prefix: &str, st: &mut AdamState<f32>) -> Result<()> {
    let steps = ck.require(&format!("{prefix}.steps"))?.words();
    if steps.len() != 2 {
        return Err(Error::Invalid(format!("checkpoint `{prefix}.steps` is malformed")));
    }
    st.steps = steps[0] as u64 | (steps[1] as u64) << 32;
    st.moments.clear();
    let lead = format!("{prefix}/");
    for t in &ck.tensors {
        let Some(key) = t.name.strip_prefix(&lead).and_then(|k| k.strip_suffix(".t")) else {
            continue;
        };
        let step = t.words();
        let first = ck.require(&format!("{lead}{key}.m"))?.data.clone();
        let second = ck.require(&format!("{lead}{key}.v"))?.data.clone();
        if step.len() != 1 || first.len() != second.len() {
            return Err(Error::Invalid(format!("checkpoint moments for `{key}` are malformed")));
        }
        st.moments.insert(
            key.to_string(),
            Moments {
                step: step[0],
                first,
                second,
            },
        );
    }
    Ok(())
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            generator: Generator::build(&config.model)?,
            discriminator: if config.model.use_adversarial {
                Some(build_network(NetworkKind::Discriminator, &config.model)?)
            } else {
                None
            },
            adam_g: AdamState::new(config.adam),
            adam_d: AdamState::new(config.adam),
            epoch: 0,
            iter: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push(NamedTensor::from_words("meta.model", &model_words(&config.model)));
        ck.push(NamedTensor::from_words("meta.train", &config.fingerprint()));
        ck.push(NamedTensor::from_words(
            "meta.position",
            &[self.epoch, self.iter as u32, (self.iter >> 32) as u32],
        ));
        for net in self.generator.networks() {
            push_network(&mut ck, net);
        }
        if let Some(d) = &self.discriminator {
            push_network(&mut ck, d);
        }
        push_adam(&mut ck, "adam_g", &self.adam_g);
        push_adam(&mut ck, "adam_d", &self.adam_d);
        ck
    }

    /// Restores a run; the checkpoint must have been written under the same
    /// configuration.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        if ck.require("meta.train")?.words() != config.fingerprint() {
            let stored = model_from_words(&ck.require("meta.model")?.words())?;
            return Err(Error::Config(format!(
                "checkpoint was written with different training settings (its model: width {}, variant {}, seed {})",
                stored.width, stored.variant, stored.seed
            )));
        }
        let mut st = TrainState::new(config)?;
        if let Some(g_r) = &mut st.generator.g_r {
            restore_network(ck, g_r)?;
        }
        restore_network(ck, &mut st.generator.g_t)?;
        if let Some(d) = &mut st.discriminator {
            restore_network(ck, d)?;
        }
        restore_adam(ck, "adam_g", &mut st.adam_g)?;
        restore_adam(ck, "adam_d", &mut st.adam_d)?;
        let pos = ck.require("meta.position")?.words();
        if pos.len() != 3 {
            return Err(Error::Invalid("checkpoint `meta.position` is malformed".into()));
        }
        st.epoch = pos[0];
        st.iter = pos[1] as u64 | (pos[2] as u64) << 32;
        if st.epoch > config.schedule.total_epochs() {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {} but the schedule has {}",
                st.epoch,
                config.schedule.total_epochs()
            )));
        }
        Ok(st)
    }
}

/// The generator stored in a checkpoint, with the model settings it was
/// trained under.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, ModelConfig)> {
    let ck = Checkpoint::load(path)?;
    let model = model_from_words(&ck.require("meta.model")?.words())?;
    let mut generator = Generator::build(&model)?;
    if let Some(g_r) = &mut generator.g_r {
        restore_network(&ck, g_r)?;
    }
    restore_network(&ck, &mut generator.g_t)?;
    Ok((generator, model))
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("ckpt_e{epoch:04}.ragn")
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, seed::label("shuffle") ^ epoch as u64));
    order
}

struct Batch {
    observed: Tensor<f32>,
    transmission: Tensor<f32>,
    reflection: Tensor<f32>,
    has_reflection: Vec<bool>,
}

fn make_batch(samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    let pick =
        |f: fn(&Sample) -> &Tensor<f32>| concat_batch(&idx.iter().map(|&i| f(&samples[i]).clone()).collect::<Vec<_>>());
    Ok(Batch {
        observed: pick(|s| &s.observed)?,
        transmission: pick(|s| &s.transmission)?,
        reflection: pick(|s| &s.reflection)?,
        has_reflection: idx.iter().map(|&i| samples[i].has_reflection).collect(),
    })
}

/// Full objective of a generator pass. Without a reflection stage the
/// reflection-dependent terms vanish.
fn objective(
    config: &TrainConfig,
    generator: &Generator<f32>,
    disc: Option<&Network<f32>>,
    extractor: &Network<f32>,
    batch: &Batch,
    detach_reflection: bool,
) -> Result<(LossParts<Tensor<f32>>, Tensor<f32>)> {
    let pred = generator.forward(&batch.observed)?;
    let t_hat = &pred.transmission;
    let r_hat = pred.reflection.map(|r| if detach_reflection { r.detach() } else { r });
    let (t, r, has) = (&batch.transmission, &batch.reflection, &batch.has_reflection[..]);
    let pair = r_hat.as_ref().map(|rh| (rh, r));
    let excl = match &r_hat {
        Some(rh) => exclusion_loss(t_hat, rh, config.exclusion_scale)?,
        None => Tensor::scalar(0.0),
    };
    let parts = LossParts {
        rec: rec_loss(t_hat, t, pair, has, config.rec_reduction)?,
        percep: perceptual_loss(extractor, t_hat, t, pair, has)?,
        excl,
        adv: disc.map(|d| adv_g_loss(d, &batch.observed, t_hat)).transpose()?,
        mask: mask_loss(&pred.masks, r, has, &config.thresholds, config.mask_reduction)?,
    };
    Ok((parts, pred.transmission))
}

fn check_finite(v: f64, iter: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { iter: iter as usize })
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<LogRow>,
}

/// One optimization step. Phase 1 updates the reflection network from its
/// own terms but logs the full objective with the second stage held fixed,
/// so logged totals are comparable across phases.
fn train_step(
    config: &TrainConfig,
    st: &mut TrainState,
    extractor: &Network<f32>,
    batch: &Batch,
    phase: u8,
) -> Result<LogRow> {
    let iter = st.iter;
    let w = &config.weights;
    let frozen_d = st.discriminator.as_ref().map(Network::frozen);
    if phase == 1 {
        let fixed = Generator {
            g_r: st.generator.g_r.as_ref().map(Network::frozen),
            g_t: st.generator.g_t.frozen(),
        };
        let parts = objective(config, &fixed, frozen_d.as_ref(), extractor, batch, true)?
            .0
            .values();
        let total = parts.total(w);
        check_finite(total, iter)?;
        if let Some(g_r) = &mut st.generator.g_r {
            let r_hat = forward_gr(g_r, &batch.observed)?;
            let has = &batch.has_reflection;
            let loss = reflection_rec_loss(&r_hat, &batch.reflection, has, config.rec_reduction)?
                .scale(w.rec)
                .add(&reflection_perceptual_loss(extractor, &r_hat, &batch.reflection, has)?.scale(w.percep))?;
            check_finite(loss.item()? as f64, iter)?;
            loss.backward()?;
            st.adam_g.step(&mut [g_r])?;
        }
        return Ok(LogRow {
            iter,
            phase,
            parts,
            total,
        });
    }

    // The generator's adversarial term sees the discriminator as it was
    // before this step's update.
    let (parts, t_hat) = objective(
        config,
        &st.generator,
        frozen_d.as_ref(),
        extractor,
        batch,
        config.detach_reflection,
    )?;
    let total = total_loss(&parts, w)?;
    let total_value = total.item()? as f64;
    check_finite(total_value, iter)?;
    if let Some(d) = &mut st.discriminator {
        let d_loss = adv_d_loss(d, &batch.observed, &batch.transmission, &t_hat)?;
        check_finite(d_loss.item()? as f64, iter)?;
        d_loss.backward()?;
        st.adam_d.step(&mut [d])?;
    }
    total.backward()?;
    let Generator { g_r, g_t } = &mut st.generator;
    match g_r {
        Some(g_r) if !config.detach_reflection => st.adam_g.step(&mut [g_r, g_t])?,
        _ => st.adam_g.step(&mut [g_t])?,
    }
    Ok(LogRow {
        iter,
        phase,
        parts: parts.values(),
        total: total_value,
    })
}

/// Runs the schedule over `samples`, writing checkpoints and the log into
/// `out_dir`. With `resume`, continues from that checkpoint; the log is cut
/// back to the iterations the checkpoint covers.
pub fn train(config: &TrainConfig, samples: &[Sample], out_dir: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let shape = samples[0].observed.shape();
    if let Some(s) = samples.iter().find(|s| s.observed.shape() != shape) {
        return Err(shape_err!(
            "sample {} is {} but the first sample is {shape}",
            s.name,
            s.observed.shape()
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let mut st;
    let mut log;
    match resume {
        Some(path) => {
            st = TrainState::from_checkpoint(&Checkpoint::load(path)?, config)?;
            log = if st.iter > 0 { read_log(&log_path)? } else { Vec::new() };
            if (log.len() as u64) < st.iter {
                return Err(Error::Config(format!(
                    "{} has {} rows but the checkpoint is at iteration {}",
                    log_path.display(),
                    log.len(),
                    st.iter
                )));
            }
            log.truncate(st.iter as usize);
        }
        None => {
            st = TrainState::new(config)?;
            log = Vec::new();
            st.to_checkpoint(config).save(&out_dir.join(checkpoint_name(0)))?;
        }
    }
    let mut text = format!("{LOG_HEADER}\n");
    for row in &log {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let extractor = build_network::<f32>(NetworkKind::Perceptual, &config.model)?;
    let sched = config.schedule;
    while st.epoch < sched.total_epochs() {
        let phase = sched.phase_of(st.epoch);
        let order = epoch_order(config.model.seed, st.epoch, samples.len());
        for idx in order.chunks(sched.batch_size) {
            let batch = make_batch(samples, idx)?;
            let row = train_step(config, &mut st, &extractor, &batch, phase)?;
            writeln!(log_file, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            log.push(row);
            st.iter += 1;
        }
        st.epoch += 1;
        st.to_checkpoint(config)
            .save(&out_dir.join(checkpoint_name(st.epoch)))?;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainReport {
        final_checkpoint: out_dir.join(checkpoint_name(st.epoch)),
        log_path,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_row_round_trip() {
        let row = LogRow {
            iter: 3,
            phase: 2,
            parts: LossParts {
                rec: 0.1,
                percep: 1.0 / 3.0,
                excl: 0.0,
                adv: None,
                mask: 2.5e-9,
            },
            total: 0.4333,
        };
        assert_eq!(LogRow::parse_csv(&row.to_csv()).unwrap(), row);
        assert!(LogRow::parse_csv("1,3,0,0,0,0,0,0").is_err());
    }

    #[test]
    fn model_words_round_trip() {
        let m = ModelConfig {
            width: Width::new(3, 16).unwrap(),
            variant: RagVariant::NoDiff,
            use_adversarial: false,
            seed: 0x1234_5678_9abc_def0,
        };
        assert_eq!(model_from_words(&model_words(&m)).unwrap(), m);
    }

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(5, 0, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(5, 1, 20));
        assert_eq!(a, epoch_order(5, 0, 20));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                width: Width::new(1, 16).unwrap(),
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_batch() -> Batch {
        let params = crate::synthesis::SynthesisParams {
            patch_size: 16,
            ..Default::default()
        };
        let samples = smoke::synthetic_samples(&params, 1, 0..2).unwrap();
        make_batch(&samples, &[0, 1]).unwrap()
    }

    fn digest(net: &Network<f32>) -> Vec<u32> {
        net.params()
            .iter()
            .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn steps_leave_the_perceptual_extractor_untouched() {
        let config = tiny_config();
        let mut st = TrainState::new(&config).unwrap();
        let extractor = build_network::<f32>(NetworkKind::Perceptual, &config.model).unwrap();
        let before = digest(&extractor);
        let batch = tiny_batch();
        for phase in [1, 2] {
            train_step(&config, &mut st, &extractor, &batch, phase).unwrap();
            st.iter += 1;
        }
        assert_eq!(digest(&extractor), before);
        assert!(extractor.params().iter().all(|p| p.tensor.grad().is_none()));
    }

    #[test]
    fn discriminator_step_sends_nothing_to_the_generator() {
        let config = tiny_config();
        let st = TrainState::new(&config).unwrap();
        let batch = tiny_batch();
        let pred = st.generator.forward(&batch.observed).unwrap();
        let d = st.discriminator.as_ref().unwrap();
        adv_d_loss(d, &batch.observed, &batch.transmission, &pred.transmission)
            .unwrap()
            .backward()
            .unwrap();
        assert!(d.params().iter().all(|p| p.tensor.grad().is_some()));
        for net in st.generator.networks() {
            for p in net.params() {
                assert!(
                    p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)),
                    "{}",
                    p.name
                );
            }
        }
    }
}
