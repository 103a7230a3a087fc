//! The `ragnet` command line: dataset synthesis, training, inference,
//! evaluation, gradient checking, mask inspection and parameter counts.
//!
//! Every configuration key is accepted by every subcommand as
//! `--key-name VALUE`; `--config FILE` loads `key = value` lines first and
//! flags override them.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use ragnet::image::{crop, pad_reflect, read_rgb, write_pnm};
use ragnet::metrics::{emit_report, evaluate_sample, mask_heatmap, ImageResult};
use ragnet::model::{build_network, count_params, Generator, NetworkKind, RagVariant};
use ragnet::synthesis::{load_dataset, make_dataset, parallel_map, SceneSource, MANIFEST_FILE};
use ragnet::trainer::{load_generator, train};
use ragnet::{selfcheck, Error, Result, Tensor};

use config::{RunConfig, KEYS};

pub const THREADS_ENV: &str = "RAGNET_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn with_keys(cmd: Command) -> Command {
    let defaults = RunConfig::default();
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("read `key = value` lines before applying flags"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        let default = defaults.get(key.name).unwrap_or_default();
        cmd.arg(
            Arg::new(key.name)
                .long(flag_name(key.name))
                .value_name("VALUE")
                .help_heading("Configuration keys")
                .help(format!("{} [key: {}] [default: {default}]", key.help, key.name)),
        )
    })
}

fn per_channel_arg() -> Arg {
    Arg::new("per-channel")
        .long("per-channel")
        .action(ArgAction::SetTrue)
        .help("render every mask channel side by side instead of the channel mean")
}

pub fn command() -> Command {
    Command::new("ragnet")
        .about("Two-stage reflection removal with reflection-aware guidance")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(
            Command::new("synth")
                .about("synthesize a dataset of (I, T, R) triples")
                .arg(path_arg("out", "output directory"))
                .arg(
                    Arg::new("n")
                        .long("n")
                        .value_name("COUNT")
                        .value_parser(value_parser!(usize))
                        .required(true)
                        .help("number of triples"),
                )
                .arg(
                    Arg::new("scenes")
                        .long("scenes")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("directory of PNM scene images; procedural scenes when absent"),
                ),
        ))
        .subcommand(with_keys(
            Command::new("train")
                .about("train the generator on a synthesized dataset")
                .arg(path_arg("data", "dataset manifest or the directory holding it"))
                .arg(path_arg("out", "output directory for checkpoints and the loss log"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("CHECKPOINT")
                        .value_parser(value_parser!(PathBuf))
                        .help("continue from a checkpoint written by an earlier run"),
                ),
        ))
        .subcommand(with_keys(
            Command::new("infer")
                .about("remove reflections from one image")
                .arg(path_arg("checkpoint", "trained checkpoint"))
                .arg(path_arg("input", "PPM or PGM image"))
                .arg(path_arg("out", "output directory")),
        ))
        .subcommand(with_keys(
            Command::new("eval")
                .about("score a checkpoint on a dataset")
                .arg(path_arg("checkpoint", "trained checkpoint"))
                .arg(path_arg("data", "dataset manifest or the directory holding it"))
                .arg(path_arg("out", "report directory"))
                .arg(per_channel_arg()),
        ))
        .subcommand(with_keys(
            Command::new("gradcheck").about("finite-difference check of every differentiable operation and loss"),
        ))
        .subcommand(with_keys(
            Command::new("inspect-mask")
                .about("write mask heatmaps for every decoder level")
                .arg(path_arg("checkpoint", "trained checkpoint"))
                .arg(path_arg("input", "PPM or PGM image"))
                .arg(path_arg("out", "output directory"))
                .arg(per_channel_arg()),
        ))
        .subcommand(with_keys(
            Command::new("params").about("print parameter counts per network"),
        ))
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match dispatch(name, sub) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV}: expected a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key.name) {
            cfg.set(key.name, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> &'a Path {
    m.get_one::<PathBuf>(id).expect("required by the parser")
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    match name {
        "synth" => synth(&cfg, m),
        "train" => train_cmd(&cfg, m),
        "infer" => infer(m),
        "eval" => eval(&cfg, m),
        "gradcheck" => gradcheck(&cfg),
        "inspect-mask" => inspect_mask(m),
        "params" => params(&cfg),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn synth(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let out = path(m, "out");
    let n = *m.get_one::<usize>("n").expect("required by the parser");
    let source = match m.get_one::<PathBuf>("scenes") {
        Some(dir) => SceneSource::from_dir(dir)?,
        None => SceneSource::Procedural,
    };
    make_dataset(n, &cfg.synthesis, &source, out, threads()?)?;
    println!("wrote {n} triples to {}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let out = path(m, "out");
    let samples = load_dataset(&manifest_path(path(m, "data")))?;
    create_dir(out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::Io {
        path: cfg_path.clone(),
        source: e,
    })?;
    let resume = m.get_one::<PathBuf>("resume").map(PathBuf::as_path);
    let report = train(&cfg.train, &samples, out, resume)?;
    if let Some(last) = report.log.last() {
        println!("iterations: {}  final total loss: {:.6}", last.iter + 1, last.total);
    }
    println!("checkpoint: {}", report.final_checkpoint.display());
    println!("loss log: {}", report.log_path.display());
    Ok(())
}

/// Reflection, transmission and the (difference, decoder) mask pair per level.
type Prediction = (Option<Tensor<f32>>, Tensor<f32>, Vec<(Tensor<f32>, Tensor<f32>)>);

/// Runs the generator on a reflect-padded copy and crops every output back.
fn predict(generator: &Generator<f32>, input: &Tensor<f32>) -> Result<Prediction> {
    let (padded, h, w) = pad_reflect(input, 16)?;
    let pred = generator.forward(&padded)?;
    let r_hat = pred.reflection.map(|r| crop(&r.detach(), h, w)).transpose()?;
    let t_hat = crop(&pred.transmission.detach(), h, w)?;
    let masks = pred
        .masks
        .levels()
        .iter()
        .map(|l| {
            let s = l.diff.shape();
            // Coarser levels cover the padded extent scaled down.
            let (lh, lw) = (h * s.h / padded.shape().h, w * s.w / padded.shape().w);
            Ok((
                crop(&l.diff.detach(), lh.max(1), lw.max(1))?,
                crop(&l.dec.detach(), lh.max(1), lw.max(1))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((r_hat, t_hat, masks))
}

fn infer(m: &ArgMatches) -> Result<()> {
    let (generator, model) = load_generator(path(m, "checkpoint"))?;
    let input_path = path(m, "input");
    let input = read_rgb::<f32>(input_path)?;
    let out = path(m, "out");
    create_dir(out)?;
    let name = stem(input_path);
    let (r_hat, t_hat, _) = predict(&generator, &input)?;
    let t_path = out.join(format!("{name}_T.ppm"));
    write_pnm(&t_path, &t_hat)?;
    println!("transmission: {}", t_path.display());
    match r_hat {
        Some(r_hat) => {
            let r_path = out.join(format!("{name}_R.ppm"));
            write_pnm(&r_path, &r_hat)?;
            let residual = input.sub(&r_hat)?.clamp01();
            let v_path = out.join(format!("{name}_I_minus_R.ppm"));
            write_pnm(&v_path, &residual)?;
            println!("reflection: {}", r_path.display());
            println!("I - R: {}", v_path.display());
        }
        None => println!("variant {} predicts no reflection layer", model.variant.name()),
    }
    Ok(())
}

fn eval(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (generator, _) = load_generator(path(m, "checkpoint"))?;
    let samples = load_dataset(&manifest_path(path(m, "data")))?;
    let tau = cfg.train.thresholds.tau;
    let results: Vec<ImageResult> = parallel_map(samples.len(), threads()?, |i| {
        evaluate_sample(&generator, &samples[i], tau)
    })?;
    let out = path(m, "out");
    emit_report(&results, out, m.get_flag("per-channel"))?;
    let n = results.len().max(1) as f64;
    let psnr = results.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ssim = results.iter().map(|r| r.ssim).sum::<f64>() / n;
    println!(
        "images: {}  mean PSNR: {psnr:.3} dB  mean SSIM: {ssim:.4}",
        results.len()
    );
    println!("report: {}", out.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let results = selfcheck::run_suite(cfg.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<32} max rel err {:.3e}  (tol {:.0e}, {} coords)  {verdict}",
            r.name, r.max_rel_error, r.tolerance, r.coords
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Invalid(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn inspect_mask(m: &ArgMatches) -> Result<()> {
    let (generator, model) = load_generator(path(m, "checkpoint"))?;
    if !model.variant.has_mask() {
        return Err(Error::Invalid(format!(
            "variant {} produces no masks",
            model.variant.name()
        )));
    }
    let input_path = path(m, "input");
    let input = read_rgb::<f32>(input_path)?;
    let out = path(m, "out");
    create_dir(out)?;
    let name = stem(input_path);
    let per_channel = m.get_flag("per-channel");
    let (_, _, levels) = predict(&generator, &input)?;
    for (i, (diff, dec)) in levels.iter().enumerate() {
        for (tag, mask) in [("mdiff", diff), ("mdec", dec)] {
            let p = out.join(format!("{name}_l{}_{tag}.pgm", i + 1));
            write_pnm(&p, &mask_heatmap(mask, per_channel)?)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn params(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model();
    let kinds: &[NetworkKind] = if model.variant == RagVariant::OneStage {
        &[NetworkKind::OneStage]
    } else {
        &[NetworkKind::GR, NetworkKind::GT]
    };
    let mut total = 0;
    for &kind in kinds {
        let n = count_params(&build_network::<f32>(kind, &model)?);
        total += n;
        println!("{:<14} {n:>12}", kind.name());
    }
    println!("{:<14} {total:>12}", "generator");
    let d = count_params(&build_network::<f32>(NetworkKind::Discriminator, &model)?);
    println!(
        "{:<14} {d:>12}  (not part of the generator)",
        NetworkKind::Discriminator.name()
    );
    Ok(())
}
