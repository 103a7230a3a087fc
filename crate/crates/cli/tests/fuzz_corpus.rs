//! Replays the checked-in fuzz seeds, plus truncations and byte flips of
//! each, through the same entry points the fuzz targets call. This runs on
//! stable without libFuzzer.

use std::fs;
use std::path::PathBuf;

use ragnet::image::decode_pnm;
use ragnet::metrics::parse_report_csv;
use ragnet::synthesis::Manifest;
use ragnet::trainer::{Checkpoint, LogRow};
use ragnet::Tensor;
use ragnet_cli::config::RunConfig;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "no seeds for {target}");
    seeds
}

/// The seed itself, every prefix at a few cut points, and single-byte flips.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    let step = (seed.len() / 64).max(1);
    for cut in (0..seed.len()).step_by(step) {
        out.push(seed[..cut].to_vec());
    }
    for at in (0..seed.len()).step_by(step) {
        for mask in [0x01, 0x80, 0xff] {
            let mut v = seed.to_vec();
            v[at] ^= mask;
            out.push(v);
        }
    }
    out
}

fn replay(target: &str, f: impl Fn(&[u8])) {
    for (_, seed) in corpus(target) {
        for v in variants(&seed) {
            f(&v);
        }
    }
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn checkpoint_seeds() {
    let seeds = corpus("checkpoint_decode");
    let (_, small) = seeds.iter().find(|(n, _)| n == "small").unwrap();
    let ck = Checkpoint::decode(small).unwrap();
    assert_eq!(&ck.encode(), small);
    replay("checkpoint_decode", |b| {
        if let Ok(ck) = Checkpoint::decode(b) {
            Checkpoint::decode(&ck.encode()).unwrap();
        }
    });
}

#[test]
fn pnm_seeds() {
    replay("pnm_decode", |b| {
        if let Ok(img) = decode_pnm::<f32>(b) {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    });
}

#[test]
fn manifest_seeds() {
    replay("manifest_parse", |b| {
        if let Some(t) = text(b) {
            let _ = Manifest::parse(t);
        }
    });
}

#[test]
fn config_seeds() {
    replay("config_text", |b| {
        if let Some(Ok(cfg)) = text(b).map(RunConfig::parse) {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    });
}

#[test]
fn tensor_text_seeds() {
    replay("tensor_text", |b| {
        if let Some(t) = text(b) {
            let _ = Tensor::<f64>::from_text(t);
        }
    });
}

#[test]
fn report_seeds() {
    replay("report_csv", |b| {
        if let Some(t) = text(b) {
            let _ = parse_report_csv(t);
        }
    });
}

#[test]
fn train_log_seeds() {
    replay("train_log", |b| {
        for line in text(b).into_iter().flat_map(str::lines) {
            if let Ok(row) = LogRow::parse_csv(line) {
                assert_eq!(LogRow::parse_csv(&row.to_csv()).unwrap().iter, row.iter);
            }
        }
    });
}
