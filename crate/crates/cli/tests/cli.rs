//! End-to-end tests of the `pae` binary: exit codes, file shapes, and
//! byte-determinism of every artifact.

use pae_cli::checkpoint::{self, SavedModel};
use pae_cli::config::{
    CorruptionConfig, CorruptionKindConfig, DataSource, DatasetConfig, LsiSection, ModelConfig,
    ModelKind, RunConfig, TrainSection,
};
use pae_core::data::write_idx_images;
use pae_core::paired::{Block, PairedModel};
use pae_core::{RngState, Tensor};
use std::path::{Path, PathBuf};
use std::process::Command;

fn pae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pae"))
}

fn small_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "seed": 11,
  "dataset": {{
    "source": {{"procedural": {{"count": 48, "height": 8, "width": 8}}}},
    "val_count": 8,
    "corruption": {{"kind": "pixel-bernoulli", "p": 0.5}}
  }},
  "model": {{"kind": "mlp", "latent_x": 4, "latent_y": 4, "encoder_widths": [16]}},
  "train": {{"epochs": 2, "batch_size": 8, "lr": 0.001}},
  "out_dir": "{}"
}}"#,
        out_dir.display()
    )
}

fn identity_run_config(out_dir: &Path) -> RunConfig {
    RunConfig {
        seed: 1,
        dataset: DatasetConfig {
            source: DataSource::Procedural {
                count: 4,
                height: 3,
                width: 3,
            },
            val_count: 0,
            corruption: CorruptionConfig {
                kind: CorruptionKindConfig::PixelBernoulli { p: 0.0 },
                seed: None,
            },
            noise_db: None,
            emit_data: false,
        },
        model: ModelConfig {
            kind: ModelKind::Mlp,
            latent_x: 9,
            latent_y: 9,
            encoder_widths: vec![],
            identity_maps: true,
            sigma: 1.0,
            latent_map_hidden: None,
        },
        train: TrainSection::default(),
        lsi: LsiSection {
            steps: 60,
            lr: 1e-3,
            alpha: 1e9,
            warm_start: true,
        },
        out_dir: out_dir.display().to_string(),
    }
}

fn identity_paired(n: usize) -> PairedModel {
    PairedModel::new(
        Block::matrix(Tensor::identity(n), false),
        Block::matrix(Tensor::identity(n), false),
        Block::matrix(Tensor::identity(n), false),
        Block::matrix(Tensor::identity(n), false),
        Block::Identity { dim: n },
        Block::Identity { dim: n },
    )
    .unwrap()
}

/// Writes a 3x3 identity-model checkpoint plus a small IDX data file.
fn identity_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let ckpt = dir.join("identity.pae");
    let cfg = identity_run_config(dir);
    checkpoint::save(&ckpt, &SavedModel::Paired(identity_paired(9)), &cfg).unwrap();
    let mut rng = RngState::new(3);
    let mut data = Vec::new();
    for _ in 0..4 * 9 {
        data.push(rng.next_below(256) as f64 / 255.0);
    }
    let rows = Tensor::from_vec(&[4, 9], data).unwrap();
    let idx = dir.join("data.idx");
    std::fs::write(&idx, write_idx_images(3, 3, &rows)).unwrap();
    (ckpt, idx)
}

fn read_estimates(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn malformed_config_exits_2_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"seed\": \"not-a-number\"}").unwrap();
    let out = dir.path().join("out");
    let status = pae()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists(), "no files may be written on config errors");
}

#[test]
fn unknown_config_field_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut text = small_config(&out);
    text = text.replace("\"seed\": 11", "\"seed\": 11, \"tpyo\": 1");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, text).unwrap();
    let status = pae().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn zero_epoch_training_writes_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_text = small_config(&out).replace("\"epochs\": 2", "\"epochs\": 0");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, cfg_text).unwrap();
    let status = pae().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("checkpoint.pae").exists());
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,loss");
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, small_config(&out)).unwrap();
    let run = || {
        let status = pae().args(["train", "--config"]).arg(&cfg).status().unwrap();
        assert_eq!(status.code(), Some(0));
        (
            std::fs::read(out.join("checkpoint.pae")).unwrap(),
            std::fs::read(out.join("train_log.csv")).unwrap(),
        )
    };
    let (ck1, log1) = run();
    let (ck2, log2) = run();
    assert_eq!(ck1, ck2, "checkpoints must be byte-identical");
    assert_eq!(log1, log2, "training logs must be byte-identical");
}

#[test]
fn seed_override_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, small_config(&out)).unwrap();
    let run = |seed: &str| {
        let status = pae()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        std::fs::read(out.join("checkpoint.pae")).unwrap()
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn checkpoint_save_load_save_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = identity_fixture(dir.path());
    let bytes1 = std::fs::read(&ckpt).unwrap();
    let (model, cfg) = checkpoint::from_bytes(&bytes1).unwrap();
    let bytes2 = checkpoint::to_bytes(&model, &cfg);
    assert_eq!(bytes1, bytes2);
}

#[test]
fn invert_direct_on_identity_model_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = identity_fixture(dir.path());
    let out = dir.path().join("direct");
    let status = pae()
        .args(["invert", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .arg("--direct")
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let est = read_estimates(&out.join("estimates.csv"));
    let input = match pae_core::data::read_idx(&std::fs::read(&idx).unwrap()).unwrap() {
        pae_core::data::IdxData::Images(set) => set.flat_matrix(),
        _ => unreachable!(),
    };
    for (i, row) in est.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, input.at(i, j));
        }
    }
}

#[test]
fn invert_lsi_with_huge_alpha_matches_direct() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = identity_fixture(dir.path());
    let direct_out = dir.path().join("direct");
    let lsi_out = dir.path().join("lsi");
    for (flag, out) in [("--direct", &direct_out), ("--lsi", &lsi_out)] {
        let status = pae()
            .args(["invert", "--checkpoint"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&idx)
            .arg(flag)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let d = read_estimates(&direct_out.join("estimates.csv"));
    let l = read_estimates(&lsi_out.join("estimates.csv"));
    for (dr, lr) in d.iter().zip(&l) {
        let norm: f64 = dr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = dr
            .iter()
            .zip(lr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-3 * norm.max(1e-9), "diff {diff} vs norm {norm}");
    }
    assert!(lsi_out.join("misfit_trace.csv").exists());
}

#[test]
fn invert_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = identity_fixture(dir.path());
    let out = dir.path().join("out");
    let run = || {
        let status = pae()
            .args(["invert", "--checkpoint"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&idx)
            .arg("--lsi")
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        (
            std::fs::read(out.join("estimates.csv")).unwrap(),
            std::fs::read(out.join("misfit_trace.csv")).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn invert_dimension_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = identity_fixture(dir.path());
    // 2x2 images against the 3x3 model.
    let rows = Tensor::from_vec(&[2, 4], vec![0.0; 8]).unwrap();
    let idx = dir.path().join("wrong.idx");
    std::fs::write(&idx, write_idx_images(2, 2, &rows)).unwrap();
    let status = pae()
        .args(["invert", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .arg("--direct")
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn sample_on_non_variational_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = identity_fixture(dir.path());
    let status = pae()
        .args(["sample", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .args(["--count", "3", "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

fn latent_map_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = identity_run_config(dir);
    let mut rng = RngState::new(9);
    let map = pae_core::variational::VariationalLatentMap::mlp_default(9, 9, 8, 1.0, &mut rng)
        .unwrap();
    let ckpt = dir.join("latent-map.pae");
    checkpoint::save(
        &ckpt,
        &SavedModel::LatentMap {
            paired: identity_paired(9),
            map,
        },
        &cfg,
    )
    .unwrap();
    let mut data = Vec::new();
    for _ in 0..2 * 9 {
        data.push(rng.next_below(256) as f64 / 255.0);
    }
    let rows = Tensor::from_vec(&[2, 9], data).unwrap();
    let idx = dir.join("probe.idx");
    std::fs::write(&idx, write_idx_images(3, 3, &rows)).unwrap();
    (ckpt, idx)
}

#[test]
fn sample_writes_mean_and_std_with_enough_draws() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = latent_map_fixture(dir.path());
    let out = dir.path().join("out");
    let status = pae()
        .args(["sample", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .args(["--count", "5", "--seed", "4", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("samples.csv").exists());
    assert!(out.join("mean.csv").exists());
    let std_text = std::fs::read_to_string(out.join("std.csv")).unwrap();
    for line in std_text.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
}

#[test]
fn sample_with_one_draw_omits_std_file() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = latent_map_fixture(dir.path());
    let out = dir.path().join("out");
    let status = pae()
        .args(["sample", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .args(["--count", "1", "--seed", "4", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(!out.join("std.csv").exists());
}

#[test]
fn sample_fixed_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = latent_map_fixture(dir.path());
    let out = dir.path().join("out");
    let run = || {
        let status = pae()
            .args(["sample", "--checkpoint"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&idx)
            .args(["--count", "4", "--seed", "9", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        std::fs::read(out.join("samples.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn ood_needs_thirty_baseline_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = identity_fixture(dir.path());
    let status = pae()
        .args(["ood", "--checkpoint"])
        .arg(&ckpt)
        .arg("--baseline")
        .arg(&idx)
        .arg("--probe")
        .arg(&idx)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

fn linear_model_fixture(dir: &Path, n_imgs: usize) -> (PathBuf, PathBuf) {
    // A trained-ish random linear model exercises nonzero metrics.
    let mut rng = RngState::new(77);
    let g = pae_core::rng::gaussian_sample(&mut rng, &[9, 3], 0.0, 0.4).unwrap();
    let e = g.transpose();
    let model = PairedModel::new(
        Block::matrix(e.clone(), false),
        Block::matrix(g.clone(), false),
        Block::matrix(e, false),
        Block::matrix(g, false),
        Block::Identity { dim: 3 },
        Block::Identity { dim: 3 },
    )
    .unwrap();
    let ckpt = dir.join("linear.pae");
    checkpoint::save(&ckpt, &SavedModel::Paired(model), &identity_run_config(dir)).unwrap();
    let mut data = Vec::new();
    for _ in 0..n_imgs * 9 {
        data.push((1 + rng.next_below(255)) as f64 / 255.0);
    }
    let rows = Tensor::from_vec(&[n_imgs, 9], data).unwrap();
    let idx = dir.join("base.idx");
    std::fs::write(&idx, write_idx_images(3, 3, &rows)).unwrap();
    (ckpt, idx)
}

#[test]
fn ood_writes_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = linear_model_fixture(dir.path(), 40);
    let out = dir.path().join("out");
    let run = || {
        let status = pae()
            .args(["ood", "--checkpoint"])
            .arg(&ckpt)
            .arg("--baseline")
            .arg(&idx)
            .arg("--probe")
            .arg(&idx)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        (
            std::fs::read(out.join("percentiles.csv")).unwrap(),
            std::fs::read(out.join("hist_m1.csv")).unwrap(),
            std::fs::read(out.join("scatter.csv")).unwrap(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    // Probes drawn from the baseline itself flag rarely.
    let text = String::from_utf8(a.0).unwrap();
    let flags: usize = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert!(flags <= 2, "{flags} of 40 in-baseline probes flagged");
}

#[test]
fn export_latents_columns_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = linear_model_fixture(dir.path(), 5);
    let out = dir.path().join("out");
    let status = pae()
        .args(["export-latents", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("latents.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample,z1,z2,z3");
    assert_eq!(text.lines().count(), 6);

    // Zero-image file: header only.
    let empty = dir.path().join("empty.idx");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    bytes.extend_from_slice(&0u32.to_be_bytes());
    bytes.extend_from_slice(&3u32.to_be_bytes());
    bytes.extend_from_slice(&3u32.to_be_bytes());
    std::fs::write(&empty, bytes).unwrap();
    let out2 = dir.path().join("out2");
    let status = pae()
        .args(["export-latents", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&empty)
        .arg("--out")
        .arg(&out2)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(out2.join("latents.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn export_latents_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, idx) = linear_model_fixture(dir.path(), 5);
    let labels = dir.path().join("labels.idx");
    std::fs::write(&labels, pae_core::data::write_idx_labels(&[0, 1, 2, 3, 4])).unwrap();
    let out = dir.path().join("out");
    let status = pae()
        .args(["export-latents", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&idx)
        .arg("--labels")
        .arg(&labels)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("latents.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample,z1,z2,z3,label");
    assert!(text.lines().nth(2).unwrap().ends_with(",1"));
}
