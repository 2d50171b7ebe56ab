use std::fs;
use std::path::Path;
use std::process::Command;

use supernet_lab::arch_space::ArchSpec;
use supernet_lab::data::order_hash;
use supernet_lab::evaluator::{append_record, TrialRecord};
use supernet_lab::harness::*;
use supernet_lab::Error;

fn tiny_config(kind: ExperimentKind, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(kind, seeds);
    cfg.dataset.train_count = 192;
    cfg.dataset.val_count = 96;
    cfg.train.total_epochs = 2;
    cfg.train.schedule.warmup_epochs = 1;
    cfg.evaluation.ground_truth_archs = 4;
    cfg.evaluation.standalone_epochs = 1;
    cfg.evaluation.recalibration_steps = 2;
    cfg.evaluation.zen.repeats = 2;
    cfg
}

#[test]
fn synthetic_splits_have_requested_shape() {
    let spec = DatasetSpec::toy(0);
    let a = ingest_dataset(&spec).unwrap();
    assert_eq!((a.train.len(), a.val.len()), (2000, 400));
    assert_eq!((a.train.channels, a.train.height, a.train.width), (3, 8, 8));
    assert_eq!(a.train.num_classes, 10);
    let b = ingest_dataset(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        order_hash(&a.train.shuffled_batches(4, 0, 64)),
        order_hash(&b.train.shuffled_batches(4, 0, 64))
    );
    assert_ne!(
        order_hash(&a.train.shuffled_batches(4, 0, 64)),
        order_hash(&a.train.shuffled_batches(4, 1, 64))
    );
    let other = ingest_dataset(&DatasetSpec::toy(1)).unwrap();
    assert_ne!(a.train.images, other.train.images);
}

fn write_class_folders(root: &Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        let dir = root.join(format!("class{c}"));
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = image::RgbImage::from_fn(12, 12, |x, y| {
                image::Rgb([(x * 20) as u8, (y * 20) as u8, (c * 80 + i) as u8])
            });
            img.save(dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

#[test]
fn directory_source_loads_and_checks_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    write_class_folders(tmp.path(), 3, 4);
    let mut spec = DatasetSpec {
        source: DataSource::Directory {
            path: tmp.path().to_path_buf(),
        },
        num_classes: 3,
        resolution: (8, 8),
        channels: 3,
        train_count: 8,
        val_count: 4,
        seed: 0,
    };
    let splits = ingest_dataset(&spec).unwrap();
    assert_eq!((splits.train.len(), splits.val.len()), (8, 4));
    assert_eq!(splits.train.height, 8);

    spec.num_classes = 10;
    let err = ingest_dataset(&spec).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    spec.source = DataSource::Directory {
        path: tmp.path().join("missing"),
    };
    let err = ingest_dataset(&spec).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn config_files_reject_unknown_keys() {
    let cfg = ExperimentConfig::toy(ExperimentKind::SamplerSweep, vec![0, 1]);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    let typo = text.replace("total_epochs", "total_epoch");
    assert!(ExperimentConfig::from_toml(&typo).is_err());
    let no_seeds = text.replace("seeds = [0, 1]", "seeds = []");
    assert!(ExperimentConfig::from_toml(&no_seeds).is_err());
    for name in ["consistency", "sampler_sweep", "prior_sweep", "schedule_sweep", "activation_sweep"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}.toml"));
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

fn record(i: u64, flops: u64, acc: f64) -> TrialRecord {
    let arch = ArchSpec {
        depths: vec![1, 1],
        ratio_indices: vec![(i % 3) as usize, (i / 3 % 3) as usize],
    };
    let mut r = TrialRecord::new(&arch, flops, 2 * flops);
    r.zen_score = Some(flops as f64 * 0.5 + 1.0);
    r.standalone_accuracy = Some(acc);
    r.supernet_accuracy = Some(acc / 2.0);
    r
}

#[test]
fn plots_annotate_and_skip() {
    let tmp = tempfile::tempdir().unwrap();
    let recs: Vec<_> = (0..6).map(|i| record(i, 10 + i, 0.1 * i as f64)).collect();
    let summary = emit_plots(&recs, tmp.path()).unwrap();
    assert_eq!(summary.written.len(), 7);
    let svg = fs::read_to_string(tmp.path().join("flops_vs_zen_score.svg")).unwrap();
    assert!(svg.contains("Pearson 100.0"), "annotation missing");

    let two = tempfile::tempdir().unwrap();
    let summary = emit_plots(&recs[..2], two.path()).unwrap();
    assert!(summary.written.is_empty());
    assert_eq!(summary.skipped.len(), 7);
    assert!(two.path().join("skipped.txt").exists());
}

#[test]
fn rerun_reproduces_reports_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(ExperimentKind::Consistency, vec![3]);
    let ra = run_experiment(&cfg, a.path(), &mut |_| {}).unwrap();
    let rb = run_experiment(&cfg, b.path(), &mut |_| {}).unwrap();
    assert!(ra.manifest.all_ok());
    for file in [
        "manifest.json",
        "cells/base-seed3/report.json",
        "cells/base-seed3/summary.csv",
        "cells/base-seed3/train_log.jsonl",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(ra.cells, rb.cells);

    // the cached ground truth is reused, not rebuilt
    let gt = a.path().join("ground_truth/seed3/records.jsonl");
    let before = fs::read(&gt).unwrap();
    let rc = run_experiment(&cfg, a.path(), &mut |_| {}).unwrap();
    assert_eq!(fs::read(&gt).unwrap(), before);
    assert_eq!(rc.cells, ra.cells);

    let manifest: Manifest = serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_digest, cfg.digest());
    assert_eq!(manifest.config, cfg);
}

#[test]
fn failed_cell_is_recorded_and_run_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(ExperimentKind::SamplerSweep, vec![0]);
    cfg.sweep.values = vec!["uniform".into(), "sandwich".into()];
    cfg.train.m_pairs = 0;
    // a file where the first cell's directory should go
    fs::create_dir_all(tmp.path().join("cells")).unwrap();
    fs::write(tmp.path().join("cells/uniform-seed0"), "blocked").unwrap();
    let res = run_experiment(&cfg, tmp.path(), &mut |_| {}).unwrap();
    assert!(!res.manifest.all_ok());
    let cells = &res.manifest.cells;
    assert_eq!(cells.len(), 2);
    assert!(!cells[0].ok && cells[0].error.is_some());
    assert!(cells[1].ok);
    assert!(tmp.path().join("cells/sandwich-seed0/report.json").exists());
}

#[test]
fn cli_honours_output_root_and_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_supernet-lab");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(ExperimentKind::Consistency, vec![0]);
    cfg.output_dir = "runs/tiny".into();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["run-experiment", "--config"])
        .arg(&cfg_path)
        .env(OUTPUT_ROOT_ENV, tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = tmp.path().join("runs/tiny/cells/base-seed0/records.jsonl");
    assert!(records.exists());

    let out = Command::new(bin)
        .args(["eval-consistency", "--x", "flops", "--y", "standalone_acc", "--records"])
        .arg(&records)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("pearson"));

    let out = Command::new(bin)
        .args(["score-proxy", "--kind", "flops", "--seed", "0", "--arch", "d=1,1;r=2,2", "d=2,2;r=0,0,0,0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let plots = tmp.path().join("plots");
    let out = Command::new(bin)
        .args(["plot", "--records"])
        .arg(&records)
        .arg("--out")
        .arg(&plots)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(plots.join("flops_vs_params.svg").exists());

    let few = tmp.path().join("few.jsonl");
    append_record(&few, &record(0, 1, 0.5)).unwrap();
    let out = Command::new(bin)
        .args(["eval-consistency", "--x", "flops", "--y", "standalone_acc", "--records"])
        .arg(&few)
        .output()
        .unwrap();
    assert!(!out.status.success());

    // a blocked cell makes the run fail
    fs::remove_dir_all(tmp.path().join("runs/tiny/cells/base-seed0")).unwrap();
    fs::write(tmp.path().join("runs/tiny/cells/base-seed0"), "blocked").unwrap();
    let out = Command::new(bin)
        .args(["run-experiment", "--config"])
        .arg(&cfg_path)
        .env(OUTPUT_ROOT_ENV, tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
