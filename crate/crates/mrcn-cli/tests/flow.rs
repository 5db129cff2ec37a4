//! End-to-end exercise of every subcommand on a miniature scene set.

use std::fs;
use std::path::{Path, PathBuf};

use mrcn_cli::{
    cmd_evaluate, cmd_predict, cmd_synth, cmd_train, cmd_sweep, EvaluateArgs, PredictArgs,
    SweepArgs, SynthArgs, TrainArgs,
};

const CFG: &str = "\
[arch]
variant = fusenet_low
patch_m = 8
classes = 3
bottleneck_hw = 4

[train]
batch_size = 8
max_epochs = 2
train_patches = 24
val_patches = 12
seed = 9
threads = 1

[data]
pan_size = 64
sites = 9
label_fraction = 0.5
";

fn write_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, CFG).unwrap();
    path
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = tmp.path().join("data");

    cmd_synth(&SynthArgs { config: Some(cfg.clone()), out_dir: data.clone(), seed: None })
        .unwrap();
    for tile in ["tile0", "tile1", "tile2", "tile3", "tile4"] {
        for suffix in ["pan", "ms", "lbl"] {
            assert!(data.join(format!("{tile}_{suffix}.mras")).exists(), "{tile} {suffix}");
        }
    }
    let manifest = fs::read_to_string(data.join("manifest.cfg")).unwrap();
    assert_eq!(manifest.matches("scene = ").count(), 5);

    // same seed, same bytes
    let data2 = tmp.path().join("data2");
    cmd_synth(&SynthArgs { config: Some(cfg.clone()), out_dir: data2.clone(), seed: None })
        .unwrap();
    assert_eq!(
        fs::read(data.join("tile0_pan.mras")).unwrap(),
        fs::read(data2.join("tile0_pan.mras")).unwrap()
    );

    let out = tmp.path().join("run");
    cmd_train(&TrainArgs {
        config: Some(cfg.clone()),
        data: data.clone(),
        out: out.clone(),
        seed: None,
    })
    .unwrap();
    assert!(out.join("model.mckp").exists());
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,loss,train_oa,val_oa"));
    assert_eq!(history.lines().count(), 3, "header + 2 epochs");

    // the echoed effective config reproduces the run byte for byte
    let out2 = tmp.path().join("run_echo");
    cmd_train(&TrainArgs {
        config: Some(out.join("effective.cfg")),
        data: data.clone(),
        out: out2.clone(),
        seed: None,
    })
    .unwrap();
    assert_eq!(
        fs::read(out.join("model.mckp")).unwrap(),
        fs::read(out2.join("model.mckp")).unwrap(),
        "checkpoint differs when re-run from the effective config"
    );
    assert_eq!(
        fs::read_to_string(out.join("history.csv")).unwrap(),
        fs::read_to_string(out2.join("history.csv")).unwrap()
    );

    let scores = tmp.path().join("scores.mras");
    let labels = tmp.path().join("labels.mras");
    cmd_predict(&PredictArgs {
        checkpoint: out.join("model.mckp"),
        pan: data.join("tile3_pan.mras"),
        ms: data.join("tile3_ms.mras"),
        out_scores: Some(scores.clone()),
        out_labels: Some(labels.clone()),
        per_instance: false,
    })
    .unwrap();
    let label_raster = mrcn_core::raster::read_raster(&labels)
        .unwrap()
        .into_u8(&labels)
        .unwrap();
    let (c, h, w) = label_raster.shape();
    assert_eq!((c, h, w), (1, 64, 64), "labels cover the PAN grid");

    // rerun is bit-identical
    let labels2 = tmp.path().join("labels2.mras");
    cmd_predict(&PredictArgs {
        checkpoint: out.join("model.mckp"),
        pan: data.join("tile3_pan.mras"),
        ms: data.join("tile3_ms.mras"),
        out_scores: None,
        out_labels: Some(labels2.clone()),
        per_instance: false,
    })
    .unwrap();
    assert_eq!(fs::read(&labels).unwrap(), fs::read(&labels2).unwrap());

    // a map evaluated against itself is perfect
    let report = tmp.path().join("report.csv");
    cmd_evaluate(&EvaluateArgs {
        pred: labels.clone(),
        reference: labels.clone(),
        classes: 3,
        report: Some(report.clone()),
        aa_denominator: "prediction".into(),
    })
    .unwrap();
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.contains("oa=1"), "self-comparison is perfect: {csv}");

    // single-value sweep trains the identical model
    let sweep_out = tmp.path().join("sweep");
    cmd_sweep(&SweepArgs {
        config: Some(cfg.clone()),
        data: data.clone(),
        out: sweep_out.clone(),
        param: "bottleneck_hw".into(),
        values: "4".into(),
        seed: None,
    })
    .unwrap();
    assert_eq!(
        fs::read(out.join("model.mckp")).unwrap(),
        fs::read(sweep_out.join("bottleneck_hw_4/model.mckp")).unwrap(),
        "single-value sweep must equal a plain train run"
    );
}

#[test]
fn train_names_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = tmp.path().join("nothing_here");
    fs::create_dir_all(&data).unwrap();
    fs::write(
        data.join("manifest.cfg"),
        "[data]\nscene = ghost train\nscene = ghost2 validation\n",
    )
    .unwrap();
    let err = cmd_train(&TrainArgs {
        config: Some(cfg),
        data: data.clone(),
        out: tmp.path().join("out"),
        seed: None,
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("ghost"), "error should name the file: {msg}");
}

#[test]
fn per_instance_rejected_for_feedforward() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let data = tmp.path().join("data");
    cmd_synth(&SynthArgs { config: Some(cfg.clone()), out_dir: data.clone(), seed: Some(5) })
        .unwrap();
    let out = tmp.path().join("run");
    cmd_train(&TrainArgs { config: Some(cfg), data: data.clone(), out: out.clone(), seed: Some(5) })
        .unwrap();
    let err = cmd_predict(&PredictArgs {
        checkpoint: out.join("model.mckp"),
        pan: data.join("tile3_pan.mras"),
        ms: data.join("tile3_ms.mras"),
        out_scores: Some(tmp.path().join("s.mras")),
        out_labels: None,
        per_instance: true,
    })
    .unwrap_err();
    assert!(err.to_string().contains("per-instance"), "{err}");
}
