//! Command implementations behind the `mrcn` binary. Each command is a
//! plain function over parsed arguments so integration tests can drive
//! them in-process.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};

use mrcn_core::arch::{ArchSpec, Upsampler, Variant};
use mrcn_core::checkpoint::{load_checkpoint, save_checkpoint};
use mrcn_core::config::{
    effective_config_text, load_manifest, load_run_config, manifest_text, RunConfig,
};
use mrcn_core::data::{load_scene, save_scene, synth_scene_set, NormStats, Scene};
use mrcn_core::graph::ParamStore;
use mrcn_core::error::{Error, ErrorKind};
use mrcn_core::gradcheck::{net_check, run_op_suite, CheckOpts};
use mrcn_core::infer::{argmax_map, Predictor, DEFAULT_WINDOW};
use mrcn_core::metrics::{AaDenominator, ConfusionMatrix};
use mrcn_core::raster::{read_raster, write_raster, Raster};
use mrcn_core::tensor::Tensor;
use mrcn_core::train::{fit, EpochStats};
use mrcn_core::Result;

#[derive(Parser, Debug)]
#[command(
    name = "mrcn",
    version,
    about = "Multiresolution convolutional network trainer and classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic five-tile scene set with a manifest
    Synth(SynthArgs),
    /// Train a network and write checkpoint + history
    Train(TrainArgs),
    /// Classify a full scene with a trained checkpoint
    Predict(PredictArgs),
    /// Compare a predicted label raster against a reference
    Evaluate(EvaluateArgs),
    /// Finite-difference validation of all gradients
    Gradcheck(GradcheckArgs),
    /// Train once per hyperparameter value and report validation accuracy
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// run config (the [data] section drives generation)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// directory holding the scene files and manifest.cfg
    #[arg(long)]
    pub data: PathBuf,
    /// output directory for checkpoint, history, and effective config
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PAN raster (float32 MRAS, 1 channel)
    #[arg(long)]
    pub pan: PathBuf,
    /// MS raster (float32 MRAS, 4 channels, quarter scale)
    #[arg(long)]
    pub ms: PathBuf,
    #[arg(long)]
    pub out_scores: Option<PathBuf>,
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
    /// additionally write one score raster per unrolled instance
    #[arg(long)]
    pub per_instance: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// predicted label raster (uint8)
    #[arg(long)]
    pub pred: PathBuf,
    /// reference label raster (uint8, 255 = unlabeled)
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub classes: usize,
    /// write the CSV report here as well
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// denominator of the average-accuracy term: prediction (literal
    /// formula) or reference (recall-like)
    #[arg(long, default_value = "prediction")]
    pub aa_denominator: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// architecture variant for the miniature network check
    #[arg(long, default_value = "fusenet_skip")]
    pub arch: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// bottleneck_hw | extra_conv_layers | patch_size | upsampler | reuse_R
    #[arg(long)]
    pub param: String,
    /// comma-separated values; patch_size takes (pan,ms) pairs like
    /// "(32,8),(64,16)"
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Builds the global worker pool once per process. `MRCN_THREADS`
/// overrides the config value; 1 keeps runs bit-reproducible (kernel
/// results are thread-count independent by construction, so this mainly
/// bounds CPU use).
pub fn configure_threads(requested: usize) -> usize {
    static POOL: OnceLock<usize> = OnceLock::new();
    *POOL.get_or_init(|| {
        let n = std::env::var("MRCN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .unwrap_or(requested);
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    })
}

fn load_config_or_default(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_run_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut run = load_config_or_default(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    configure_threads(run.threads);
    ensure_dir(&args.out_dir)?;

    let scenes = synth_scene_set(&run.synth, run.train.seed)?;
    let mut listed = Vec::new();
    for scene in &scenes {
        save_scene(&args.out_dir, scene)?;
        let (h, w) = scene.pan_hw();
        println!(
            "{} ({}): {}x{} PAN, {} labeled pixels",
            scene.name,
            scene.role.as_str(),
            h,
            w,
            scene.labeled_count()
        );
        listed.push((scene.name.clone(), scene.role));
    }
    write_text(&args.out_dir.join("manifest.cfg"), &manifest_text(&listed))?;
    run.scenes = listed;
    write_text(&args.out_dir.join("effective.cfg"), &effective_config_text(&run))?;
    println!("wrote {} scenes to {}", scenes.len(), args.out_dir.display());
    Ok(())
}

fn load_scenes(run: &RunConfig, data_dir: &Path) -> Result<Vec<Scene>> {
    let listing = if run.scenes.is_empty() {
        load_manifest(data_dir.join("manifest.cfg"))?
    } else {
        run.scenes.clone()
    };
    listing
        .iter()
        .map(|(stem, role)| load_scene(data_dir, stem, *role))
        .collect()
}

fn print_epoch(stats: &EpochStats) {
    println!(
        "epoch {:3}  lr {:<8}  loss {:.4}  train_oa {:.4}  val_oa {:.4}",
        stats.epoch, stats.lr, stats.loss, stats.train_oa, stats.val_oa
    );
}

/// Shared by train and sweep: fit on the scene set, write the artifacts,
/// return the checkpoint's validation accuracy.
fn run_training(run: &RunConfig, data_dir: &Path, out_dir: &Path, quiet: bool) -> Result<f64> {
    ensure_dir(out_dir)?;
    let scenes = load_scenes(run, data_dir)?;
    let mut effective = run.clone();
    effective.scenes = scenes.iter().map(|s| (s.name.clone(), s.role)).collect();
    write_text(&out_dir.join("effective.cfg"), &effective_config_text(&effective))?;

    let result = fit(&run.arch, scenes, &run.train, |s| {
        if !quiet {
            print_epoch(s);
        }
    })?;

    save_checkpoint(
        out_dir.join("model.mckp"),
        &run.arch,
        &result.params,
        result.epoch,
        result.val_oa,
    )?;
    write_text(
        &out_dir.join("history.csv"),
        &mrcn_core::train::history_csv(&result.history),
    )?;
    if !quiet {
        println!(
            "checkpoint from epoch {} with validation OA {:.4} -> {}",
            result.epoch,
            result.val_oa,
            out_dir.join("model.mckp").display()
        );
    }
    Ok(result.val_oa as f64)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut run = load_config_or_default(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    configure_threads(run.threads);
    println!("architecture: {}", run.arch.canonical_string());
    run_training(&run, &args.data, &args.out, false)?;
    Ok(())
}

fn normalized_inputs(
    ck_params: &ParamStore<f32>,
    pan_path: &Path,
    ms_path: &Path,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut pan = read_raster(pan_path)?.into_f32(pan_path)?;
    let mut ms = read_raster(ms_path)?.into_f32(ms_path)?;
    if pan.dims().c != 1 || ms.dims().c != 4 {
        return Err(Error::Data(format!(
            "expected 1-band PAN and 4-band MS, got {} and {}",
            pan.dims(),
            ms.dims()
        )));
    }
    if ck_params.contains("norm.min") && ck_params.contains("norm.max") {
        let stats = NormStats::from_tensors(
            ck_params.value("norm.min")?,
            ck_params.value("norm.max")?,
        )?;
        stats.apply_tensors(&mut pan, &mut ms);
    }
    Ok((pan, ms))
}

fn instance_path(base: &Path, instance: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("mras");
    base.with_file_name(format!("{stem}_instance{instance}.{ext}"))
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    configure_threads(1);
    let ck = load_checkpoint(&args.checkpoint)?;
    let predictor = Predictor::from_checkpoint(&ck)?;
    if args.per_instance && predictor.spec().reuse_r == 0 {
        return Err(Error::InvalidConfig(
            "--per-instance needs a recurrent checkpoint".into(),
        ));
    }
    let (pan, ms) = normalized_inputs(&ck.params, &args.pan, &args.ms)?;
    let d = pan.dims();

    let instances = predictor.predict(&pan, &ms, DEFAULT_WINDOW, None)?;
    let last = instances.last().expect("at least one instance").clone();
    println!(
        "predicted {}x{} ({} classes, receptive radius {})",
        d.h,
        d.w,
        predictor.spec().classes,
        predictor.radius()
    );

    if let Some(path) = &args.out_scores {
        write_raster(path, &Raster::from_tensor(last.clone())?)?;
        println!("scores -> {}", path.display());
        if args.per_instance {
            for (i, scores) in instances.iter().enumerate() {
                let p = instance_path(path, i + 1);
                write_raster(&p, &Raster::from_tensor(scores.clone())?)?;
                println!("instance {} scores -> {}", i + 1, p.display());
            }
        }
    }
    if let Some(path) = &args.out_labels {
        write_raster(path, &Raster::U8(argmax_map(&last)))?;
        println!("labels -> {}", path.display());
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let denom = AaDenominator::parse(&args.aa_denominator)?;
    let pred = read_raster(&args.pred)?.into_u8(&args.pred)?;
    let reference = read_raster(&args.reference)?.into_u8(&args.reference)?;
    let mut cm = ConfusionMatrix::new(args.classes);
    cm.accumulate(&pred, &reference)?;
    let table = cm.report_table(denom)?;
    print!("{table}");
    if let Some(path) = &args.report {
        write_text(path, &cm.report_csv(denom)?)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    configure_threads(1);
    let opts = CheckOpts { tol: args.tolerance, ..CheckOpts::default() };

    let outcomes = run_op_suite(args.seed, opts)?;
    let mut worst: Option<&mrcn_core::gradcheck::CheckOutcome> = None;
    for o in &outcomes {
        println!(
            "PASS {:<28} worst_rel {:.3e} ({} compared, {} skipped)",
            o.name, o.worst_rel, o.compared, o.skipped
        );
        if worst.map_or(true, |w| o.worst_rel > w.worst_rel) {
            worst = Some(o);
        }
    }

    let spec = ArchSpec {
        variant: Variant::parse(&args.arch)?,
        patch_m: 4,
        classes: 3,
        bottleneck_hw: 4,
        extra_convs: 0,
        upsampler: Upsampler::Transposed,
        reuse_r: 0,
    };
    let net = net_check(&spec, opts, args.seed)?;
    net.ensure(opts.tol)?;
    println!(
        "PASS {:<28} worst_rel {:.3e} ({} compared, {} skipped)",
        net.name, net.worst_rel, net.compared, net.skipped
    );
    if worst.map_or(true, |w| net.worst_rel > w.worst_rel) {
        println!("worst case: {} at {}", net.name, net.worst_site);
    } else if let Some(w) = worst {
        println!("worst case: {} at {}", w.name, w.worst_site);
    }
    println!("all gradients within {:.1e}", opts.tol);
    Ok(())
}

/// One sweep setting: label for reports plus the config mutation.
fn apply_sweep_value(run: &mut RunConfig, param: &str, value: &str) -> Result<String> {
    let bad = |msg: String| Err(Error::InvalidConfig(msg));
    match param {
        "bottleneck_hw" => {
            let v: usize = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("bad bottleneck_hw value '{value}'")),
            };
            run.arch.bottleneck_hw = v;
            Ok(format!("bottleneck_hw={v}"))
        }
        "extra_conv_layers" => {
            let v: usize = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("bad extra_conv_layers value '{value}'")),
            };
            run.arch.extra_convs = v;
            Ok(format!("extra_conv_layers={v}"))
        }
        "patch_size" => {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return bad(format!(
                    "patch_size values are (pan,ms) pairs, got '{value}'"
                ));
            }
            let pan: usize = parts[0]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad PAN size '{}'", parts[0])))?;
            let m: usize = parts[1]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad MS size '{}'", parts[1])))?;
            if pan != 4 * m {
                return bad(format!("patch pair ({pan},{m}) must satisfy pan = 4*ms"));
            }
            run.arch.patch_m = m;
            Ok(format!("patch_size={pan},{m}"))
        }
        "upsampler" => {
            run.arch.upsampler = Upsampler::parse(value)?;
            Ok(format!("upsampler={value}"))
        }
        "reuse_R" => {
            let v: usize = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("bad reuse_R value '{value}'")),
            };
            run.arch.reuse_r = v;
            Ok(format!("reuse_R={v}"))
        }
        other => bad(format!(
            "unknown sweep parameter '{other}' (expected bottleneck_hw | extra_conv_layers | patch_size | upsampler | reuse_R)"
        )),
    }
}

/// Splits a sweep value list; parenthesised pairs stay together.
fn split_values(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in raw.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().to_string());
                }
                cur.clear();
                continue;
            }
            _ => {}
        }
        if ch != '(' && ch != ')' {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut base = load_config_or_default(&args.config)?;
    if let Some(seed) = args.seed {
        base.train.seed = seed;
    }
    configure_threads(base.threads);
    ensure_dir(&args.out)?;

    let values = split_values(&args.values);
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }

    let mut rows = Vec::new();
    for value in &values {
        let mut run = base.clone();
        let label = apply_sweep_value(&mut run, &args.param, value)?;
        let dir_name = label.replace('=', "_").replace(',', "x");
        let out_dir = args.out.join(&dir_name);
        println!("training {label}");
        let val_oa = run_training(&run, &args.data, &out_dir, true)?;
        println!("  validation OA {val_oa:.4}");
        rows.push((label, val_oa));
    }

    let best = rows
        .iter()
        .enumerate()
        .max_by(|(ai, a), (bi, b)| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                // first value wins ties
                .then(bi.cmp(ai))
        })
        .map(|(_, r)| r)
        .expect("nonempty");

    let mut csv = String::from("value,val_oa\n");
    for (label, oa) in &rows {
        csv.push_str(&format!("{label},{oa:.6}\n"));
        println!("{label}: val_oa {oa:.4}");
    }
    csv.push_str(&format!("best,{}\n", best.0));
    println!("best: {} (val_oa {:.4})", best.0, best.1);
    write_text(&args.out.join("sweep.csv"), &csv)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Process exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::GradCheck => 5,
        ErrorKind::Internal => 1,
    }
}
