use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use gsnpose::autodiff::OpKind;
use gsnpose::checkpoint::Checkpoint;
use gsnpose::config::RunConfig;
use gsnpose::data::synth::sample_seed;
use gsnpose::data::{read_annotations, synth_generate, write_annotations, Dataset, ImageStorage, SynthConfig};
use gsnpose::eval::{
    discriminator_separation, evaluate_generator, evaluate_poses, oracle_poses, predict_heatmaps, EvalOptions,
};
use gsnpose::gradsuite::{run_suite, TOLERANCE};
use gsnpose::heatmap::{dump_heatmaps, DEFAULT_SIGMA};
use gsnpose::metrics::InvisiblePolicy;
use gsnpose::report::{render, summarize};
use gsnpose::skeleton::SkeletonGraph;
use gsnpose::train::{
    alpha_sweep, resume_run, sweep_csv, train_loop, RunDirHook, TrainLog, TrainState, LAST_CHECKPOINT,
};
use gsnpose::{Error, Result};

#[derive(Parser)]
#[command(name = "gsnpose", version, about = "Adversarial pose estimation on synthetic stick figures")]
struct Cli {
    /// Worker threads for evaluation; training is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and validation splits of synthetic data.
    Synth(SynthArgs),
    /// Train a generator (and discriminator) into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotation file.
    Eval(EvalArgs),
    /// Check every backward rule against central differences.
    Gradcheck(GradcheckArgs),
    /// Summarise a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives train.annot and val.annot.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Validation samples.
    #[arg(long, default_value_t = 200)]
    val_count: usize,
    /// Per-joint occlusion probability.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mpii16 or lsp14.
    #[arg(long, default_value = "mpii16")]
    skeleton: String,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// inline (pixels in the annotation file), files (PGM per sample) or none.
    #[arg(long, default_value = "inline")]
    images: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training annotation file.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation annotation file.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exact run directory instead of a generated name under --out.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue the run in this directory from its last checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_lr_scale: Option<f64>,
    /// Comma-separated 0-based epochs.
    #[arg(long)]
    lr_drop_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "max-epochs")]
    epochs: Option<usize>,
    #[arg(long)]
    g_steps_per_d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    ggnn_steps: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// shared or per-direction.
    #[arg(long)]
    tying: Option<String>,
    /// soft-argmax, strided or coordinates.
    #[arg(long)]
    d_encoder: Option<String>,
    /// norm or mse.
    #[arg(long)]
    heatmap_loss: Option<String>,
    #[arg(long)]
    val_threshold: Option<f64>,
    /// Disable the generator's lateral connections.
    #[arg(long)]
    no_cfn: bool,
    #[arg(long)]
    no_augment: bool,
    /// Train without building a discriminator (requires --alpha 0).
    #[arg(long)]
    no_discriminator: bool,
    /// Any option as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Train once per listed α and write sweep.csv instead of a single run.
    #[arg(long, value_name = "A,B,...")]
    alpha_sweep: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory; uses its last checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Annotation file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Average heatmaps of each image and its mirror.
    #[arg(long)]
    flip_test: bool,
    /// Add an occlusion subset; repeatable (default: 2 and 4).
    #[arg(long = "subset-min-invisible", value_name = "N")]
    subset_min_invisible: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    pck_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pckh_threshold: f64,
    /// Quarter-cell sub-pixel refinement when decoding.
    #[arg(long)]
    quarter_offset: bool,
    /// Score invisible joints on the full set too.
    #[arg(long)]
    include_invisible: bool,
    /// Score ground-truth heatmaps instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Also report discriminator scores on real and shuffled poses.
    #[arg(long)]
    separation: bool,
    /// Write heatmap images for the first N samples.
    #[arg(long, default_value_t = 0)]
    dump_heatmaps: usize,
    /// Output directory (default: the run directory or the current one).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stem of the output files.
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Print the items as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, cli.threads),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    if a.count == 0 || a.val_count == 0 {
        return Err(usage("--count and --val-count must be at least 1"));
    }
    let skeleton = SkeletonGraph::builtin(&a.skeleton)
        .ok_or_else(|| usage(format!("unknown skeleton {:?} (use mpii16 or lsp14)", a.skeleton)))?;
    create_dir(&a.out)?;
    for (split, count, stream) in [("train", a.count, 1), ("val", a.val_count, 2)] {
        let cfg = SynthConfig {
            seed: sample_seed(a.seed, stream),
            count,
            image_size: a.image_size,
            occlusion_rate: a.occlusion,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg, &skeleton)?;
        let storage = match a.images.as_str() {
            "inline" => ImageStorage::Inline,
            "none" => ImageStorage::None,
            "files" => ImageStorage::Files(PathBuf::from(format!("{split}_images"))),
            other => return Err(usage(format!("unknown image storage {other:?}"))),
        };
        let path = a.out.join(format!("{split}.annot"));
        write_annotations(&data, &path, &storage)?;
        let invisible: usize = data.samples.iter().map(|s| s.n_invisible()).sum();
        let at_least = |k: usize| data.samples.iter().filter(|s| s.n_invisible() >= k).count();
        println!(
            "{split}: {} samples, {} joints each, occluded joints {invisible} ({:.3}), samples with >=2 invisible: {}, >=4: {} -> {}",
            data.len(),
            skeleton.n_nodes(),
            data.occlusion_fraction(),
            at_least(2),
            at_least(4),
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn read_dataset(path: &Path, what: &str) -> Result<Dataset> {
    if !path.exists() {
        return Err(usage(format!("{what} file {} does not exist", path.display())));
    }
    read_annotations(path)
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.config {
        rc.apply_file(p)?;
    }
    let cwd = Path::new("");
    let mut set = |k: &str, v: String| rc.set(k, &v, cwd).map_err(|e| usage(format!("--{}: {e}", k.replace('_', "-"))));
    for (k, v) in [
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("d_lr_scale", a.d_lr_scale.map(|v| v.to_string())),
        ("lr_drop_epochs", a.lr_drop_epochs.clone()),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("max_epochs", a.epochs.map(|v| v.to_string())),
        ("g_steps_per_d", a.g_steps_per_d.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("sigma", a.sigma.map(|v| v.to_string())),
        ("ggnn_steps", a.ggnn_steps.map(|v| v.to_string())),
        ("hidden_dim", a.hidden_dim.map(|v| v.to_string())),
        ("tying", a.tying.clone()),
        ("d_encoder", a.d_encoder.clone()),
        ("heatmap_loss", a.heatmap_loss.clone()),
        ("val_threshold", a.val_threshold.map(|v| v.to_string())),
        ("cascade", a.no_cfn.then(|| "false".to_string())),
        ("augment", a.no_augment.then(|| "false".to_string())),
        ("use_discriminator", a.no_discriminator.then(|| "false".to_string())),
    ] {
        if let Some(v) = v {
            set(k, v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set(k.trim(), v.to_string())?;
    }
    if let Some(p) = &a.train {
        rc.train_data = Some(p.clone());
    }
    if let Some(p) = &a.val {
        rc.val_data = Some(p.clone());
    }
    if let Some(p) = &a.out {
        rc.out_dir = Some(p.clone());
    }
    rc.train.validate()?;
    Ok(rc)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let rc = run_config(&a)?;
    let train_path = rc
        .train_data
        .clone()
        .ok_or_else(|| usage("no training data: pass --train FILE or set `train` in the config file"))?;
    let train = read_dataset(&train_path, "training")?;
    let val = rc.val_data.as_deref().map(|p| read_dataset(p, "validation")).transpose()?;

    if let Some(list) = &a.alpha_sweep {
        let alphas = list
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad alpha {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let val = val.ok_or_else(|| usage("an alpha sweep needs --val"))?;
        let dir = run_dir(&a, &rc)?;
        let rows = alpha_sweep(&rc.train, &train, &val, &alphas)?;
        let csv = sweep_csv(&rows);
        write_text(&dir.join("sweep.csv"), &csv)?;
        print!("{csv}");
        return Ok(ExitCode::SUCCESS);
    }

    let (dir, mut state, mut log) = match &a.resume {
        Some(dir) => {
            let (mut state, log) = resume_run(dir, &train.skeleton)?;
            if let Some(e) = a.epochs {
                state.config.max_epochs = e;
            }
            if !a.quiet {
                eprintln!("resuming {} after epoch {}", dir.display(), state.epoch);
            }
            (dir.clone(), state, log)
        }
        None => {
            let dir = run_dir(&a, &rc)?;
            let mut saved = rc.clone();
            saved.train_data = Some(absolute(&train_path));
            saved.val_data = rc.val_data.as_deref().map(absolute);
            write_text(&dir.join("config.txt"), &saved.to_text())?;
            let state = TrainState::new(&rc.train, &train.skeleton, train.image_size)?;
            (dir, state, TrainLog::default())
        }
    };
    let mut hook = RunDirHook {
        dir: &dir,
        verbose: !a.quiet,
    };
    train_loop(&mut state, &train, val.as_ref(), &mut log, &mut hook)?;
    // Covers runs that were already complete on resume.
    log.write(&dir)?;
    let model = dir.join("model.ckpt");
    state.to_checkpoint().write(&model)?;
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn run_dir(a: &TrainArgs, rc: &RunConfig) -> Result<PathBuf> {
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let parent = rc.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
            parent.join(format!("run-{secs}-seed{}", rc.train.seed))
        }
    };
    create_dir(&dir)?;
    Ok(dir)
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<ExitCode> {
    let data = read_dataset(&a.data, "evaluation")?;
    let opts = EvalOptions {
        flip_test: a.flip_test,
        decode: gsnpose::heatmap::DecodeOptions {
            quarter_offset: a.quarter_offset,
        },
        pck_threshold: a.pck_threshold,
        pckh_threshold: a.pckh_threshold,
        subset_min_invisible: if a.subset_min_invisible.is_empty() {
            vec![2, 4]
        } else {
            a.subset_min_invisible.clone()
        },
        policy: if a.include_invisible {
            InvisiblePolicy::Include
        } else {
            InvisiblePolicy::Exclude
        },
        threads: threads.max(1),
        ..EvalOptions::default()
    };
    let ckpt_path = match (&a.checkpoint, &a.run) {
        (Some(_), Some(_)) => return Err(usage("give either --checkpoint or --run, not both")),
        (Some(p), None) => Some(p.clone()),
        (None, Some(r)) => Some(r.join(LAST_CHECKPOINT)),
        (None, None) => None,
    };
    let out_dir = a
        .out
        .clone()
        .or_else(|| a.run.clone())
        .unwrap_or_else(|| PathBuf::from("."));

    let mut separation = None;
    let report = if a.oracle {
        if a.flip_test {
            return Err(usage("--oracle scores ground truth; --flip-test does not apply"));
        }
        let preds = oracle_poses(&data, DEFAULT_SIGMA, opts.decode)?;
        evaluate_poses(&data, &preds, &opts)?
    } else {
        let path = ckpt_path.ok_or_else(|| usage("pass --checkpoint FILE, --run DIR or --oracle"))?;
        let c = Checkpoint::read(&path)?;
        let state = TrainState::from_checkpoint(&c, &data.skeleton)?;
        if state.image_size != data.image_size {
            return Err(usage(format!(
                "the checkpoint expects {}×{} images but the data has {}×{}",
                state.image_size, state.image_size, data.image_size, data.image_size
            )));
        }
        if a.separation {
            let d = state
                .discriminator
                .as_ref()
                .ok_or_else(|| usage("--separation: this checkpoint has no discriminator"))?;
            separation = Some(discriminator_separation(
                d,
                Some(&state.generator),
                &data,
                state.config.sigma,
                0,
            )?);
        }
        if a.dump_heatmaps > 0 {
            let subset = Dataset {
                skeleton: data.skeleton.clone(),
                image_size: data.image_size,
                stride: data.stride,
                samples: data.samples.iter().take(a.dump_heatmaps).cloned().collect(),
            };
            let hms = predict_heatmaps(&state.generator, &subset, a.flip_test, 8)?;
            for (s, h) in subset.samples.iter().zip(&hms) {
                let d = out_dir.join(format!("{}_heatmaps", a.name)).join(format!("sample_{:06}", s.id));
                dump_heatmaps(h, data.skeleton.names(), &d)?;
            }
        }
        evaluate_generator(&state.generator, &data, &opts)?
    };

    create_dir(&out_dir)?;
    let csv = report.csv(&data.skeleton);
    write_text(&out_dir.join(format!("{}.csv", a.name)), &csv)?;
    let json = serde_json::json!({
        "data": a.data.display().to_string(),
        "options": opts,
        "report": report,
        "separation": separation,
    });
    let text = serde_json::to_string_pretty(&json).map_err(|e| usage(e.to_string()))?;
    write_text(&out_dir.join(format!("{}.json", a.name)), &text)?;
    print!("{csv}");
    if let Some(s) = separation {
        println!(
            "discriminator: real {:.4}, shuffled {:.4}, generated {}, margin {:.4}",
            s.real,
            s.shuffled,
            s.generated.map_or("-".into(), |g| format!("{g:.4}")),
            s.margin()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let fault = a
        .inject_fault
        .as_deref()
        .map(|name| OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op {name:?}"))))
        .transpose()?;
    let items = run_suite(fault)?;
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed()).map(|i| i.name.as_str()).collect();
    if a.json {
        let text = serde_json::to_string_pretty(&items).map_err(|e| usage(e.to_string()))?;
        println!("{text}");
    } else {
        let width = items.iter().map(|i| i.name.len()).max().unwrap_or(0);
        for it in &items {
            println!(
                "{:<width$}  {:>10.3e}  {}",
                it.name,
                it.max_rel_error,
                if it.passed() { "pass" } else { "FAIL" }
            );
        }
        println!(
            "{} items, {} failed (tolerance {TOLERANCE:e})",
            items.len(),
            failed.len()
        );
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let log = TrainLog::read(&a.run)?;
    let summary = summarize(&log);
    let text = render(&a.run, &summary)?;
    write_text(&a.run.join("report.md"), &text)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| usage(e.to_string()))?;
    write_text(&a.run.join("summary.json"), &json)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
