use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstda::adaptation::{adapt_loop, AdaptMode, RunLogRow};
use sstda::autodiff::Checkpoint;
use sstda::evaluation::{
    boxplot_stats, run_u_sweep, summarize_sweep, sweep_boxplots, write_csv, SweepData, SweepRun,
};
use sstda::par::Exec;
use sstda::pipeline::{
    gradcheck_suite, load_examples, simulate_split, RunConfig, Split, SyntheticStream,
};
use sstda::tracker::{evaluate_set, pretrain, Example, ExampleStream, FixedStream, SstModel};

#[derive(Parser)]
#[command(
    name = "sstda",
    version,
    about = "Domain-adaptive sound source tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset splits to WAV, annotation and metadata files.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Clips per split, overriding the configured sizes.
        #[arg(long)]
        count: Option<usize>,
        /// Only this split (source_train, source_val, target_train, target_val, target_test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Train the tracker on source-domain clips.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt a pretrained tracker to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<AdaptMode>,
        #[arg(long)]
        u: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding a manifest; defaults to the configured target test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adapt once per (mode, u, seed) and collect test metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference verification of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg)
}

fn checkpoint_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let Some(p) = flag.clone().or_else(|| cfg.checkpoint.clone()) else {
        bail!("no checkpoint given (use --checkpoint or set `checkpoint` in the config)");
    };
    if !p.is_file() {
        bail!("checkpoint {} does not exist", p.display());
    }
    Ok(p)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<SstModel> {
    let ckpt = Checkpoint::load(path)?;
    Ok(SstModel::from_checkpoint(&ckpt, Some(&cfg.crnn()?))?)
}

/// Loads its clips on first use, so modes that never ask for them never read them.
struct LazySplit<'a> {
    cfg: &'a RunConfig,
    split: Split,
    clips: Option<Vec<Arc<Example>>>,
}

impl ExampleStream for LazySplit<'_> {
    fn epoch(&mut self, _epoch: usize) -> sstda::Result<Vec<Arc<Example>>> {
        if self.clips.is_none() {
            log::info!("loading {}", self.split.name());
            self.clips = Some(self.cfg.examples(self.split, Exec::default())?);
        }
        Ok(self.clips.clone().unwrap_or_default())
    }
}

fn simulate(common: &Common, count: Option<usize>, split: Option<String>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = count {
        let s = &mut cfg.splits;
        (
            s.source_train,
            s.source_val,
            s.target_train,
            s.target_val,
            s.target_test,
        ) = (n, n, n, n, n);
    }
    let splits = match split {
        Some(name) => vec![name.parse::<Split>()?],
        None => Split::ALL.to_vec(),
    };
    for s in splits {
        let records = simulate_split(&cfg, s, &cfg.out_dir, Exec::default())?;
        println!(
            "{}: {} clips in {}",
            s.name(),
            records.len(),
            cfg.out_dir.join(s.name()).display()
        );
    }
    Ok(())
}

fn csv_appender(path: &Path) -> Result<csv::Writer<fs::File>> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file))
}

fn run_pretrain(common: &Common, resume: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let crnn = cfg.crnn()?;
    let model = match &resume {
        Some(p) => load_model(&cfg, p)?,
        None => SstModel::new(&crnn, cfg.seed, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let exec = Exec::default();
    let val = cfg.examples(Split::SourceVal, exec)?;
    let mut stream: Box<dyn ExampleStream> = if cfg.train.fresh_clips && cfg.data_dir.is_none() {
        Box::new(SyntheticStream {
            cfg: cfg.source.clone(),
            clips_per_epoch: cfg.splits.source_train,
            stride: crnn.time_stride(),
            base_seed: cfg.seed,
            exec,
        })
    } else {
        Box::new(FixedStream(cfg.examples(Split::SourceTrain, exec)?))
    };
    let metrics = cfg.out_dir.join("pretrain_metrics.csv");
    if resume.is_none() && metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let mut writer = csv_appender(&metrics)?;
    let out = pretrain(
        model,
        None,
        stream.as_mut(),
        &val,
        &cfg.train_config(exec),
        &mut |r| {
            writer.serialize(r)?;
            writer.flush()?;
            Ok(())
        },
    )?;
    let best = cfg.out_dir.join("pretrained.ckpt");
    out.best.to_checkpoint("pretrain best")?.save(&best)?;
    out.last
        .to_checkpoint("pretrain last")?
        .save(&cfg.out_dir.join("last.ckpt"))?;
    println!(
        "best source val mae {:.2} deg; wrote {}",
        out.best_val_mae,
        best.display()
    );
    Ok(())
}

fn log_header(mode: AdaptMode) -> Vec<&'static str> {
    let mut cols = vec!["step", "epoch", "l_sst"];
    match mode {
        AdaptMode::So => {}
        AdaptMode::Da => cols.extend(["l_da", "lambda", "w_mean_raw", "w_min", "w_max"]),
        AdaptMode::Iwda => cols.extend(["l_da", "l_w", "lambda", "w_mean_raw", "w_min", "w_max"]),
    }
    cols.extend(["val_mae_deg", "val_acc_pct"]);
    cols
}

fn log_record(mode: AdaptMode, r: &RunLogRow) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rec = vec![r.step.to_string(), r.epoch.to_string(), r.l_sst.to_string()];
    if mode != AdaptMode::So {
        rec.push(opt(r.l_da));
        if mode == AdaptMode::Iwda {
            rec.push(opt(r.l_w));
        }
        rec.extend([
            r.lambda.to_string(),
            opt(r.w_mean_raw),
            opt(r.w_min),
            opt(r.w_max),
        ]);
    }
    rec.extend([opt(r.val_mae_deg), opt(r.val_acc_pct)]);
    rec
}

fn run_adapt(
    common: &Common,
    mode: Option<AdaptMode>,
    u: Option<f64>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let pretrained = load_model(&cfg, &checkpoint_path(&cfg, &checkpoint)?)?;
    let mode = mode.unwrap_or(cfg.adapt.mode);
    let ac = cfg.adapt_config(mode, u.unwrap_or(cfg.adapt.u), cfg.seed)?;
    let exec = Exec::default();
    let val = cfg.examples(Split::TargetVal, exec)?;
    let mut source = FixedStream(cfg.examples(Split::SourceTrain, exec)?);
    let mut target = LazySplit {
        cfg: &cfg,
        split: Split::TargetTrain,
        clips: None,
    };
    let log_path = cfg.out_dir.join(format!("adapt_{mode}_log.csv"));
    let mut log = csv::Writer::from_path(&log_path)?;
    log.write_record(log_header(mode))?;
    let out = adapt_loop(
        &pretrained,
        &mut source,
        &mut target,
        &val,
        &ac,
        &mut |r| {
            log.write_record(log_record(mode, r))?;
            Ok(())
        },
        &mut |_, _| {},
    )?;
    log.flush()?;
    let path = cfg.out_dir.join(format!("adapted_{mode}.ckpt"));
    out.best
        .to_checkpoint(&format!("adapt {mode} u={}", ac.u))?
        .save(&path)?;
    println!(
        "{mode}: best target val mae {:.2} deg at epoch {} of {}; wrote {}",
        out.best_val_mae,
        out.best_epoch,
        out.epochs_run,
        path.display()
    );
    Ok(())
}

fn run_evaluate(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let model = load_model(&cfg, &checkpoint_path(&cfg, &checkpoint)?)?;
    let stride = model.cfg.time_stride();
    let (names, clips): (Vec<String>, Vec<Arc<Example>>) = match data.or_else(|| {
        cfg.data_dir
            .as_ref()
            .map(|d| d.join(Split::TargetTest.name()))
    }) {
        Some(dir) => load_examples(&dir, stride)?
            .into_iter()
            .map(|(r, e)| (r.meta.name, e))
            .unzip(),
        None => {
            let clips = cfg.examples(Split::TargetTest, Exec::default())?;
            (
                (0..clips.len())
                    .map(|i| format!("target_test_{i:05}"))
                    .collect(),
                clips,
            )
        }
    };
    let eval = evaluate_set(&model, &clips, cfg.adapt.batch_size, Exec::default())?;
    #[derive(serde::Serialize)]
    struct Row<'a> {
        scene: &'a str,
        mae_deg: f64,
        acc_pct: f64,
    }
    let mut rows = Vec::new();
    for (name, m) in names.iter().zip(&eval.per_clip) {
        if let Some(m) = m {
            rows.push(Row {
                scene: name,
                mae_deg: m.mae_deg,
                acc_pct: m.acc_pct,
            });
        }
    }
    let per_clip: Vec<f64> = rows.iter().map(|r| r.mae_deg).collect();
    rows.push(Row {
        scene: "pooled",
        mae_deg: eval.pooled.mae_deg,
        acc_pct: eval.pooled.acc_pct,
    });
    write_csv(&cfg.out_dir.join("metrics.csv"), &rows)?;
    let stats = boxplot_stats(&per_clip)?;
    fs::write(
        cfg.out_dir.join("boxplot.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    println!(
        "mae {:.2} deg, acc {:.1}% over {} clips",
        eval.pooled.mae_deg,
        eval.pooled.acc_pct,
        per_clip.len()
    );
    Ok(())
}

fn run_sweep(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let pretrained = load_model(&cfg, &checkpoint_path(&cfg, &checkpoint)?)?;
    let exec = Exec::default();
    let [source, target, val, test] = [
        Split::SourceTrain,
        Split::TargetTrain,
        Split::TargetVal,
        Split::TargetTest,
    ]
    .map(|s| cfg.examples(s, exec));
    let (source, target, val, test) = (source?, target?, val?, test?);
    let data = SweepData {
        source: &source,
        target: &target,
        val: &val,
        test: &test,
        scene: Split::TargetTest.name(),
    };
    let base = cfg.adapt_config(cfg.adapt.mode, cfg.adapt.u, cfg.seed)?;
    let mut done: Vec<SweepRun> = Vec::new();
    let csv_path = cfg.out_dir.join("sweep.csv");
    let runs = run_u_sweep(
        &pretrained,
        &data,
        &base,
        &cfg.sweep,
        &mut |_, _, _| {},
        &mut |run| {
            done.push(run.clone());
            let rows: Vec<_> = done.iter().map(|r| r.row.clone()).collect();
            write_csv(&csv_path, &rows)
        },
    )?;
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    write_csv(&csv_path, &rows)?;
    let summary = summarize_sweep(&rows);
    write_csv(&cfg.out_dir.join("sweep_summary.csv"), &summary)?;
    fs::write(
        cfg.out_dir.join("sweep_boxplots.json"),
        serde_json::to_string_pretty(&sweep_boxplots(&runs)?)?,
    )?;
    for s in &summary {
        println!(
            "{} u={}: median mae {:.2} deg over {} seeds",
            s.mode, s.u, s.median_mae_deg, s.runs
        );
    }
    Ok(())
}

fn run_gradcheck(instances: usize, out: Option<PathBuf>) -> Result<bool> {
    let reports = gradcheck_suite(instances)?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{:<34} {:>3} instances  worst {:.2e}  tol {:.0e}  {}",
            r.name,
            r.instances,
            r.worst,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("gradcheck.csv"), &reports)?;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate {
            common,
            count,
            split,
        } => simulate(&common, count, split)?,
        Command::Pretrain { common, resume } => run_pretrain(&common, resume)?,
        Command::Adapt {
            common,
            mode,
            u,
            checkpoint,
        } => run_adapt(&common, mode, u, checkpoint)?,
        Command::Evaluate {
            common,
            checkpoint,
            data,
        } => run_evaluate(&common, checkpoint, data)?,
        Command::Sweep { common, checkpoint } => run_sweep(&common, checkpoint)?,
        Command::Gradcheck { instances, out } => return run_gradcheck(instances, out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
