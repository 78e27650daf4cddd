use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fian_core::config::{parse_pairs, ModelConfig, StrideRule};
use fian_core::harness::checkpoint::{load_checkpoint, save_checkpoint};
use fian_core::harness::data::{generate_dataset, read_annotations, read_dataset, read_split, write_dataset, Dataset, DatasetSpec};
use fian_core::harness::eval::{evaluate, metrics_from_export, read_predictions, write_predictions};
use fian_core::harness::gradcheck::gradcheck;
use fian_core::harness::sweep::{format_sweep, stride_sweep};
use fian_core::harness::train::train;
use fian_core::FianError;
use fian_numerics::Scalar;

/// Temporal grounding of natural language queries in untrimmed videos.
#[derive(Parser)]
#[command(name = "fian", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or an exported prediction file) on a split.
    Eval(EvalArgs),
    /// Finite-difference check of every operation and of the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset keys to override, as key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one model per stride rule and compare them.
    StrideSweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma separated, e.g. `frame,1/8,1/4,1/2`.
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<StrideRule>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Train in 64-bit floating point.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write predictions here; with no checkpoint, read and score them instead.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Frame grid for scoring an exported file without a checkpoint.
    #[arg(long)]
    n_v: Option<usize>,
    #[arg(long)]
    f64: bool,
}

/// Everything a training run reads from its configuration.
struct RunSetup {
    cfg: ModelConfig,
    data: Dataset,
    data_source: String,
    out: PathBuf,
}

fn split_kv(s: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = s.split_once('=').with_context(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn setup(run: &RunArgs) -> anyhow::Result<RunSetup> {
    let mut pairs = match &run.config {
        Some(path) => parse_pairs(&fs::read_to_string(path).map_err(|e| FianError::io(path, e))?)?,
        None => Vec::new(),
    };
    for o in &run.overrides {
        pairs.push(split_kv(o)?);
    }
    let mut model_pairs = Vec::new();
    let mut spec = DatasetSpec::default();
    let (mut data_dir, mut out) = (None, PathBuf::from("run"));
    for (k, v) in pairs {
        match k.as_str() {
            "data" => data_dir = Some(PathBuf::from(v)),
            "out" => out = PathBuf::from(v),
            _ => match k.strip_prefix("data.") {
                Some(key) => spec.set(key, &v)?,
                None => model_pairs.push((k, v)),
            },
        }
    }
    let cfg = ModelConfig::from_pairs(&model_pairs)?;
    let (data, data_source) = match data_dir {
        Some(dir) => (read_dataset(&dir)?, dir.display().to_string()),
        None => {
            spec.validate()?;
            (generate_dataset(&spec)?.data, format!("synthetic\n{}", spec.to_text()))
        }
    };
    if data.train.is_empty() {
        return Err(FianError::Input("training split is empty".into()).into());
    }
    Ok(RunSetup { cfg, data, data_source, out })
}

/// Append-only log that mirrors every line to stderr.
struct RunLog(fs::File);

impl RunLog {
    fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).map_err(|e| FianError::io(dir, e))?;
        let path = dir.join("run.log");
        Ok(Self(fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| FianError::io(&path, e))?))
    }

    fn line(&mut self, msg: &str) {
        eprintln!("{msg}");
        let _ = writeln!(self.0, "{msg}");
    }
}

fn header(log: &mut RunLog, s: &RunSetup, dtype: &str) {
    log.line(&format!("# data: {}", s.data_source.trim_end().replace('\n', "\n#   ")));
    log.line(&format!("# dtype: {dtype}"));
    log.line("# effective config");
    for l in s.cfg.to_text().lines() {
        log.line(&format!("#   {l}"));
    }
}

fn run_train<T: Scalar>(s: RunSetup, log: &mut RunLog) -> anyhow::Result<()> {
    let trained = train::<T>(&s.cfg, &s.data, &mut |m| log.line(m))?;
    let ckpt = s.out.join("checkpoint");
    save_checkpoint(&ckpt, &s.cfg, &trained.vocab, &trained.store)?;
    log.line(&format!("best epoch {}; checkpoint written to {}", trained.best_epoch, ckpt.display()));
    if !s.data.test.is_empty() {
        let e = evaluate(&trained.model, &trained.store, &trained.vocab, &s.data.test, &s.cfg.rank_n, &s.cfg.rank_m)?;
        write_predictions(&s.out.join("test_predictions.jsonl"), &e.records)?;
        log.line(&format!("test: {}", e.table));
    }
    Ok(())
}

fn run_eval<T: Scalar>(a: &EvalArgs, ckpt: &Path) -> anyhow::Result<()> {
    let loaded = load_checkpoint::<T>(ckpt)?;
    let samples = read_split(&a.data, &a.split)?;
    let e = evaluate(&loaded.model, &loaded.store, &loaded.vocab, &samples, &loaded.cfg.rank_n, &loaded.cfg.rank_m)?;
    if let Some(p) = &a.predictions {
        write_predictions(p, &e.records)?;
    }
    println!("{}", e.table);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let s = setup(&args.run)?;
            let mut log = RunLog::create(&s.out)?;
            let dtype = if args.f64 { "f64" } else { "f32" };
            header(&mut log, &s, dtype);
            if args.f64 {
                run_train::<f64>(s, &mut log)
            } else {
                run_train::<f32>(s, &mut log)
            }
        }
        Command::Eval(a) => match (&a.checkpoint, &a.predictions) {
            (Some(ckpt), _) if a.f64 => run_eval::<f64>(&a, ckpt),
            (Some(ckpt), _) => run_eval::<f32>(&a, ckpt),
            (None, Some(p)) => {
                let Some(n_v) = a.n_v else { bail!(FianError::Config("--n-v is required without --checkpoint".into())) };
                let cfg = ModelConfig::desk();
                let anns = read_annotations(&a.data.join(format!("{}.jsonl", a.split)))?;
                let table = metrics_from_export(&read_predictions(p)?, &anns, n_v, &cfg.rank_n, &cfg.rank_m)?;
                println!("{table}");
                Ok(())
            }
            (None, None) => bail!(FianError::Config("eval needs --checkpoint or --predictions".into())),
        },
        Command::Gradcheck { seed } => {
            let report = gradcheck(seed)?;
            print!("{report}");
            let failed: Vec<String> = report.failures().iter().map(|l| l.name.clone()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(FianError::GradientCheck(failed).into())
            }
        }
        Command::GenData { spec, out, overrides } => {
            let mut ds = match spec {
                Some(p) => DatasetSpec::from_text(&fs::read_to_string(&p).map_err(|e| FianError::io(&p, e))?)?,
                None => DatasetSpec::default(),
            };
            for o in &overrides {
                let (k, v) = split_kv(o)?;
                ds.set(&k, &v)?;
            }
            ds.validate()?;
            let syn = generate_dataset(&ds)?;
            write_dataset(&out, &syn.data, Some((&syn.spec, &syn.prototypes)))?;
            println!(
                "wrote {} train, {} val, {} test samples to {}",
                syn.data.train.len(),
                syn.data.val.len(),
                syn.data.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::StrideSweep { run, ratios } => {
            let s = setup(&run)?;
            let mut log = RunLog::create(&s.out)?;
            header(&mut log, &s, "f32");
            let rows = stride_sweep(&s.cfg, &s.data, &ratios, &mut |m| log.line(m))?;
            let table = format_sweep(&rows);
            log.line(&table);
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<FianError>().is_some_and(FianError::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
