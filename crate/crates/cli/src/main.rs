//! `depthadapt`: train, ablate, evaluate and report on two-stage depth-model
//! adaptation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use depthadapt::harness::{
    self, cmd_ablate, cmd_dump_depth, cmd_eval, cmd_info, cmd_report, cmd_train, export_dataset, DepthDataset,
    DiskDataset, Predictor, RunConfig, Stage, SyntheticDataset,
};
use depthadapt::metrics::{DepthMetrics, Scaling};
use depthadapt::registry::parse_subspaces;
use depthadapt::scenes::make_split;
use depthadapt::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "depthadapt", version, about)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated stage-1 subspaces: conv, mlp, attention.
    #[arg(long, global = true, value_name = "LIST")]
    subspaces: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training stage.
    Train {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to continue from; stage 2 requires a stage-1 checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Stage 1 over {mlp}, {mlp, conv} and {mlp, conv, attention}.
    Ablate,
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval {
        /// Checkpoint directory or manifest.
        #[arg(long, value_name = "PATH", conflicts_with = "identity")]
        resume: Option<PathBuf>,
        /// Use the ground truth as the prediction.
        #[arg(long)]
        identity: bool,
        #[command(flatten)]
        data: DataArgs,
        /// Multiply every prediction by this factor before scoring.
        #[arg(long, default_value_t = 1.0)]
        pred_scale: f64,
        #[arg(long, value_enum)]
        scaling: Option<ScalingArg>,
        /// Write per-frame metrics to this CSV file.
        #[arg(long, value_name = "PATH")]
        per_frame: Option<PathBuf>,
    },
    /// Relative change between a baseline and a candidate metric row.
    Report {
        /// Five comma-separated values (abs_rel,sq_rel,rmse,rmse_log,delta) or a metrics JSON file.
        baseline: String,
        candidate: String,
    },
    /// Write 16-bit PGM depth images for a dataset.
    DumpDepth {
        #[arg(long, value_name = "PATH", conflicts_with = "identity")]
        resume: Option<PathBuf>,
        #[arg(long)]
        identity: bool,
        #[command(flatten)]
        data: DataArgs,
        /// Also write ground truth and side-by-side images.
        #[arg(long)]
        with_gt: bool,
        /// Also export the frames as an on-disk dataset into this directory.
        #[arg(long, value_name = "DIR")]
        export_dataset: Option<PathBuf>,
    },
    /// Describe the configured model, subspaces and accounting.
    Info,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Synthetic split to use.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// On-disk dataset directory; replaces the synthetic split.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Use only the first N frames.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScalingArg {
    Median,
    None,
}

/// Exit status per error category; 2 is left to argument parsing.
fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 3,
        "io" => 4,
        "format" => 5,
        "schedule" => 6,
        "report" => 7,
        "evaluation" => 8,
        "domain" => 9,
        "dimension" => 10,
        "contract" => 11,
        "state" => 12,
        "rank" => 13,
        "classification" => 14,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(list) = &cli.subspaces {
        cfg.stage1.subspaces = parse_subspaces(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Limited<D> {
    inner: D,
    limit: usize,
}

impl<D: DepthDataset> DepthDataset for Limited<D> {
    fn len(&self) -> usize {
        self.inner.len().min(self.limit)
    }

    fn frame(&self, i: usize) -> Result<harness::Frame> {
        self.inner.frame(i)
    }
}

fn dataset(cfg: &RunConfig, args: &DataArgs) -> Result<Box<dyn DepthDataset>> {
    let limit = args.limit.unwrap_or(usize::MAX);
    if let Some(dir) = &args.dataset {
        return Ok(Box::new(Limited {
            inner: DiskDataset::open(dir)?,
            limit,
        }));
    }
    let split = make_split(cfg.split.train, cfg.split.val, cfg.split.test)?;
    let set = match args.split {
        SplitArg::Train => split.train,
        SplitArg::Val => split.val,
        SplitArg::Test => split.test,
    };
    Ok(Box::new(Limited {
        inner: SyntheticDataset {
            scene: cfg.scene.clone(),
            set,
        },
        limit,
    }))
}

fn predictor(resume: Option<&Path>, identity: bool) -> Result<Predictor> {
    match (resume, identity) {
        (_, true) => Ok(Predictor::Identity),
        (Some(p), false) => Predictor::load(p),
        (None, false) => Err(Error::Config("pass --resume CHECKPOINT or --identity".into())),
    }
}

fn metric_row(arg: &str) -> Result<DepthMetrics> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        // Accepts a bare metrics object or an eval result with an `aggregate` field.
        let obj = v.get("aggregate").cloned().unwrap_or(v);
        return serde_json::from_value(obj).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        });
    }
    harness::report::parse_metric_row(arg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("json serializes")
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { stage, resume } => {
            let stage = Stage::from_number(*stage)?;
            let out = cmd_train(&cfg, stage, resume.as_deref())?;
            emit(&format!("{}\n", pretty(&out.report)));
            eprintln!("wrote {}", out.out_dir.display());
        }
        Command::Ablate => {
            let table = cmd_ablate(&cfg)?;
            emit(&table.to_text());
            eprintln!("wrote {}", cfg.out_dir.join("ablation").display());
        }
        Command::Eval {
            resume,
            identity,
            data,
            pred_scale,
            scaling,
            per_frame,
        } => {
            if let Some(s) = scaling {
                cfg.eval.scaling = match s {
                    ScalingArg::Median => Scaling::Median,
                    ScalingArg::None => Scaling::None,
                };
            }
            let pred = predictor(resume.as_deref(), *identity)?;
            let ds = dataset(&cfg, data)?;
            let ev = cmd_eval(&pred, ds.as_ref(), &cfg.eval, *pred_scale, per_frame.as_deref())?;
            emit(&format!("{}\n", pretty(&ev.aggregate.rounded())));
        }
        Command::Report { baseline, candidate } => {
            let r = cmd_report(&metric_row(baseline)?, &metric_row(candidate)?)?;
            emit(&r.to_text());
            let path = cfg.out_dir.join("report.json");
            write_json(&path, &serde_json::to_value(&r).expect("json serializes"))?;
            eprintln!("wrote {}", path.display());
        }
        Command::DumpDepth {
            resume,
            identity,
            data,
            with_gt,
            export_dataset: export,
        } => {
            let pred = predictor(resume.as_deref(), *identity)?;
            let ds = dataset(&cfg, data)?;
            let dir = cfg.out_dir.join("depth");
            let range = (cfg.model.min_depth, cfg.model.max_depth);
            let files = cmd_dump_depth(&pred, ds.as_ref(), &dir, range, *with_gt)?;
            if let Some(e) = export {
                export_dataset(ds.as_ref(), e, 1000.0)?;
            }
            eprintln!("wrote {} images to {}", files.len(), dir.display());
        }
        Command::Info => {
            emit(&format!("{}\n", pretty(&cmd_info(&cfg)?)));
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
