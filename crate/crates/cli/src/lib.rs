//! Command-line pipeline: `gen`, `pretrain`, `adapt`, `eval` and `sweep`,
//! each writing into its own output directory with the resolved config.

mod config;
mod viz;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use adadepth::evalkit::{evaluate_dataset, DatasetReport, MetricsReport};
use adadepth::scenegen::{build_dataset_with_labeled, DatasetManifest, ImageSource, SplitData};
use adadepth::tensor::Image;
use adadepth::trainkit::{
    adapt, adapt_semi, checkpoint, load_model, load_network, pretrain_source, save_network, sweep_sharing,
    AdaptOutcome,
};
use adadepth::{DepthMap, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{DatasetSizes, Paths, PretrainSection, RunConfig, SemiSection, SweepSection, VizSection, CONFIG_VERSION};
pub use viz::{colorize, export_viz, COLORMAP};

#[derive(Debug, Parser)]
#[command(name = "adadepth", version, about = "Adversarial domain adaptation of a monocular depth regressor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must not exist or be empty unless --force is given.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the paired-domain corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on the labeled source split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset root (default: paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adversarial adaptation of a pretrained network to the target images.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained network (default: paths.network).
        #[arg(long)]
        network: Option<PathBuf>,
        /// Continue with labeled target batches after the unsupervised phase.
        #[arg(long)]
        semi: bool,
        /// Labeled fraction of the target training split (implies --semi).
        #[arg(long)]
        labeled_frac: Option<f64>,
    },
    /// Metrics and depth visualizations on a labeled split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Network or adaptation checkpoint (default: paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "target_eval")]
        split: String,
    },
    /// Adaptation once per adapt_depth in sweep.depths, evaluated on target_eval.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Pretrain { common, .. }
            | Command::Adapt { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

/// Process exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Dataset { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

/// Parses `argv`, runs the subcommand and returns the exit code. Failures
/// print one line `adadepth: error[<class>]: <message>` to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("adadepth: error[usage]: {first}");
            return 2;
        }
    };
    init_logging(cli.command.common().verbose);
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("adadepth: error[{}]: {msg}", e.class());
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // Configured from flags only; the environment is not consulted.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(common.seed))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// `force` is set.
fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| io_err(out, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to replace it)",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(out.join("config.json"), cfg.to_json() + "\n").map_err(|e| io_err(&out.join("config.json"), e))
}

fn manifest(data: &Path, split: &str) -> Result<DatasetManifest> {
    DatasetManifest::load(data.join(split))
}

fn run(command: Command) -> Result<()> {
    let common = command.common();
    let mut cfg = load_config(common)?;
    if let Command::Adapt {
        labeled_frac: Some(f), ..
    } = &command
    {
        cfg.semi.labeled_frac = *f;
    }
    cfg.validate()?;
    let (out, force) = (common.out.clone(), common.force);
    match command {
        Command::Gen { .. } => run_gen(&cfg, &out, force),
        Command::Pretrain { data, .. } => run_pretrain(&cfg, &data.unwrap_or(cfg.paths.data.clone()), &out, force),
        Command::Adapt {
            data,
            network,
            semi,
            labeled_frac,
            ..
        } => run_adapt(
            &cfg,
            &data.unwrap_or(cfg.paths.data.clone()),
            &network.unwrap_or(cfg.paths.network.clone()),
            semi || labeled_frac.is_some(),
            &out,
            force,
        ),
        Command::Eval {
            data,
            checkpoint,
            split,
            ..
        } => run_eval(
            &cfg,
            &data.unwrap_or(cfg.paths.data.clone()),
            &checkpoint.unwrap_or(cfg.paths.checkpoint.clone()),
            &split,
            &out,
            force,
        ),
        Command::Sweep { data, network, .. } => run_sweep(
            &cfg,
            &data.unwrap_or(cfg.paths.data.clone()),
            &network.unwrap_or(cfg.paths.network.clone()),
            &out,
            force,
        ),
    }
}

fn run_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let d = &cfg.dataset;
    if d.n_train == 0 || d.n_eval == 0 {
        return Err(Error::Config("dataset.n_train and dataset.n_eval must be positive".into()));
    }
    prepare_out(out, force)?;
    let splits = build_dataset_with_labeled(d.n_train, d.n_eval, d.n_labeled, &cfg.scene, &cfg.shift, out)?;
    echo_config(out, cfg)?;
    println!(
        "wrote {} source, {} target, {} eval and {} labeled images to {}",
        splits.source_train.len(),
        splits.target_train.len(),
        splits.target_eval.len(),
        splits.target_labeled.as_ref().map_or(0, |m| m.len()),
        out.display()
    );
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    let source = SplitData::labeled(&manifest(data, "source_train")?)?;
    prepare_out(out, force)?;
    echo_config(out, cfg)?;
    let (net, report) = pretrain_source(&source, &cfg.pretrain_config())?;
    save_network(&net, &out.join("network"))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    match report.final_val_rel {
        Some(r) => println!("source validation rel {r:.4} after {} epochs", report.epochs.len()),
        None => println!("trained {} epochs (no validation split)", report.epochs.len()),
    }
    Ok(())
}

#[derive(Serialize)]
struct AdaptSummary<'a> {
    iterations: u64,
    semi: bool,
    labeled_images: usize,
    wall_clock_seconds: f64,
    warnings: Vec<&'a str>,
    ct_pretrain: Option<&'a adadepth::congruency::CtPretrainReport>,
    last: Option<&'a adadepth::trainkit::IterRecord>,
}

fn run_adapt(cfg: &RunConfig, data: &Path, network: &Path, semi: bool, out: &Path, force: bool) -> Result<()> {
    let net = load_network(network)?;
    cfg.adapt.validate(&net)?;
    let source = SplitData::labeled(&manifest(data, "source_train")?)?;
    let target = SplitData::images(&manifest(data, "target_train")?)?;
    let labeled = if semi {
        let n = (cfg.semi.labeled_frac * target.len() as f64).round() as usize;
        if n == 0 {
            return Err(Error::Config(format!(
                "labeled_frac {} of {} target images selects no labeled images",
                cfg.semi.labeled_frac,
                target.len()
            )));
        }
        let m = manifest(data, "target_labeled")?;
        if m.len() < n {
            return Err(Error::Dataset {
                path: data.join("target_labeled"),
                reason: format!("{n} labeled images requested, split holds {}", m.len()),
            });
        }
        Some(SplitData::labeled(&m)?.subset(&(0..n).collect::<Vec<_>>())?)
    } else {
        None
    };
    prepare_out(out, force)?;
    echo_config(out, cfg)?;
    let AdaptOutcome { bundle, log } = match &labeled {
        Some(l) => adapt_semi(&net, &source, &target, l, &cfg.adapt, &cfg.semi_config())?,
        None => adapt(&net, &source, &target, &cfg.adapt)?,
    };
    checkpoint(&bundle, &out.join("checkpoint"))?;
    log.write_ndjson(&out.join("train_log.ndjson"))?;
    write_json(
        &out.join("summary.json"),
        &AdaptSummary {
            iterations: bundle.iteration,
            semi,
            labeled_images: labeled.as_ref().map_or(0, |l| l.len()),
            wall_clock_seconds: log.wall_clock_seconds,
            warnings: log.warnings().filter_map(|r| r.warning.as_deref()).collect(),
            ct_pretrain: log.ct_pretrain.as_ref(),
            last: log.records.last(),
        },
    )?;
    println!("adapted for {} iterations; checkpoint in {}", bundle.iteration, out.join("checkpoint").display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    split: &'a str,
    images: usize,
    aggregate: &'a MetricsReport,
    per_image: &'a [MetricsReport],
}

fn run_eval(cfg: &RunConfig, data: &Path, ckpt: &Path, split: &str, out: &Path, force: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let eval = SplitData::labeled(&manifest(data, split)?)?;
    prepare_out(out, force)?;
    echo_config(out, cfg)?;
    let DatasetReport { aggregate, per_image } = evaluate_dataset(&model, &eval, &cfg.eval)?;
    write_json(
        &out.join("metrics.json"),
        &MetricsFile {
            split,
            images: eval.len(),
            aggregate: &aggregate,
            per_image: &per_image,
        },
    )?;
    let viz = out.join("viz");
    if cfg.viz.count > 0 {
        fs::create_dir_all(&viz).map_err(|e| io_err(&viz, e))?;
    }
    for i in 0..cfg.viz.count.min(eval.len()) {
        let img = eval.image(i)?;
        let pred = model.predict(&Image::batch(&[&img])?)?;
        export_viz(&DepthMap::from_tensor(&pred, 0)?, &viz.join(format!("pred_{i:04}.png")), cfg.viz.depth_range)?;
        let gt = adadepth::scenegen::LabeledSource::depth(&eval, i)?;
        export_viz(&gt, &viz.join(format!("gt_{i:04}.png")), cfg.viz.depth_range)?;
    }
    print!("{}", adadepth::evalkit::format_table(&[(split, &aggregate)]));
    Ok(())
}

fn run_sweep(cfg: &RunConfig, data: &Path, network: &Path, out: &Path, force: bool) -> Result<()> {
    let net = load_network(network)?;
    let source = SplitData::labeled(&manifest(data, "source_train")?)?;
    let target = SplitData::images(&manifest(data, "target_train")?)?;
    let eval = SplitData::labeled(&manifest(data, "target_eval")?)?;
    prepare_out(out, force)?;
    echo_config(out, cfg)?;
    let report = sweep_sharing(&net, &source, &target, &eval, &cfg.sweep.depths, &cfg.adapt, &cfg.eval)?;
    write_json(&out.join("sweep.json"), &report)?;
    let table = report.to_table();
    fs::write(out.join("sweep.txt"), &table).map_err(|e| io_err(&out.join("sweep.txt"), e))?;
    print!("{table}");
    Ok(())
}
