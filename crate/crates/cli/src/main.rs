mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imss_core::data::{generate_synthetic, load_splits, write_dataset, DatasetManifest, ModalityBundle, MANIFEST_FILE};
use imss_core::eval::{self, DiagnoseOptions, DiagnosticsReport, MetricsReport};
use imss_core::train::{self, Checkpoint};
use imss_core::{Config, Error, Model32, Result, Variant};

#[derive(Parser)]
#[command(name = "imss", version, about = "Incomplete multimodal semantic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multimodal dataset.
    SynthData(Common),
    /// Train a model and write checkpoints and the epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint over modality subsets.
    Eval(EvalArgs),
    /// Feature variance, robustness and complexity diagnostics.
    Diagnose(EvalArgs),
    /// Render SVG charts from report files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated modality subset; every non-empty subset when omitted.
    #[arg(long, value_delimiter = ',')]
    subset: Option<Vec<String>>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics report written by `eval`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Diagnostics report written by `diagnose`.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Configuration file (or defaults), then overrides, then the seed flag.
fn effective_config(common: &Common, base: Option<Config>) -> Result<Config> {
    let cfg = match (&common.config, base) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            Config::load(path)?
        }
        (None, Some(b)) => b,
        (None, None) => Config::default(),
    };
    let mut cfg = cfg.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed.init = s;
        cfg.seed.mas = s + 1;
        cfg.seed.data = s + 2;
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path, cfg: Option<&Config>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(cfg) = cfg {
        write(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    }
    Ok(())
}

fn load_data(cfg: &Config) -> Result<(DatasetManifest, Vec<ModalityBundle>, Vec<ModalityBundle>)> {
    let root = Path::new(&cfg.data.root);
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    train::check_manifest(cfg, &manifest)?;
    let (tr, va) = load_splits(root, &manifest)?;
    Ok((manifest, tr, va))
}

fn synth_data(args: &Common) -> Result<()> {
    let cfg = effective_config(args, None)?;
    let (train, val) = generate_synthetic(&cfg.synth)?;
    prepare_out(&args.out, Some(&cfg))?;
    let manifest = write_dataset(&args.out, &cfg.synth, &train, &val)?;
    println!(
        "wrote {} train and {} val samples ({} modalities, {} classes) to {}",
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.modalities.len(),
        manifest.classes(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common, None)?;
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    let (manifest, tr, va) = load_data(&cfg)?;
    let (_, summary) = train::fit::<f32>(&cfg, &tr, &va, manifest.ignore_index, Some(&args.common.out))?;
    for r in &summary.history {
        let val = r.val_average.map(|v| format!("  val Average mIoU {:.2}", 100.0 * v)).unwrap_or_default();
        println!(
            "epoch {:>3}  lr {:.2e}  l_sgf {:.4}  l_mas {:.4}  total {:.4}{val}",
            r.epoch, r.lr, r.l_sgf, r.l_mas, r.total
        );
    }
    if let Some(rep) = &summary.last_report {
        write(&args.common.out.join("metrics.json"), &rep.to_json()?)?;
        print!("{}", rep.to_table());
    }
    Ok(())
}

/// Checkpoint, effective configuration and validation split for `eval`/`diagnose`.
fn load_for_eval(args: &EvalArgs) -> Result<(Model32, Config, u32, Vec<ModalityBundle>)> {
    if !args.checkpoint.exists() {
        return Err(Error::MissingFile(args.checkpoint.clone()));
    }
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let model = ck.model();
    let mut cfg = effective_config(&args.common, Some(ck.config.clone()))?;
    if cfg.model != model.config {
        return Err(Error::Config("model section differs from the checkpoint".into()));
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    let (manifest, _, val) = load_data(&cfg)?;
    Ok((model, cfg, manifest.ignore_index, val))
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (model, cfg, ignore, val) = load_for_eval(args)?;
    let subsets = args.subset.as_ref().map(|s| vec![s.clone()]);
    let report = eval::evaluate(
        &model,
        &val,
        subsets.as_deref(),
        cfg.train.variant,
        cfg.eval.batch_size,
        ignore,
    )?;
    prepare_out(&args.common.out, Some(&cfg))?;
    write(&args.common.out.join("metrics.json"), &report.to_json()?)?;
    let table = report.to_table();
    write(&args.common.out.join("metrics.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn diagnose_cmd(args: &EvalArgs) -> Result<()> {
    let (model, cfg, ignore, val) = load_for_eval(args)?;
    let opts = DiagnoseOptions {
        variant: cfg.train.variant,
        batch_size: cfg.eval.batch_size,
        ignore_index: ignore,
        standardize: true,
        silhouette: cfg.eval.silhouette,
        silhouette_cap: cfg.eval.silhouette_cap,
    };
    let report = eval::diagnose(&model, &val, &opts)?;
    prepare_out(&args.common.out, Some(&cfg))?;
    write(
        &args.common.out.join("diagnostics.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    for (s, v) in report.intra_class_variance.iter().enumerate() {
        let vals: Vec<String> = v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:.3}"))).collect();
        println!("scale {} variance: {}", s + 1, vals.join(" "));
    }
    for (s, r) in report.robustness.iter().enumerate() {
        let vals: Vec<String> = r.iter().map(|(m, v)| format!("{m} {v:.3}")).collect();
        println!("scale {} robustness: {}", s + 1, vals.join(", "));
    }
    println!(
        "fusion GFLOPs {:.3}, sampling branch GFLOPs {:.3}",
        report.complexity.sgf_total as f64 / 1e9,
        report.complexity.mas_total as f64 / 1e9
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn plot_cmd(args: &PlotArgs) -> Result<()> {
    if args.metrics.is_none() && args.diagnostics.is_none() {
        return Err(Error::Config("plot needs --metrics and/or --diagnostics".into()));
    }
    prepare_out(&args.out, None)?;
    let mut written = Vec::new();
    if let Some(p) = &args.metrics {
        let report: MetricsReport = read_json(p)?;
        write(&args.out.join("metrics_table.svg"), &plot::metrics_table(&report))?;
        write(&args.out.join("metrics_table.md"), &report.to_table())?;
        written.extend(["metrics_table.svg", "metrics_table.md"]);
    }
    if let Some(p) = &args.diagnostics {
        let report: DiagnosticsReport = read_json(p)?;
        if !report.robustness.is_empty() {
            let mods: Vec<String> = report.robustness[0].keys().cloned().collect();
            write(&args.out.join("robustness.svg"), &plot::robustness_bars(&report.robustness, &mods))?;
            written.push("robustness.svg");
        }
        write(&args.out.join("variance_radar.svg"), &plot::variance_radar(&report.intra_class_variance))?;
        written.push("variance_radar.svg");
    }
    println!("wrote {} to {}", written.join(", "), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
