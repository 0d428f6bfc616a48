use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use misaligned_cp::cp::ModelFile;
use misaligned_cp::data::{filter_genes, load_dataset, subset_to_panel, write_dataset, DataPaths, Dataset};
use misaligned_cp::eval::{
    aggregate_table, component_table, evaluate, paired_lasso, write_roc_csv, write_table_csv, ReplicateMetrics,
};
use misaligned_cp::selection::{run_full, PathResult};
use misaligned_cp::simulation::{generate_replicate, SimConfig, TruthFile};
use misaligned_cp::solver::write_trace_csv;

mod config;
mod manifest;

use config::RunConfig;
use manifest::{list_files, ManifestBuilder};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<misaligned_cp::Error> for CliError {
    fn from(e: misaligned_cp::Error) -> Self {
        CliError { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "misaligned-cp", version, about = "Kernel-weighted CP tensor regression for misaligned spatial data")]
struct Cli {
    /// Worker threads for independent jobs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select bandwidth and penalty, fit the model and write reports.
    Fit(FitArgs),
    /// Generate simulated replicate datasets with their true coefficients.
    Simulate(SimulateArgs),
    /// Score an estimate against a known coefficient tensor.
    Evaluate(EvaluateArgs),
    /// Fit every candidate bandwidth and write the elbow curve.
    BandwidthScan(FitArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Directory with samples.csv, plaques.csv, cells.csv, expression.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A model.json, or `paired-lasso` to run the baseline on the data.
    #[arg(long, required_unless_present = "batch")]
    estimate: Option<String>,
    /// truth.json of a simulated dataset.
    #[arg(long, required_unless_present = "batch")]
    truth: Option<PathBuf>,
    /// Dataset directory for the baseline (default: the truth file's directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root of a simulated replicate grid; every directory below it with a
    /// truth.json is scored.
    #[arg(long, conflicts_with_all = ["estimate", "truth"])]
    batch: Option<PathBuf>,
    /// In batch mode, fit the proposed model where no model.json exists.
    #[arg(long, requires = "batch")]
    fit_missing: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::BandwidthScan(a) => cmd_bandwidth_scan(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Loads the dataset and applies the configured gene panel and scaling.
fn prepare_dataset(dir: &Path, cfg: &RunConfig, manifest: &mut ManifestBuilder) -> CliResult<Dataset> {
    let paths = DataPaths::in_dir(dir);
    let mut ds = load_dataset(&paths, cfg.data.format())?;
    for p in paths.all() {
        manifest.input(p);
    }
    if let Some(f) = &cfg.gene_filter {
        let panel = filter_genes(&ds, &f.filter())?;
        info!("gene filter keeps {} of {} genes", panel.len(), ds.n_genes());
        ds = subset_to_panel(&ds, &panel)?;
    }
    if cfg.data.zscore {
        ds.zscore_genes();
    }
    Ok(ds)
}

fn write_elbow_curve(res: &PathResult, ds: &Dataset, path: &Path) -> CliResult<()> {
    let mut text = String::from("L");
    for s in &ds.samples {
        text.push_str(&format!(",H_{}", s.id));
    }
    text.push_str(",normalized_loss,selected_flag\n");
    for (i, f) in res.fits.iter().enumerate() {
        text.push_str(&f.l.to_string());
        for h in &f.bandwidths {
            text.push_str(&format!(",{h:.2}"));
        }
        let flag = if i == res.selected { 1 } else { 0 };
        text.push_str(&format!(",{},{flag}\n", f.selected_point().normalized_loss));
    }
    write_text(path, &text)
}

fn write_model(res: &PathResult, ds: &Dataset, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    let file = ModelFile::from_model(
        &res.model,
        ds.genes.clone(),
        ds.cell_types.clone(),
        ds.times.clone(),
        cfg.selection.solver.als.seed,
    );
    write_text(path, &(file.to_json()? + "\n"))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut manifest = ManifestBuilder::start("fit", &cfg, cfg.selection.solver.als.seed);
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    let ds = prepare_dataset(&a.data, &cfg, &mut manifest)?;
    let res = run_full(&ds, &cfg.selection)?;
    create_dir(&a.out)?;
    write_model(&res, &ds, &cfg, &a.out.join("model.json"))?;
    res.write_report(&a.out.join("path_report.csv"))?;
    let summary = component_table(&res.model, cfg.report.top_k);
    summary.write_csv(&ds, &a.out.join("component_summary.csv"))?;
    summary.write_strength_csv(&ds, &a.out.join("strength.csv"))?;
    write_trace_csv(&res.selected_fit().selected_point().fit.trace, &a.out.join("objective_trace.csv"))?;
    write_elbow_curve(&res, &ds, &a.out.join("elbow_curve.csv"))?;
    let sel = res.selected_fit();
    info!(
        "selected L = {}, lambda = {:e}, rank {}",
        sel.l,
        sel.selected_point().lambda,
        res.model.rank()
    );
    manifest.finish(&a.out)
}

fn cmd_bandwidth_scan(a: &FitArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut manifest = ManifestBuilder::start("bandwidth-scan", &cfg, cfg.selection.solver.als.seed);
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    let ds = prepare_dataset(&a.data, &cfg, &mut manifest)?;
    let res = run_full(&ds, &cfg.selection)?;
    create_dir(&a.out)?;
    write_elbow_curve(&res, &ds, &a.out.join("elbow_curve.csv"))?;
    manifest.finish(&a.out)
}

/// Directory of one replicate inside a simulation grid.
fn replicate_dir(out: &Path, plaques: usize, sigma2: f64, rep: usize) -> PathBuf {
    out.join(format!("M{plaques}_sigma2_{sigma2}")).join(format!("rep{:03}", rep + 1))
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut manifest = ManifestBuilder::start("simulate", &cfg, cfg.simulation.seed);
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    let base = &cfg.simulation;
    let plaques = if cfg.grid.plaques.is_empty() { vec![base.plaques] } else { cfg.grid.plaques.clone() };
    let sigma2 = if cfg.grid.sigma2.is_empty() { vec![base.sigma2] } else { cfg.grid.sigma2.clone() };
    let mut jobs = Vec::new();
    for &m in &plaques {
        for &s2 in &sigma2 {
            for r in 0..cfg.grid.replicates {
                // replicate r uses the same seed in every grid cell
                let sim = SimConfig { plaques: m, sigma2: s2, seed: base.seed.wrapping_add(r as u64), ..base.clone() };
                sim.validate()?;
                jobs.push((replicate_dir(&a.out, m, s2, r), sim));
            }
        }
    }
    create_dir(&a.out)?;
    jobs.par_iter()
        .map(|(dir, sim)| -> CliResult<()> {
            let truth = generate_replicate(sim)?;
            write_dataset(&truth.dataset, dir)?;
            write_text(&dir.join("truth.json"), &(TruthFile::from_truth(&truth).to_json()? + "\n"))
        })
        .collect::<CliResult<Vec<()>>>()?;
    info!("wrote {} replicate datasets", jobs.len());
    manifest.finish(&a.out)
}

fn load_truth(path: &Path) -> CliResult<TruthFile> {
    Ok(TruthFile::from_json(&read_text(path)?)?)
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let mut manifest = ManifestBuilder::start("evaluate", &cfg, cfg.selection.solver.als.seed);
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    if let Some(root) = &a.batch {
        evaluate_batch(root, a, &cfg, &mut manifest)?;
        return manifest.finish(&a.out);
    }
    let (Some(estimate), Some(truth_path)) = (&a.estimate, &a.truth) else {
        return Err(CliError::input("--estimate and --truth are required without --batch"));
    };
    let truth = load_truth(truth_path)?;
    manifest.input(truth_path);
    let beta = truth.beta_tensor()?;
    let (est, method) = if estimate == "paired-lasso" {
        let dir = match &a.data {
            Some(d) => d.clone(),
            None => truth_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let ds = prepare_dataset(&dir, &cfg, &mut manifest)?;
        (paired_lasso(&ds, &cfg.lasso), "paired_lasso")
    } else {
        let path = Path::new(estimate);
        manifest.input(path);
        (ModelFile::from_json(&read_text(path)?)?.to_model()?.to_dense(), "proposed")
    };
    let report = evaluate(&est, &beta, method)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("metrics.json"), &(report.to_json()? + "\n"))?;
    write_roc_csv(&report.roc, &a.out.join("roc_points.csv"))?;
    manifest.finish(&a.out)
}

fn truth_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut files = Vec::new();
    list_files(dir, &mut files)?;
    for f in files {
        if f.file_name().is_some_and(|n| n == "truth.json") {
            if let Some(p) = f.parent() {
                out.push(p.to_path_buf());
            }
        }
    }
    Ok(())
}

fn evaluate_batch(root: &Path, a: &EvaluateArgs, cfg: &RunConfig, manifest: &mut ManifestBuilder) -> CliResult<()> {
    let mut dirs = Vec::new();
    truth_dirs(root, &mut dirs)?;
    if dirs.is_empty() {
        return Err(CliError::input(format!("{}: no truth.json found", root.display())));
    }
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut counter: Vec<((usize, u64), usize)> = Vec::new();
    for dir in &dirs {
        let truth_path = dir.join("truth.json");
        let truth = load_truth(&truth_path)?;
        manifest.input(&truth_path);
        let beta = truth.beta_tensor()?;
        let key = (truth.config.plaques, truth.config.sigma2.to_bits());
        let rep = match counter.iter_mut().find(|(k, _)| *k == key) {
            Some((_, n)) => {
                *n += 1;
                *n - 1
            }
            None => {
                counter.push((key, 1));
                0
            }
        };
        let ds = prepare_dataset(dir, cfg, manifest)?;
        let rel = dir.strip_prefix(root).unwrap_or(dir);

        let local = dir.join("model.json");
        let fitted = a.out.join("fits").join(rel).join("model.json");
        let model_path = if local.exists() {
            Some(local)
        } else if fitted.exists() {
            Some(fitted)
        } else if a.fit_missing {
            info!("fitting {}", dir.display());
            let res = run_full(&ds, &cfg.selection)?;
            create_dir(fitted.parent().unwrap())?;
            write_model(&res, &ds, cfg, &fitted)?;
            Some(fitted)
        } else {
            warn!("{}: no model.json, proposed method skipped", dir.display());
            None
        };
        let mut push = |method: &str, est| -> CliResult<()> {
            let r = evaluate(&est, &beta, method)?;
            rows.push(ReplicateMetrics {
                m: truth.config.plaques,
                sigma2: truth.config.sigma2,
                replicate: rep,
                method: method.to_string(),
                mse: r.mse,
                auc: r.auc,
            });
            Ok(())
        };
        if let Some(p) = model_path {
            manifest.input(&p);
            push("proposed", ModelFile::from_json(&read_text(&p)?)?.to_model()?.to_dense())?;
        }
        push("paired_lasso", paired_lasso(&ds, &cfg.lasso))?;
    }
    let path = a.out.join("replicate_metrics.csv");
    let mut text = String::from("M,sigma2,replicate,method,mse,auc\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{},{},{}\n", r.m, r.sigma2, r.replicate, r.method, r.mse, r.auc));
    }
    write_text(&path, &text)?;
    write_table_csv(&aggregate_table(&rows), &a.out.join("table1.csv"))?;
    Ok(())
}
