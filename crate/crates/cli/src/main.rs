//! `gumbel-prune` command-line driver.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 I/O or artifact error,
//! 4 numeric abort (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gumbel_prune::data::{self, Dataset, Scenario, SyntheticSpec, Targets};
use gumbel_prune::experiment::{self, Method, RunOutcome};
use gumbel_prune::interpret;
use gumbel_prune::persist::{self, Checkpoint, ExperimentConfig, PrunedArtifact};
use gumbel_prune::train::{self, PrunedNetwork};
use gumbel_prune::Error;

#[derive(Parser)]
#[command(
    name = "gumbel-prune",
    version,
    about = "Learn sparse networks with Gumbel-Softmax gates and read them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML experiment config; writes checkpoint.json,
    /// report.csv, summary.json and pruned.json.
    Train(TrainArgs),
    /// Finalize a checkpoint into a pruned network artifact.
    Prune(PruneArgs),
    /// Importance, pathway, symmetry and probe exports for a pruned network.
    Report(ReportArgs),
    /// Learned gates against random masks over a grid of densities and seeds.
    Sweep(SweepArgs),
    /// Write a synthetic pathway dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PruneArgs {
    /// Checkpoint file, or a directory holding checkpoint.json.
    checkpoint: PathBuf,
    /// Output directory (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Pruned artifact, or a directory holding pruned.json.
    pruned: PathBuf,
    /// Experiment config whose task supplies feature names and probe data.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// pathways.dot and pathways.json
    #[arg(long)]
    dot: bool,
    /// heatmap.csv; grid shape as ROWSxCOLS, default square when possible
    #[arg(long, num_args = 0..=1, default_missing_value = "auto")]
    heatmap: Option<String>,
    /// importance.csv (inputs x outputs)
    #[arg(long)]
    importance: bool,
    /// symmetry.json
    #[arg(long)]
    symmetry: bool,
    /// probe.json for this output label, over the two most important inputs
    /// unless --probe-pixels is given
    #[arg(long)]
    probe: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    probe_pixels: Vec<usize>,
    /// A pixel counts as active when strictly above this value
    #[arg(long, default_value_t = 0.0)]
    probe_threshold: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides `sweep.densities`.
    #[arg(long, value_delimiter = ',')]
    densities: Vec<f64>,
    /// Overrides `sweep.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 4,
        Some(
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Csv { .. }
            | Error::Version { .. }
            | Error::Artifact(_)
            | Error::Json(_),
        ) => 3,
        _ => 2,
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Loads, applies overrides, and validates. Returns the config with its
/// hash.
fn load_config(c: &Common) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, text) = ExperimentConfig::load(&c.config)?;
    cfg.validate(Some(&text))?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    let hash = cfg.hash();
    Ok((cfg, hash))
}

fn csv_with_hash(hash: &str, body: &str) -> Vec<u8> {
    format!("# config_hash={hash}\n{body}").into_bytes()
}

fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

fn outcome_summary(o: &RunOutcome, hash: &str) -> serde_json::Value {
    let r = &o.report;
    let last = r.epochs.last();
    json!({
        "config_hash": hash,
        "method": o.method.name(),
        "seed": o.seed,
        "target_density": o.density,
        "epochs": r.epochs.len(),
        "gate_count": r.gate_count,
        "retained_count": o.pruned.retained_count(),
        "density": o.pruned.density(),
        "layer_densities": o.pruned.layer_densities(),
        "test_accuracy": r.test_accuracy,
        "train_accuracy": last.and_then(|e| e.train_accuracy),
        "final_prediction_loss": last.map(|e| e.prediction_loss),
        "final_hard_density": last.map(|e| e.hard_density),
        "forced_minimum": o.forced_minimum,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, hash) = load_config(&a.common)?;
    let seed = cfg.train.seed;
    let (tr, te) = persist::load_task(&cfg.task, seed)?;
    let (method, density) = match &cfg.baseline {
        Some(b) => (Method::Random, b.density),
        None => (Method::Gumbel, cfg.train.target_density),
    };
    let o = experiment::run(&cfg, &tr, &te, method, density, seed)?;

    // a random-mask run never touched its logits; store the mask in them so
    // `prune` on this checkpoint reproduces pruned.json
    let mut saved = o.net.clone();
    if method == Method::Random {
        for (l, p) in saved.layers.iter_mut().zip(&o.pruned.layers) {
            l.logits = p.mask.mapv(|m| if m { 1.0 } else { -1.0 });
        }
    }
    let out = &cfg.out_dir;
    let mut files = vec![
        (
            out.join("checkpoint.json"),
            Checkpoint::capture(&saved, &o.train, o.report.epochs.len(), &hash)
                .to_json()
                .into_bytes(),
        ),
        (out.join("summary.json"), json_bytes(&outcome_summary(&o, &hash))),
        (
            out.join("pruned.json"),
            PrunedArtifact::capture(&o.pruned, &hash).to_json().into_bytes(),
        ),
    ];
    if cfg.export.report {
        files.push((out.join("report.csv"), csv_with_hash(&hash, &o.report.to_csv())));
    }
    let exports = Exports {
        dot: cfg.export.dot,
        heatmap: cfg.export.heatmap.then(|| "auto".to_string()),
        importance: cfg.export.importance,
        symmetry: false,
    };
    files.extend(export_files(&o.pruned, Some(&te), &exports, out, &hash)?);
    persist::write_files_atomic(&files)?;
    println!(
        "{}: retained {} of {} connections (density {:.6}), test accuracy {:.4}",
        o.method.name(),
        o.pruned.retained_count(),
        o.pruned.gate_count(),
        o.pruned.density(),
        o.report.test_accuracy
    );
    Ok(())
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let path = resolve(&a.checkpoint, "checkpoint.json");
    let ck = Checkpoint::load(&path)?;
    let net = ck.restore()?;
    let pruned = train::finalize(&net);
    let out = a
        .out
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let summary = json!({
        "config_hash": ck.config_hash,
        "gate_count": pruned.gate_count(),
        "retained_count": pruned.retained_count(),
        "density": pruned.density(),
        "layer_densities": pruned.layer_densities(),
    });
    persist::write_files_atomic(&[
        (
            out.join("pruned.json"),
            PrunedArtifact::capture(&pruned, &ck.config_hash).to_json().into_bytes(),
        ),
        (out.join("prune_summary.json"), json_bytes(&summary)),
    ])?;
    println!(
        "retained {} of {} connections (density {:.6})",
        pruned.retained_count(),
        pruned.gate_count(),
        pruned.density()
    );
    Ok(())
}

struct Exports {
    dot: bool,
    heatmap: Option<String>,
    importance: bool,
    symmetry: bool,
}

fn grid_shape(spec: &str, p: usize) -> Result<(usize, usize)> {
    if spec == "auto" {
        let side = (p as f64).sqrt().round() as usize;
        return Ok(if side * side == p { (side, side) } else { (1, p) });
    }
    let parse = || -> Option<(usize, usize)> {
        let (r, c) = spec.split_once(['x', 'X'])?;
        Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
    };
    match parse() {
        Some((r, c)) if r * c == p => Ok((r, c)),
        Some((r, c)) => Err(config_error(format!("heatmap grid {r}x{c} does not cover {p} inputs"))),
        None => Err(config_error(format!("heatmap grid must look like 28x28, got {spec:?}"))),
    }
}

fn names(ds: Option<&Dataset>, pruned: &PrunedNetwork) -> (Vec<String>, Vec<String>) {
    match ds {
        Some(d) => (d.feature_names.clone(), d.class_names.clone()),
        None => (
            (1..=pruned.layers[0].spec.input_size)
                .map(|i| format!("x{i}"))
                .collect(),
            (1..=pruned.output_size()).map(|o| format!("y{o}")).collect(),
        ),
    }
}

fn export_files(
    pruned: &PrunedNetwork,
    ds: Option<&Dataset>,
    ex: &Exports,
    out: &Path,
    hash: &str,
) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    let imp = interpret::input_output_importance(pruned);
    let (feature_names, output_names) = names(ds, pruned);
    if ex.dot {
        let graph = interpret::extract_pathways(pruned);
        let dot = format!("// config_hash={hash}\n{}", graph.to_dot());
        let mut doc = graph.to_json();
        doc["config_hash"] = json!(hash);
        files.push((out.join("pathways.dot"), dot.into_bytes()));
        files.push((out.join("pathways.json"), json_bytes(&doc)));
    }
    if ex.importance {
        let body = interpret::importance_csv(&imp, &feature_names, &output_names);
        files.push((out.join("importance.csv"), csv_with_hash(hash, &body)));
    }
    if let Some(spec) = &ex.heatmap {
        let (r, c) = grid_shape(spec, imp.nrows())?;
        let grid = interpret::importance_heatmap(&imp, r, c)?;
        files.push((
            out.join("heatmap.csv"),
            csv_with_hash(hash, &interpret::grid_csv(&grid)),
        ));
    }
    if ex.symmetry {
        let part = interpret::symmetry_signatures(&interpret::extract_pathways(pruned));
        let groups: Vec<Vec<&str>> = part
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| feature_names[i].as_str()).collect())
            .collect();
        let doc = json!({ "config_hash": hash, "groups": groups, "signatures": part.signatures });
        files.push((out.join("symmetry.json"), json_bytes(&doc)));
    }
    Ok(files)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let path = resolve(&a.pruned, "pruned.json");
    let art = PrunedArtifact::load(&path)?;
    let pruned = art.restore()?;
    let hash = art.config_hash.clone();
    let test = match &a.config {
        Some(c) => {
            let (cfg, _) = load_config(&Common {
                config: c.clone(),
                seed: a.seed,
                out: None,
            })?;
            let (_, te) = persist::load_task(&cfg.task, cfg.train.seed)?;
            if te.n_features() != pruned.layers[0].spec.input_size {
                return Err(Error::shape(
                    "dataset feature width",
                    pruned.layers[0].spec.input_size,
                    te.n_features(),
                )
                .into());
            }
            Some(te)
        }
        None => None,
    };
    let nothing = !a.dot && a.heatmap.is_none() && !a.importance && !a.symmetry && a.probe.is_none();
    let ex = if nothing {
        Exports {
            dot: true,
            heatmap: Some("auto".into()),
            importance: true,
            symmetry: true,
        }
    } else {
        Exports {
            dot: a.dot,
            heatmap: a.heatmap.clone(),
            importance: a.importance,
            symmetry: a.symmetry,
        }
    };
    let out = a
        .out
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut files = export_files(&pruned, test.as_ref(), &ex, &out, &hash)?;

    if let Some(label) = a.probe {
        let ds = test
            .as_ref()
            .ok_or_else(|| config_error("--probe needs --config to supply the dataset"))?;
        let pixels = if a.probe_pixels.is_empty() {
            let imp = interpret::input_output_importance(&pruned);
            if label >= imp.ncols() {
                return Err(Error::IndexOutOfRange {
                    index: label,
                    len: imp.ncols(),
                }
                .into());
            }
            interpret::top_inputs(&imp, label, 2)
        } else {
            a.probe_pixels.clone()
        };
        let res = interpret::pattern_probe(ds, &pixels, label, a.probe_threshold)?;
        let mut doc = serde_json::to_value(&res).context("probe result")?;
        doc["config_hash"] = json!(hash);
        doc["pixel_names"] = json!(pixels.iter().map(|&p| ds.feature_names[p].clone()).collect::<Vec<_>>());
        files.push((out.join("probe.json"), json_bytes(&doc)));
    }
    persist::write_files_atomic(&files)?;
    for (p, _) in &files {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (cfg, hash) = load_config(&a.common)?;
    let grid = cfg.sweep.clone().unwrap_or(persist::SweepSpec {
        densities: Vec::new(),
        seeds: Vec::new(),
    });
    let densities = if a.densities.is_empty() {
        grid.densities
    } else {
        a.densities
    };
    let mut seeds = if a.seeds.is_empty() { grid.seeds } else { a.seeds };
    if seeds.is_empty() {
        seeds.push(cfg.train.seed);
    }
    if densities.is_empty() {
        return Err(config_error("sweep needs densities (--densities or [sweep].densities)"));
    }
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(config_error(format!("sweep densities must lie in (0, 1], got {d}")));
    }

    let mut rows = String::from("density,method,seed,accuracy,retained_count\n");
    let mut runs = Vec::new();
    for &seed in &seeds {
        let (tr, te) = persist::load_task(&cfg.task, seed)?;
        for &d in &densities {
            for method in [Method::Gumbel, Method::Random] {
                let o = experiment::run(&cfg, &tr, &te, method, d, seed)?;
                let acc = train::evaluate(&o.pruned, &te)?;
                rows.push_str(&format!(
                    "{d},{},{seed},{acc},{}\n",
                    method.name(),
                    o.pruned.retained_count()
                ));
                eprintln!("density {d} {} seed {seed}: accuracy {acc:.4}", method.name());
                runs.push(outcome_summary(&o, &hash));
            }
        }
    }
    let out = &cfg.out_dir;
    persist::write_files_atomic(&[
        (out.join("sweep.csv"), csv_with_hash(&hash, &rows)),
        (
            out.join("sweep.json"),
            json_bytes(&json!({ "config_hash": hash, "runs": runs })),
        ),
    ])?;
    print!("{rows}");
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let ds = data::gen_synthetic(&SyntheticSpec {
        scenario: a.scenario,
        n: a.n,
        noise_std: a.noise,
        seed: a.seed,
    })?;
    let Targets::Binary(y) = &ds.targets else {
        unreachable!("synthetic tasks have binary targets")
    };
    let mut header: Vec<String> = ds.feature_names.clone();
    header.extend(ds.class_names.iter().cloned());
    let mut body = header.join(",");
    body.push('\n');
    for (x, t) in ds.features.outer_iter().zip(y.outer_iter()) {
        let cells: Vec<String> = x
            .iter()
            .map(|v| v.to_string())
            .chain(t.iter().map(|v| format!("{v}")))
            .collect();
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    persist::write_files_atomic(&[(a.out.clone(), body.into_bytes())])?;
    println!("{}", a.out.display());
    Ok(())
}
