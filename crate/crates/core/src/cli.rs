//! Command-line front end: `synth`, `train`, `rank`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::probe::{evaluate, train_probe, PerStateScores, TrainConfig};
use crate::probedata::{read_dataset, split, write_dataset, DEFAULT_VAL_FRACTION};
use crate::ranking::{mmrv, pearson, rank_report, RankInput};
use crate::scoring::{proxy_scores, subset_score, ScoreMatrix};
use crate::synthgen::{generate_model_family, quality, GenConfig};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "STATERANK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "staterank", version, about = "Rank visual representations with linear state probes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic model family (one dataset per noise level).
    Synth(SynthArgs),
    /// Train and evaluate one probe per dataset.
    Train(TrainArgs),
    /// Compare proxy scores with policy success rates.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated, strictly ascending noise levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 1.0, 3.0])]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub objects: usize,
    #[arg(long, default_value_t = 3)]
    pub materials: usize,
    #[arg(long, default_value_t = 3)]
    pub lighting: usize,
    #[arg(long, default_value_t = 4)]
    pub shape_bins: usize,
    #[arg(long, default_value_t = 7)]
    pub joints: usize,
    #[arg(long, default_value_t = 6)]
    pub ee_dim: usize,
    /// Feature grid side is 7 times this.
    #[arg(long, default_value_t = 2)]
    pub upsample: usize,
    #[arg(long, default_value_t = 2)]
    pub max_box_cells: usize,
    #[arg(long, default_value_t = 8.0)]
    pub embed_scale: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Probedata directory; repeat once per model.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Score matrix (`model,<state>...`) or per-model `state,score,count`
    /// file named after its parent directory; repeatable.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// `model_id,rate[,rate...]` rows; extra columns are averaged.
    #[arg(long)]
    pub success_table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated state names to aggregate over.
    #[arg(long, value_delimiter = ',')]
    pub subset: Option<Vec<String>>,
    /// Also report MMRV and Pearson with each state left out.
    #[arg(long)]
    pub leave_one_out: bool,
}

/// Applies [`THREADS_ENV`] to the global pool. Call once, before any work.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // a pool may already exist when embedded; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Rank(a) => cmd_rank(&a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

/// Writes one dataset directory per level under `out`, plus
/// `ground_truth.csv` with quality `1 / (1 + noise)` per model.
pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = GenConfig::new(
        a.objects,
        a.materials,
        a.lighting,
        a.shape_bins,
        a.joints,
        a.ee_dim,
        a.channels,
        a.frames,
        a.seed,
    )?;
    cfg.upsample = a.upsample;
    cfg.max_box_cells = a.max_box_cells;
    cfg.embed_scale = a.embed_scale;
    cfg.validate()?;
    let family = generate_model_family(&cfg, &a.levels)?;
    let mut truth = String::from("model_id,success_rate\n");
    for (ds, level) in family.iter().zip(&a.levels) {
        let dir = a.out.join(&ds.name);
        write_dataset(ds, &dir)?;
        truth.push_str(&format!("{},{}\n", ds.name, quality(*level)));
        println!("wrote {} ({} frames)", dir.display(), ds.len());
    }
    write_file(&a.out.join("ground_truth.csv"), &truth)
}

/// For each dataset `<name>`: `<out>/<name>/model/`, `<out>/<name>/scores.csv`;
/// then the combined `<out>/scores.csv`.
pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    for d in &a.dataset {
        require_exists(d)?;
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        seed: a.seed,
        ..defaults
    };
    cfg.validate()?;
    let mut entries: Vec<(String, PerStateScores)> = Vec::new();
    for dir in &a.dataset {
        let ds = read_dataset(dir)?;
        if entries.iter().any(|(n, _)| *n == ds.name) {
            return Err(Error::InvalidInput(format!("{}: duplicate model name `{}`", dir.display(), ds.name)));
        }
        let (train, val) = split(&ds, a.val_fraction, a.seed)?;
        let model = train_probe(&train, &cfg).map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.display())))?;
        let scores = evaluate(&model, &val)?;
        let model_dir = a.out.join(&ds.name);
        model.save(&model_dir.join("model"))?;
        write_file(&model_dir.join("scores.csv"), &scores.to_csv())?;
        for s in scores.states.iter().filter(|s| s.score.is_none()) {
            eprintln!("warning: {}: state `{}` has no scored instances", ds.name, s.name);
        }
        println!("trained {} ({} train / {} val frames)", ds.name, train.len(), val.len());
        entries.push((ds.name, scores));
    }
    let matrix = ScoreMatrix::from_scores(&entries)?;
    write_file(&a.out.join("scores.csv"), &matrix.to_csv())
}

/// Success rates keyed by model id, in file order.
pub fn parse_success_table(text: &str, path: &Path) -> Result<Vec<(String, f64)>> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut seen_data = false;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields[0].is_empty() {
            return Err(parse_err(n, "expected `model_id,rate[,rate...]`".into()));
        }
        let values: Vec<Option<f64>> = fields[1..].iter().map(|f| f.parse::<f64>().ok()).collect();
        if !seen_data && values.iter().all(Option::is_none) {
            // header row
            seen_data = true;
            continue;
        }
        seen_data = true;
        let mut sum = 0.0;
        for (f, v) in fields[1..].iter().zip(&values) {
            match v {
                Some(v) if v.is_finite() => sum += v,
                _ => return Err(parse_err(n, format!("bad success rate `{f}`"))),
            }
        }
        let id = fields[0].to_string();
        if rows.iter().any(|(m, _)| *m == id) {
            return Err(parse_err(n, format!("duplicate model `{id}`")));
        }
        rows.push((id, sum / values.len() as f64));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "no success-rate rows".into()));
    }
    Ok(rows)
}

/// Reads one or more score files into a single matrix.
pub fn read_scores(paths: &[PathBuf]) -> Result<ScoreMatrix> {
    if let [single] = paths {
        let text = fs::read_to_string(single).map_err(|e| Error::io(single, e))?;
        if text.trim_start().starts_with("model") {
            return ScoreMatrix::from_csv(&text, single);
        }
    }
    let mut entries = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let model = p
            .parent()
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::format(p, "cannot derive a model id from the parent directory"))?;
        if entries.iter().any(|(m, _): &(String, PerStateScores)| *m == model) {
            return Err(Error::format(p, format!("duplicate model `{model}`")));
        }
        entries.push((model, PerStateScores::from_csv(&text, p)?));
    }
    ScoreMatrix::from_scores(&entries)
}

/// Writes `report.json`, `report.csv`, `violations.csv` (and `loo.csv` with
/// `--leave-one-out`) under `out`, then prints the table.
pub fn cmd_rank(a: &RankArgs) -> Result<()> {
    for p in a.scores.iter().chain([&a.success_table]) {
        require_exists(p)?;
    }
    let matrix = read_scores(&a.scores)?;
    let table_text = fs::read_to_string(&a.success_table).map_err(|e| Error::io(&a.success_table, e))?;
    let table = parse_success_table(&table_text, &a.success_table)?;

    let proxy = match &a.subset {
        Some(sub) => subset_score(&matrix, &sub.iter().map(String::as_str).collect::<Vec<_>>())?,
        None => proxy_scores(&matrix)?,
    };
    let success = align(&matrix.models, &table, &a.success_table)?;
    let proxy_values: Vec<f64> = proxy.iter().map(|(_, v)| *v).collect();
    let report = rank_report(&matrix.models, &success, &proxy_values)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("report.json"), &report.to_json())?;
    write_file(&a.out.join("report.csv"), &report.to_csv())?;
    write_file(&a.out.join("violations.csv"), &report.violations_csv())?;
    if let Some(sub) = &a.subset {
        println!("states: {}", sub.join(","));
    }
    print!("{}", report.render());

    if a.leave_one_out {
        let mut out = String::from("left_out,mmrv,pearson\n");
        let states: Vec<&str> = match &a.subset {
            Some(sub) => sub.iter().map(String::as_str).collect(),
            None => matrix.states.iter().map(String::as_str).collect(),
        };
        for left in &states {
            let rest: Vec<&str> = states.iter().copied().filter(|s| s != left).collect();
            if rest.is_empty() {
                continue;
            }
            let s: Vec<f64> = subset_score(&matrix, &rest)?.into_iter().map(|(_, v)| v).collect();
            let input = RankInput::new(success.clone(), s)?;
            let r = pearson(&input).map(|r| r.to_string()).unwrap_or_else(|_| "undefined".into());
            out.push_str(&format!("{left},{},{r}\n", mmrv(&input)));
        }
        write_file(&a.out.join("loo.csv"), &out)?;
        print!("{out}");
    }
    Ok(())
}

fn align(models: &[String], table: &[(String, f64)], path: &Path) -> Result<Vec<f64>> {
    let missing: Vec<&str> =
        models.iter().filter(|m| !table.iter().any(|(t, _)| t == *m)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no success rate for model(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(models.iter().map(|m| table.iter().find(|(t, _)| t == m).map(|(_, v)| *v).expect("checked above")).collect())
}
