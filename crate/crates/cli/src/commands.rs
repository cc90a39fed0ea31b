use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use atamlab_core::data::{stream_rng, Dataset};
use atamlab_core::eval::{evaluate_model, roc_csv, EvalReport};
use atamlab_core::gradcheck::{run_gradient_suite, ComponentResult, DEFAULT_INSTANCES, TOLERANCE};
use atamlab_core::model::Model;
use atamlab_core::train::{sgd_train, History};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::error::{create_dir, write_file, CliError};
use crate::plot::{roc_svg, Curve};

/// RNG stream for model initialization; streams 1–7 belong to data generation and training.
const INIT_STREAM: u64 = 8;

pub const REPORT_FORMAT: &str = "atamlab-report";

/// Parallelism cap from `ATAMLAB_THREADS` (default 1).
pub fn thread_limit() -> Result<usize, CliError> {
    match std::env::var("ATAMLAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::validation(format!(
                "ATAMLAB_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

pub fn init_model(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Model, CliError> {
    let attr_dim = if cfg.loss.uses_margins() {
        let table = train
            .attributes
            .as_ref()
            .ok_or_else(|| CliError::validation("ATAM requires attributes"))?;
        Some(table.attr_dim())
    } else {
        None
    };
    Model::new(
        &cfg.model,
        train.input_dim(),
        train.classes(),
        attr_dim,
        &mut stream_rng(seed, INIT_STREAM),
    )
    .map_err(CliError::from_core)
}

pub fn train_model(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<(Model, History), CliError> {
    let model = init_model(cfg, train, seed)?;
    sgd_train(&cfg.train_config(seed), train, model).map_err(CliError::from_core)
}

/// Writes `features.csv` and, when present, `attributes.csv`.
pub fn cmd_synth(config: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let loaded = LoadedConfig::load(config)?;
    if loaded.config.data.synth.is_none() {
        return Err(CliError::validation("synth needs a `data.synth` section"));
    }
    let ds = loaded.dataset()?;
    let dir = loaded.output_dir(out);
    create_dir(&dir)?;
    let mut written = vec![dir.join("features.csv")];
    write_file(&written[0], &ds.features_csv())?;
    if let Some(table) = &ds.attributes {
        written.push(dir.join("attributes.csv"));
        write_file(&written[1], &table.to_csv())?;
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_loss: f64,
}

fn write_training(dir: &Path, model: &Model, history: &History, hash: &str) -> Result<TrainOutput, CliError> {
    create_dir(dir)?;
    let checkpoint = dir.join("checkpoint.json");
    model.save_checkpoint(&checkpoint, hash).map_err(CliError::from_core)?;
    let history_path = dir.join("history.csv");
    write_file(&history_path, &history.to_csv(false))?;
    Ok(TrainOutput {
        checkpoint,
        history: history_path,
        final_loss: history.epochs.last().map_or(f64::NAN, |e| e.loss),
    })
}

/// Trains on the train split with the config's `seed`; writes `checkpoint.json` and `history.csv`.
pub fn cmd_train(config: &Path, out: Option<&Path>) -> Result<TrainOutput, CliError> {
    let loaded = LoadedConfig::load(config)?;
    let (train, _) = loaded.split()?;
    let (model, history) = train_model(&loaded.config, &train, loaded.config.seed)?;
    write_training(&loaded.output_dir(out), &model, &history, &loaded.hash)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub loss: String,
    pub seed: u64,
    pub config_hash: String,
    /// TAR keyed by the requested FAR level.
    pub tar_at_far: BTreeMap<String, f64>,
    pub report: EvalReport,
    pub config: ExperimentConfig,
}

impl ReportFile {
    fn new(loaded: &LoadedConfig, seed: u64, report: EvalReport) -> Self {
        let tar_at_far = report
            .verification
            .tar_at_far
            .iter()
            .map(|t| (t.far_level.to_string(), t.tar))
            .collect();
        ReportFile {
            format: REPORT_FORMAT.into(),
            loss: loaded.config.loss.name(),
            seed,
            config_hash: loaded.hash.clone(),
            tar_at_far,
            report,
            config: loaded.config.clone(),
        }
    }
}

fn check_dims(model: &Model, cfg: &ExperimentConfig, train: &Dataset) -> Result<(), CliError> {
    let checks = [
        ("input_dim", model.encoder.input_dim(), train.input_dim()),
        ("classes", model.classes(), train.classes()),
        ("embedding_dim", model.encoder.embedding_dim(), cfg.model.embedding_dim),
    ];
    for (name, ckpt, conf) in checks {
        if ckpt != conf {
            return Err(CliError::validation(format!(
                "dimension mismatch: checkpoint {name} {ckpt} vs config {name} {conf}"
            )));
        }
    }
    Ok(())
}

fn write_report(dir: &Path, file: &ReportFile) -> Result<(), CliError> {
    create_dir(dir)?;
    let json = serde_json::to_string_pretty(file).expect("report serializes");
    write_file(&dir.join("report.json"), &(json + "\n"))?;
    write_file(&dir.join("roc.csv"), &roc_csv(&file.report.verification))
}

/// Evaluates a checkpoint on the config's split; writes `report.json` and `roc.csv`.
pub fn cmd_eval(config: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<ReportFile, CliError> {
    let loaded = LoadedConfig::load(config)?;
    let (model, ckpt_hash) = Model::load_checkpoint(checkpoint).map_err(CliError::from_core)?;
    let (train, test) = loaded.split()?;
    check_dims(&model, &loaded.config, &train)?;
    let mut report = evaluate_model(&model, &train, &test, &loaded.config.eval).map_err(CliError::from_core)?;
    if ckpt_hash != loaded.hash {
        report
            .warnings
            .push("checkpoint was trained with a different config".into());
    }
    let file = ReportFile::new(&loaded, loaded.config.seed, report);
    write_report(&loaded.output_dir(out), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single value.
    pub std: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub config: String,
    pub loss: String,
    pub seeds: Vec<u64>,
    pub accuracy: Stat,
    pub tar_at_far: BTreeMap<String, Stat>,
    pub rank1: Stat,
    pub map: Stat,
    pub spearman: Option<Stat>,
    pub reports: Vec<ReportFile>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    pub far_levels: Vec<String>,
}

fn config_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::validation(format!("cannot read config directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(CliError::validation(format!(
            "compare needs at least 2 configs in {}, found {}",
            dir.display(),
            files.len()
        )));
    }
    Ok(files)
}

/// Runs `jobs` on up to `threads` workers and returns results in job order.
fn run_jobs<T: Send, R: Send>(jobs: Vec<T>, threads: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>().into_iter());
    let results = Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n).max(1) {
            s.spawn(|| loop {
                let next = queue.lock().unwrap().next();
                let Some((i, job)) = next else { break };
                let r = f(job);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

/// Trains and evaluates every config in `config_dir` for each of its seeds.
/// Per-run artifacts go to `<out>/<config stem>/seed_<s>/`; the table to `compare.csv` and `compare.txt`.
pub fn cmd_compare(config_dir: &Path, out: Option<&Path>) -> Result<CompareTable, CliError> {
    let configs = config_files(config_dir)?
        .iter()
        .map(|p| LoadedConfig::load(p).map(|c| (p.clone(), c)))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &configs[0].1.config.data;
    for (path, c) in &configs[1..] {
        if c.config.data.seed != first.seed {
            return Err(CliError::validation(format!(
                "mismatched dataset seeds: {} uses {} but {} uses {}",
                configs[0].0.display(),
                first.seed,
                path.display(),
                c.config.data.seed
            )));
        }
        if c.config.data != *first {
            return Err(CliError::validation(format!(
                "mismatched datasets: {} and {} describe different data",
                configs[0].0.display(),
                path.display()
            )));
        }
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| config_dir.join("out"));
    let threads = thread_limit()?;
    let splits = configs
        .iter()
        .map(|(_, c)| c.split())
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, c))| c.config.run_seeds().into_iter().map(move |s| (i, s)))
        .collect();
    let results = run_jobs(jobs.clone(), threads, |(i, seed)| -> Result<ReportFile, CliError> {
        let loaded = &configs[i].1;
        let (train, test) = &splits[i];
        let (model, history) = train_model(&loaded.config, train, seed)?;
        let report = evaluate_model(&model, train, test, &loaded.config.eval).map_err(CliError::from_core)?;
        let file = ReportFile::new(loaded, seed, report);
        let dir = out_dir.join(stem(&configs[i].0)).join(format!("seed_{seed}"));
        write_training(&dir, &model, &history, &loaded.hash)?;
        write_report(&dir, &file)?;
        Ok(file)
    });

    let mut per_config: Vec<Vec<ReportFile>> = vec![Vec::new(); configs.len()];
    for ((i, _), r) in jobs.iter().zip(results) {
        per_config[*i].push(r?);
    }
    let mut far_levels: Vec<f64> = configs
        .iter()
        .flat_map(|(_, c)| c.config.eval.far_levels.clone())
        .collect();
    far_levels.sort_by(|a, b| b.total_cmp(a));
    far_levels.dedup();
    let far_levels: Vec<String> = far_levels.iter().map(|f| f.to_string()).collect();

    let rows = configs
        .iter()
        .zip(per_config)
        .map(|((path, c), reports)| {
            let pick = |f: &dyn Fn(&ReportFile) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
            let tar_at_far = far_levels
                .iter()
                .filter_map(|level| {
                    Stat::of(&pick(&|r| r.tar_at_far.get(level).copied())).map(|s| (level.clone(), s))
                })
                .collect();
            CompareRow {
                config: stem(path),
                loss: c.config.loss.name(),
                seeds: c.config.run_seeds(),
                accuracy: Stat::of(&pick(&|r| Some(r.report.verification.best_accuracy))).unwrap(),
                tar_at_far,
                rank1: Stat::of(&pick(&|r| Some(r.report.rank1))).unwrap(),
                map: Stat::of(&pick(&|r| Some(r.report.map.map))).unwrap(),
                spearman: Stat::of(&pick(&|r| r.report.spearman)),
                reports,
            }
        })
        .collect();
    let table = CompareTable { rows, far_levels };
    create_dir(&out_dir)?;
    write_file(&out_dir.join("compare.csv"), &compare_csv(&table))?;
    write_file(&out_dir.join("compare.txt"), &compare_text(&table))?;
    Ok(table)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn csv_stat(s: Option<&Stat>) -> String {
    match s {
        None => ",".into(),
        Some(s) => format!("{},{}", s.mean, s.std.map(|v| v.to_string()).unwrap_or_default()),
    }
}

pub fn compare_csv(t: &CompareTable) -> String {
    let mut out = String::from("config,loss,seeds,accuracy_mean,accuracy_std");
    for level in &t.far_levels {
        out.push_str(&format!(",tar@far={level}_mean,tar@far={level}_std"));
    }
    out.push_str(",rank1_mean,rank1_std,map_mean,map_std,spearman_mean,spearman_std\n");
    for r in &t.rows {
        out.push_str(&format!("{},{},{},{}", r.config, csv_field(&r.loss), r.seeds.len(), csv_stat(Some(&r.accuracy))));
        for level in &t.far_levels {
            out.push_str(&format!(",{}", csv_stat(r.tar_at_far.get(level))));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            csv_stat(Some(&r.rank1)),
            csv_stat(Some(&r.map)),
            csv_stat(r.spearman.as_ref())
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') {
        format!("\"{s}\"")
    } else {
        s.to_string()
    }
}

fn text_stat(s: Option<&Stat>) -> String {
    match s {
        None => "-".into(),
        Some(Stat { mean, std: None, .. }) => format!("{mean:.4}"),
        Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.4} ± {sd:.4}"),
    }
}

pub fn compare_text(t: &CompareTable) -> String {
    let mut header = vec!["loss".to_string(), "seeds".into(), "accuracy".into()];
    header.extend(t.far_levels.iter().map(|l| format!("TAR@FAR={l}")));
    header.extend(["rank-1".into(), "mAP".into(), "spearman".into()]);
    let mut rows = vec![header];
    for r in &t.rows {
        let mut row = vec![r.loss.clone(), r.seeds.len().to_string(), text_stat(Some(&r.accuracy))];
        row.extend(t.far_levels.iter().map(|l| text_stat(r.tar_at_far.get(l))));
        row.extend([
            text_stat(Some(&r.rank1)),
            text_stat(Some(&r.map)),
            text_stat(r.spearman.as_ref()),
        ]);
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Runs the gradient suite. Fails with a runtime error if any component exceeds the tolerance.
pub fn cmd_gradcheck(out: Option<&Path>) -> Result<Vec<ComponentResult>, (Vec<ComponentResult>, CliError)> {
    let results = run_gradient_suite(DEFAULT_INSTANCES).map_err(|e| (Vec::new(), CliError::from_core(e)))?;
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&results).expect("results serialize");
        if let Err(e) = create_dir(dir).and_then(|_| write_file(&dir.join("gradcheck.json"), &(json + "\n"))) {
            return Err((results, e));
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        let msg = format!("gradient check above {TOLERANCE:e}: {}", failed.join(", "));
        Err((results, CliError::runtime(msg)))
    }
}

/// Overlays the ROC curves of the given `report.json` files into `roc.svg`.
pub fn cmd_plot(reports: &[PathBuf], out: Option<&Path>) -> Result<PathBuf, CliError> {
    if reports.is_empty() {
        return Err(CliError::validation("plot needs at least one report"));
    }
    let mut curves = Vec::new();
    for path in reports {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read report {}: {e}", path.display())))?;
        let file: ReportFile = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{} is not a report: {e}", path.display())))?;
        let points: Vec<(f64, f64)> = file.report.verification.roc.iter().map(|p| (p.far, p.tar)).collect();
        if points.is_empty() {
            return Err(CliError::validation(format!("{} has no ROC data", path.display())));
        }
        curves.push(Curve {
            label: file.loss,
            points,
        });
    }
    disambiguate(&mut curves, reports);
    let svg = roc_svg(&curves)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&dir)?;
    let path = dir.join("roc.svg");
    write_file(&path, &svg)?;
    Ok(path)
}

// Repeated labels get the report path appended.
fn disambiguate(curves: &mut [Curve], paths: &[PathBuf]) {
    let labels: Vec<String> = curves.iter().map(|c| c.label.clone()).collect();
    for (c, p) in curves.iter_mut().zip(paths) {
        if labels.iter().filter(|l| **l == c.label).count() > 1 {
            c.label = format!("{} ({})", c.label, p.display());
        }
    }
}
