//! Experiment harness: configuration, task files, train-and-evaluate sweeps,
//! the noise sweep, result rows and per-category summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::{ExpertFamily, ExpertOptions};
use crate::lattice::{LatticeAction, LatticeShape};
use crate::mask::{action_mask, AttentionMask};
use crate::model::{Model, ModelConfig, Variant};
use crate::smoothing::SmoothingConfig;
use crate::taskgen::{generate_task, suite_specs, GridPool, Task, TaskSpec, PROTOCOL_TRAIN_PAIRS};
use crate::train::{evaluate, train, TrainConfig};

pub const DEFAULT_LADDER: [usize; 4] = [2, 8, 32, 128];
pub const DEFAULT_NOISE_LEVELS: [f64; 3] = [0.2, 0.4, 0.6];
pub const NOISE_TRAIN_PAIRS: usize = 32;
pub const TASKS_DIR: &str = "tasks";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const NOISE_FILE: &str = "noise.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Width of the model; the lattice and colour count are fixed by the task format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub dim: usize,
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        let base = ModelConfig::default();
        Self {
            dim: base.dim,
            ffn_hidden: base.ffn_hidden,
            seed: 0,
        }
    }
}

/// Training settings for harness runs, sized for desk-scale sweeps.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        lr: 1e-2,
        batch_size: 8,
        augmentations: 0,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite_seed: u64,
    /// Train-set sizes, strictly increasing, each at most 2048.
    pub ladder: Vec<usize>,
    pub test_size: usize,
    /// Task categories to run; empty means all.
    pub categories: Vec<ExpertFamily>,
    pub variants: Vec<Variant>,
    /// Expert stacks for the masked variants; empty uses the task's own category.
    pub experts: Vec<ExpertFamily>,
    pub expert_options: ExpertOptions,
    pub smoothing: SmoothingConfig,
    /// Embedding noise for train-eval runs.
    pub noise: f64,
    pub noise_levels: Vec<f64>,
    pub noise_train_size: usize,
    /// Variant used by the noise sweep.
    pub noise_variant: Variant,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite_seed: 0,
            ladder: DEFAULT_LADDER.to_vec(),
            test_size: 100,
            categories: Vec::new(),
            variants: Variant::ALL.to_vec(),
            experts: Vec::new(),
            expert_options: ExpertOptions::default(),
            smoothing: SmoothingConfig::default(),
            noise: 0.0,
            noise_levels: DEFAULT_NOISE_LEVELS.to_vec(),
            noise_train_size: NOISE_TRAIN_PAIRS,
            noise_variant: Variant::Latformer,
            model: ModelDims::default(),
            train: desk_train_config(),
            output_dir: PathBuf::from("runs"),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ladder.is_empty() {
            return bad("ladder is empty".into());
        }
        if self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ladder {:?} is not strictly increasing", self.ladder));
        }
        if self.ladder[0] == 0 || *self.ladder.last().expect("nonempty") > PROTOCOL_TRAIN_PAIRS {
            return bad(format!("ladder sizes must lie in 1..={PROTOCOL_TRAIN_PAIRS}"));
        }
        if self.test_size == 0 {
            return bad("test_size must be positive".into());
        }
        if self.variants.is_empty() {
            return bad("no model variants selected".into());
        }
        if self.noise_train_size == 0 || self.noise_train_size > PROTOCOL_TRAIN_PAIRS {
            return bad(format!("noise_train_size must lie in 1..={PROTOCOL_TRAIN_PAIRS}"));
        }
        for &w in self.noise_levels.iter().chain([&self.noise]) {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("noise level {w} outside [0, 1]"));
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.smoothing.validate()?;
        self.train.validate()?;
        self.model_config(ExpertFamily::Translate, Variant::Latformer, 0.0).validate()
    }

    /// Hex SHA-256 of the TOML form, without the output directory and the
    /// worker count.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output_dir: PathBuf::new(),
            jobs: 1,
            ..self.clone()
        };
        format!("{:x}", Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn model_config(&self, category: ExpertFamily, variant: Variant, noise: f64) -> ModelConfig {
        ModelConfig {
            dim: self.model.dim,
            ffn_hidden: self.model.ffn_hidden,
            variant,
            experts: if self.experts.is_empty() {
                vec![category]
            } else {
                self.experts.clone()
            },
            expert_options: self.expert_options.clone(),
            smoothing: self.smoothing.clone(),
            noise,
            ..ModelConfig::default()
        }
    }

    pub fn selects(&self, category: ExpertFamily) -> bool {
        self.categories.is_empty() || self.categories.contains(&category)
    }

    /// Suite specs of the selected categories.
    pub fn specs(&self) -> Vec<TaskSpec> {
        suite_specs(self.suite_seed)
            .into_iter()
            .filter(|s| self.selects(s.category))
            .collect()
    }

    pub fn max_train_size(&self) -> usize {
        self.ladder.last().copied().unwrap_or(0).max(self.noise_train_size)
    }
}

/// Provenance written next to generated tasks and results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub suite_seed: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub tasks: Vec<ManifestTask>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub category: ExpertFamily,
    pub action: String,
    pub seed: u64,
    pub file: String,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, specs: &[TaskSpec]) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            suite_seed: config.suite_seed,
            model_seed: config.model.seed,
            train_seed: config.train.seed,
            tasks: specs
                .iter()
                .map(|s| ManifestTask {
                    name: s.name.clone(),
                    category: s.category,
                    action: s.action.to_string(),
                    seed: s.seed,
                    file: format!("{TASKS_DIR}/{}.json", s.name),
                })
                .collect(),
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the selected suite and writes one JSON file per task plus the manifest.
pub fn generate_suite(config: &ExperimentConfig) -> Result<Vec<Task>> {
    let specs = config.specs();
    let dir = config.output_dir.join(TASKS_DIR);
    create_dir(&dir)?;
    let tasks: Vec<Task> = specs
        .iter()
        .map(|s| generate_task(s, config.max_train_size(), config.test_size, &GridPool::Procedural))
        .collect::<Result<_>>()?;
    for task in &tasks {
        task.save(&dir.join(format!("{}.json", task.name)))?;
    }
    write_file(
        &config.output_dir.join(MANIFEST_FILE),
        &Manifest::new(config, &specs).to_json(),
    )?;
    Ok(tasks)
}

/// Loads the selected tasks written by [`generate_suite`].
pub fn load_suite(config: &ExperimentConfig) -> Result<Vec<Task>> {
    let dir = config.output_dir.join(TASKS_DIR);
    config
        .specs()
        .iter()
        .map(|s| {
            let task = Task::load(&dir.join(format!("{}.json", s.name)))?;
            if task.train.len() < config.max_train_size() || task.test.len() < config.test_size {
                return Err(Error::Validation {
                    location: s.name.clone(),
                    message: format!(
                        "task file has {} train and {} test pairs, config needs {} and {}",
                        task.train.len(),
                        task.test.len(),
                        config.max_train_size(),
                        config.test_size
                    ),
                });
            }
            Ok(task)
        })
        .collect()
}

/// One trained-and-evaluated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub category: ExpertFamily,
    pub variant: Variant,
    pub train_size: usize,
    pub noise: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub solved: bool,
    pub wall_time_s: f64,
    /// Empty on success; the failure message otherwise.
    pub error: String,
}

/// A unit of work: one task at one size, variant and noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub task: usize,
    pub variant: Variant,
    pub train_size: usize,
    pub noise: f64,
}

/// Trains a fresh model on the first `train_size` pairs and scores the test pairs.
pub fn run_cell(config: &ExperimentConfig, task: &Task, cell: &Cell) -> ResultRow {
    let start = Instant::now();
    let outcome = (|| -> Result<(f64, bool)> {
        let model = Model::new(config.model_config(task.category, cell.variant, cell.noise))?;
        let mut params = model.init_params(config.model.seed)?;
        let pairs = task.train.get(..cell.train_size).ok_or_else(|| Error::Validation {
            location: task.name.clone(),
            message: format!("only {} train pairs for size {}", task.train.len(), cell.train_size),
        })?;
        train(&model, &mut params, pairs, &config.train).map_err(|e| e.error)?;
        let test = &task.test[..config.test_size.min(task.test.len())];
        let eval = evaluate(&model, &params, test)?;
        Ok((eval.accuracy(), eval.solved()))
    })();
    let (accuracy, solved, error) = match outcome {
        Ok((a, s)) => (a, s, String::new()),
        Err(e) => (0.0, false, e.to_string()),
    };
    ResultRow {
        task: task.name.clone(),
        category: task.category,
        variant: cell.variant,
        train_size: cell.train_size,
        noise: cell.noise,
        seed: config.train.seed,
        accuracy,
        solved,
        wall_time_s: start.elapsed().as_secs_f64(),
        error,
    }
}

/// Runs every cell on `config.jobs` workers; rows come back in cell order and
/// `progress` sees each row as it completes.
pub fn run_cells(
    config: &ExperimentConfig,
    tasks: &[Task],
    cells: &[Cell],
    mut progress: impl FnMut(&ResultRow),
) -> Vec<ResultRow> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut rows: Vec<Option<ResultRow>> = vec![None; cells.len()];
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(cells.len()).max(1) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let row = run_cell(config, &tasks[cell.task], cell);
                if tx.send((i, row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, row) in rx {
            progress(&row);
            rows[i] = Some(row);
        }
    });
    rows.into_iter().map(|r| r.expect("every cell reported")).collect()
}

/// Cells of the sample-efficiency sweep: every task × variant × ladder size.
pub fn train_eval_cells(config: &ExperimentConfig, tasks: &[Task]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if !config.selects(task.category) {
            continue;
        }
        for &variant in &config.variants {
            for &train_size in &config.ladder {
                cells.push(Cell {
                    task: t,
                    variant,
                    train_size,
                    noise: config.noise,
                });
            }
        }
    }
    cells
}

/// Cells of the noise sweep: every task × noise level at the noise train size.
pub fn noise_cells(config: &ExperimentConfig, tasks: &[Task]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if !config.selects(task.category) {
            continue;
        }
        for &noise in &config.noise_levels {
            cells.push(Cell {
                task: t,
                variant: config.noise_variant,
                train_size: config.noise_train_size,
                noise,
            });
        }
    }
    cells
}

/// Appends rows to a CSV file, writing the header when the file is new.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                column: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Mean and spread of one (category, variant, size, noise) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub category: ExpertFamily,
    pub variant: Variant,
    pub train_size: usize,
    pub noise: f64,
    pub tasks: usize,
    pub solved: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation across tasks.
    pub std_accuracy: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(ExpertFamily, usize, usize, u64), Vec<&ResultRow>> = BTreeMap::new();
    let order = |v: Variant| Variant::ALL.iter().position(|&x| x == v).unwrap_or(0);
    for row in rows {
        groups
            .entry((row.category, order(row.variant), row.train_size, row.noise.to_bits()))
            .or_default()
            .push(row);
    }
    groups
        .into_values()
        .map(|group| {
            let n = group.len() as f64;
            let mean = group.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let var = group.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                category: group[0].category,
                variant: group[0].variant,
                train_size: group[0].train_size,
                noise: group[0].noise,
                tasks: group.len(),
                solved: group.iter().filter(|r| r.solved).count(),
                failed: group.iter().filter(|r| !r.error.is_empty()).count(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[SummaryRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in summary {
        writer
            .serialize(row)
            .map_err(|e| Error::Config(format!("summary: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Config(format!("summary: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Trains and evaluates the ladder sweep, appending to `results.csv` and
/// rewriting the manifest.
pub fn train_eval(config: &ExperimentConfig, tasks: &[Task], progress: impl FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    sweep(config, tasks, &train_eval_cells(config, tasks), RESULTS_FILE, progress)
}

/// The noise sweep, appending to `noise.csv`.
pub fn noise_sweep(config: &ExperimentConfig, tasks: &[Task], progress: impl FnMut(&ResultRow)) -> Result<Vec<ResultRow>> {
    sweep(config, tasks, &noise_cells(config, tasks), NOISE_FILE, progress)
}

fn sweep(
    config: &ExperimentConfig,
    tasks: &[Task],
    cells: &[Cell],
    file: &str,
    progress: impl FnMut(&ResultRow),
) -> Result<Vec<ResultRow>> {
    create_dir(&config.output_dir)?;
    let rows = run_cells(config, tasks, cells, progress);
    append_rows(&config.output_dir.join(file), &rows)?;
    let specs: Vec<TaskSpec> = tasks.iter().map(Task::spec).collect();
    write_file(
        &config.output_dir.join(MANIFEST_FILE),
        &Manifest::new(config, &specs).to_json(),
    )?;
    Ok(rows)
}

/// Reads every results file present in the output directory and writes `summary.csv`.
pub fn report(output_dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut found = false;
    for file in [RESULTS_FILE, NOISE_FILE] {
        let path = output_dir.join(file);
        if path.exists() {
            found = true;
            rows.extend(read_rows(&path)?);
        }
    }
    if !found {
        return Err(Error::io(
            output_dir.join(RESULTS_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no results to report"),
        ));
    }
    let summary = summarize(&rows);
    write_file(&output_dir.join(SUMMARY_FILE), &summary_csv(&summary)?)?;
    Ok(summary)
}

/// Plain-text graymap, white for 1 and black for 0.
pub fn mask_pgm(mask: &AttentionMask) -> String {
    let m = mask.matrix();
    let mut out = format!("P2\n{} {}\n255\n", m.cols(), m.rows());
    for i in 0..m.rows() {
        let row: Vec<String> = m
            .row(i)
            .iter()
            .map(|v| ((v * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn mask_json(mask: &AttentionMask, action: &LatticeAction, shape: &LatticeShape) -> String {
    let m = mask.matrix();
    let rows: Vec<&[f64]> = (0..m.rows()).map(|i| m.row(i)).collect();
    let value = serde_json::json!({
        "action": action.to_string(),
        "shape": shape.dims(),
        "mask": rows,
    });
    serde_json::to_string(&value).expect("mask serializes") + "\n"
}

/// Writes the exact mask of `action` as a `.pgm` graymap or `.json` matrix,
/// chosen by the file extension.
pub fn write_mask(action: &LatticeAction, shape: &LatticeShape, path: &Path) -> Result<AttentionMask> {
    let mask = action_mask(action, shape)?;
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => mask_pgm(&mask),
        Some("json") => mask_json(&mask, action, shape),
        _ => {
            return Err(Error::Config(format!(
                "{}: mask output must end in .pgm or .json",
                path.display()
            )))
        }
    };
    write_file(path, &text)?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(category: ExpertFamily, accuracy: f64) -> ResultRow {
        ResultRow {
            task: "t".into(),
            category,
            variant: Variant::Latformer,
            train_size: 8,
            noise: 0.0,
            seed: 0,
            accuracy,
            solved: accuracy == 1.0,
            wall_time_s: 0.0,
            error: String::new(),
        }
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        let text = ok.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ok);
        for bad in [
            "ladder = [8, 8]",
            "ladder = [2, 4096]",
            "ladder = []",
            "noise_levels = [1.5]",
            "jobs = 0",
            "unknown_key = 1",
            "[train]\nlr = -1.0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
        let partial = ExperimentConfig::from_toml("suite_seed = 7\n[model]\ndim = 16").unwrap();
        assert_eq!(partial.suite_seed, 7);
        assert_eq!(partial.model.dim, 16);
        assert_eq!(partial.ladder, DEFAULT_LADDER);
        assert_ne!(partial.hash(), ok.hash());
        let moved = ExperimentConfig {
            output_dir: "elsewhere".into(),
            jobs: 4,
            ..ok.clone()
        };
        assert_eq!(moved.hash(), ok.hash());
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![
            row(ExpertFamily::Rotate, 1.0),
            row(ExpertFamily::Rotate, 0.5),
            row(ExpertFamily::Translate, 0.25),
        ];
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].category, ExpertFamily::Translate);
        let rot = &summary[1];
        assert_eq!((rot.tasks, rot.solved), (2, 1));
        assert!((rot.mean_accuracy - 0.75).abs() < 1e-12);
        assert!((rot.std_accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_solved() {
        let eval = crate::train::Evaluation { correct: 100, total: 100 };
        assert_eq!(eval.accuracy(), 1.0);
        assert!(eval.solved());
        let eval = crate::train::Evaluation { correct: 99, total: 100 };
        assert!(!eval.solved());
    }

    #[test]
    fn graymap_layout() {
        let mask = action_mask(&LatticeAction::translate([1]), &LatticeShape::line(3).unwrap()).unwrap();
        assert_eq!(mask_pgm(&mask), "P2\n3 3\n255\n0 0 255\n255 0 0\n0 255 0\n");
    }

    #[test]
    fn cell_layout() {
        let config = ExperimentConfig {
            categories: vec![ExpertFamily::Rotate],
            ..ExperimentConfig::default()
        };
        let specs = config.specs();
        assert_eq!(specs.len(), 3);
        let tasks: Vec<Task> = specs
            .iter()
            .map(|s| generate_task(s, 2, 1, &GridPool::Procedural).unwrap())
            .collect();
        assert_eq!(train_eval_cells(&config, &tasks).len(), 3 * 3 * DEFAULT_LADDER.len());
        let noise = noise_cells(&config, &tasks);
        assert_eq!(noise.len(), 9);
        assert_eq!(
            noise.iter().map(|c| c.noise).take(3).collect::<Vec<_>>(),
            DEFAULT_NOISE_LEVELS
        );
    }
}
