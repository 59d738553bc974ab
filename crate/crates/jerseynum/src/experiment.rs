//! Experiment orchestration: parse a TOML experiment spec, generate (or
//! reuse) its dataset, train every run over its seed list, score the test
//! split, and emit deterministic CSV/SVG artifacts.
//!
//! Three canned protocols mirror the reference evaluation: the
//! holistic / digit-wise / multi-task comparison, the 8-point loss-weight
//! ablation grid, and the backbone sweep at fixed weights.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::codec::ClassSet;
use crate::data::{
    imbalanced_counts, AugmentationPolicy, DataError, DatasetManifest, GeneratorParams,
    ImageStore, Split,
};
use crate::eval::{confusion, macro_metrics, predict_label, EvalError, MetricsReport, PredictionMode};
use crate::loss::{LossError, LossWeights};
use crate::model::{build_network, BackboneConfig, ModelError, Network};
use crate::tensor::Element;
use crate::trainer::{
    proportional_milestones, train, TrainConfig, TrainError, TrainingHistory,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec error: {0}")]
    Spec(String),
    #[error("run {run}: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Element type used for training tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

// ── Spec file sections ───────────────────────────────────────────────

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    dataset: DatasetSection,
    train: TrainSection,
    backbone: BackboneConfig,
    runs: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    /// Inclusive jersey-number range; null is always class 0 on top.
    number_range: (u8, u8),
    /// Count for the rarest class.
    min_count: usize,
    /// max/min class-count ratio; 1.0 means balanced.
    #[serde(default = "one")]
    imbalance_ratio: f64,
    /// Overrides the null class count (class 0 otherwise gets `min_count`).
    #[serde(default)]
    null_count: Option<usize>,
    /// Number of style seeds ("games"); seeds are 0..n.
    style_seeds: usize,
    split_ratios: (f64, f64, f64),
    master_seed: u64,
    /// Square render size in pixels.
    image_size: usize,
    #[serde(default)]
    max_occlusion: f64,
    #[serde(default)]
    max_blur_sigma: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    total_iterations: usize,
    batch_size: usize,
    #[serde(default = "default_lr")]
    base_lr: f64,
    #[serde(default = "default_decay")]
    lr_decay_factor: f64,
    #[serde(default)]
    lr_milestones: Option<Vec<usize>>,
    #[serde(default = "default_wd")]
    weight_decay: f64,
    validation_interval: usize,
    #[serde(default)]
    validation_cap: usize,
    #[serde(default = "default_hue")]
    hue_jitter_max: f64,
    #[serde(default = "default_precision")]
    precision: Precision,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.33
}
fn default_wd() -> f64 {
    1e-3
}
fn default_hue() -> f64 {
    0.4
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    loss_weights: (f64, f64, f64),
    seeds: Vec<u64>,
    #[serde(default)]
    mode: Option<PredictionMode>,
    #[serde(default)]
    backbone: Option<BackboneConfig>,
}

// ── Validated spec ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub weights: LossWeights,
    pub seeds: Vec<u64>,
    pub mode: PredictionMode,
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub classes: ClassSet,
    pub per_class_counts: Vec<usize>,
    pub style_seeds: Vec<u64>,
    pub split_ratios: (f64, f64, f64),
    pub master_seed: u64,
    pub generator: GeneratorParams,
    pub train: TrainConfig,
    pub precision: Precision,
    pub runs: Vec<RunSpec>,
}

/// The natural scoring mode for a weight setting: holistic-only runs score
/// the holistic head, digit-wise-only runs the digit heads, everything else
/// the multi-task default.
pub fn mode_for_weights(w: LossWeights) -> PredictionMode {
    if w.alpha() == 0.0 {
        PredictionMode::DigitWise
    } else if w.beta() == 0.0 && w.gamma() == 0.0 {
        PredictionMode::Holistic
    } else {
        PredictionMode::MultiTaskDefault
    }
}

/// Parses and fully validates an experiment spec file.
pub fn parse_spec(path: &Path) -> Result<ExperimentSpec, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Spec(format!("read {}: {e}", path.display())))?;
    parse_spec_str(&text)
}

pub fn parse_spec_str(text: &str) -> Result<ExperimentSpec, ExperimentError> {
    let file: SpecFile = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;

    let d = &file.dataset;
    let (lo, hi) = d.number_range;
    let classes = ClassSet::from_number_range(lo, hi)
        .map_err(|e| ExperimentError::Spec(format!("[dataset] number_range: {e}")))?;
    if d.min_count == 0 {
        return Err(ExperimentError::Spec("[dataset] min_count must be positive".into()));
    }
    if d.imbalance_ratio < 1.0 {
        return Err(ExperimentError::Spec(format!(
            "[dataset] imbalance_ratio {} must be >= 1",
            d.imbalance_ratio
        )));
    }
    let mut per_class_counts = imbalanced_counts(classes.len(), d.min_count, d.imbalance_ratio);
    if let Some(nc) = d.null_count {
        let max = *per_class_counts.iter().max().unwrap();
        if nc < d.min_count.min(1) || nc > max {
            return Err(ExperimentError::Spec(format!(
                "[dataset] null_count {nc} outside [{}, {max}]",
                d.min_count
            )));
        }
        per_class_counts[0] = nc;
    }
    let generator = GeneratorParams {
        image_size: (d.image_size, d.image_size),
        max_occlusion: d.max_occlusion,
        max_blur_sigma: d.max_blur_sigma,
    };

    let t = &file.train;
    let milestones = t
        .lr_milestones
        .clone()
        .unwrap_or_else(|| proportional_milestones(t.total_iterations));
    let augmentation = AugmentationPolicy::new(t.hue_jitter_max, false)
        .map_err(|e| ExperimentError::Spec(format!("[train] {e}")))?;
    let train_template = TrainConfig {
        total_iterations: t.total_iterations,
        batch_size: t.batch_size,
        base_lr: t.base_lr,
        lr_decay_factor: t.lr_decay_factor,
        lr_milestones: milestones,
        weight_decay: t.weight_decay,
        loss_weights: LossWeights::multitask_best(),
        seed: 0,
        validation_interval: t.validation_interval,
        validation_cap: t.validation_cap,
        augmentation,
        eval_mode: PredictionMode::MultiTaskDefault,
    };
    train_template
        .validate()
        .map_err(|e| ExperimentError::Spec(format!("[train] {e}")))?;

    file.backbone
        .validate()
        .map_err(|e| ExperimentError::Spec(format!("[backbone] {e}")))?;

    if file.runs.is_empty() {
        return Err(ExperimentError::Spec("no [runs.<name>] sections".into()));
    }
    let mut runs = Vec::with_capacity(file.runs.len());
    for (name, value) in &file.runs {
        let section: RunSection = value
            .clone()
            .try_into()
            .map_err(|e| ExperimentError::Spec(format!("[runs.{name}] {e}")))?;
        let weights = LossWeights::validate(
            section.loss_weights.0,
            section.loss_weights.1,
            section.loss_weights.2,
        )
        .map_err(|e| ExperimentError::Spec(format!("[runs.{name}] {e}")))?;
        if section.seeds.is_empty() {
            return Err(ExperimentError::Spec(format!(
                "[runs.{name}] seed list must not be empty"
            )));
        }
        let backbone = section.backbone.unwrap_or_else(|| file.backbone.clone());
        backbone
            .validate()
            .map_err(|e| ExperimentError::Spec(format!("[runs.{name}] {e}")))?;
        if backbone.input_size != generator.image_size {
            return Err(ExperimentError::Spec(format!(
                "[runs.{name}] backbone input {:?} does not match dataset image size {:?}",
                backbone.input_size, generator.image_size
            )));
        }
        runs.push(RunSpec {
            name: name.clone(),
            weights,
            seeds: section.seeds,
            mode: section.mode.unwrap_or_else(|| mode_for_weights(weights)),
            backbone,
        });
    }

    Ok(ExperimentSpec {
        classes,
        per_class_counts,
        style_seeds: (0..d.style_seeds as u64).collect(),
        split_ratios: d.split_ratios,
        master_seed: d.master_seed,
        generator,
        train: train_template,
        precision: t.precision,
        runs,
    })
}

/// Canonical TOML rendering of a validated spec; `parse_spec_str` of the
/// output round-trips to an equal value.
pub fn spec_to_toml(spec: &ExperimentSpec) -> String {
    let mut s = String::new();
    let d = &spec.generator;
    let last = spec.classes.labels().last().unwrap().as_number().unwrap();
    let first = spec.classes.label_at(1).unwrap().as_number().unwrap();
    writeln!(s, "[dataset]").unwrap();
    writeln!(s, "number_range = [{first}, {last}]").unwrap();
    writeln!(s, "min_count = {}", spec.per_class_counts.iter().min().unwrap()).unwrap();
    let max = *spec.per_class_counts.iter().max().unwrap() as f64;
    let min = *spec.per_class_counts.iter().min().unwrap() as f64;
    writeln!(s, "imbalance_ratio = {:.1}", max / min).unwrap();
    writeln!(s, "style_seeds = {}", spec.style_seeds.len()).unwrap();
    writeln!(
        s,
        "split_ratios = [{}, {}, {}]",
        spec.split_ratios.0, spec.split_ratios.1, spec.split_ratios.2
    )
    .unwrap();
    writeln!(s, "master_seed = {}", spec.master_seed).unwrap();
    writeln!(s, "image_size = {}", d.image_size.0).unwrap();
    writeln!(s, "max_occlusion = {}", d.max_occlusion).unwrap();
    writeln!(s, "max_blur_sigma = {}", d.max_blur_sigma).unwrap();
    let t = &spec.train;
    writeln!(s, "\n[train]").unwrap();
    writeln!(s, "total_iterations = {}", t.total_iterations).unwrap();
    writeln!(s, "batch_size = {}", t.batch_size).unwrap();
    writeln!(s, "base_lr = {}", t.base_lr).unwrap();
    writeln!(s, "lr_decay_factor = {}", t.lr_decay_factor).unwrap();
    writeln!(
        s,
        "lr_milestones = [{}]",
        t.lr_milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    )
    .unwrap();
    writeln!(s, "weight_decay = {}", t.weight_decay).unwrap();
    writeln!(s, "validation_interval = {}", t.validation_interval).unwrap();
    writeln!(s, "validation_cap = {}", t.validation_cap).unwrap();
    writeln!(s, "hue_jitter_max = {}", t.augmentation.hue_jitter_max()).unwrap();
    writeln!(s, "precision = \"{}\"", spec.precision.tag()).unwrap();

    let backbone_toml = |s: &mut String, b: &BackboneConfig| {
        writeln!(s, "input_size = [{}, {}]", b.input_size.0, b.input_size.1).unwrap();
        writeln!(
            s,
            "channels_per_stage = [{}]",
            b.channels_per_stage
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )
        .unwrap();
        writeln!(
            s,
            "blocks_per_stage = [{}]",
            b.blocks_per_stage
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )
        .unwrap();
        writeln!(s, "residual = {}", b.residual).unwrap();
        writeln!(s, "feature_dim = {}", b.feature_dim).unwrap();
    };
    writeln!(s, "\n[backbone]").unwrap();
    backbone_toml(&mut s, &spec.runs[0].backbone);

    for run in &spec.runs {
        writeln!(s, "\n[runs.{}]", run.name).unwrap();
        writeln!(
            s,
            "loss_weights = [{}, {}, {}]",
            run.weights.alpha(),
            run.weights.beta(),
            run.weights.gamma()
        )
        .unwrap();
        writeln!(
            s,
            "seeds = [{}]",
            run.seeds
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )
        .unwrap();
        writeln!(s, "mode = \"{}\"", mode_toml_tag(run.mode)).unwrap();
        writeln!(s, "\n[runs.{}.backbone]", run.name).unwrap();
        backbone_toml(&mut s, &run.backbone);
    }
    s
}

fn mode_toml_tag(mode: PredictionMode) -> &'static str {
    match mode {
        PredictionMode::Holistic => "holistic",
        PredictionMode::DigitWise => "digit-wise",
        PredictionMode::MultiTaskDefault => "multi-task-default",
        PredictionMode::Fused => "fused",
    }
}

// ── Results ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub weights: LossWeights,
    pub mode: PredictionMode,
    pub seeds: Vec<u64>,
    pub param_count: usize,
    pub accuracy: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl RunResult {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<RunResult>,
    pub manifest_sha256: String,
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run,alpha,beta,gamma,mode,seeds,param_count,\
             accuracy_mean,accuracy_std,precision_mean,precision_std,\
             recall_mean,recall_std,f1_mean,f1_std\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.name,
                r.weights.alpha(),
                r.weights.beta(),
                r.weights.gamma(),
                r.mode.tag(),
                r.seeds.len(),
                r.param_count,
                mean(&r.accuracy),
                std_dev(&r.accuracy),
                mean(&r.precision),
                std_dev(&r.precision),
                mean(&r.recall),
                std_dev(&r.recall),
                mean(&r.f1),
                std_dev(&r.f1),
            ));
        }
        s
    }

    /// Index of the row with the highest mean test accuracy; ties go to the
    /// earliest row.
    pub fn best_row_by_accuracy(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.mean_accuracy() > self.rows[best].mean_accuracy() {
                best = i;
            }
        }
        best
    }
}

// ── Execution ────────────────────────────────────────────────────────

/// Plans the dataset and renders its images under `out/dataset`, reusing an
/// existing identical manifest (images are a pure function of it).
pub fn ensure_dataset(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<(DatasetManifest, PathBuf), ExperimentError> {
    let dataset_dir = out_dir.join("dataset");
    std::fs::create_dir_all(&dataset_dir)?;
    let manifest = DatasetManifest::plan(
        &spec.classes,
        &spec.per_class_counts,
        &spec.style_seeds,
        spec.split_ratios,
        spec.master_seed,
        spec.generator.clone(),
    )?;
    let manifest_path = dataset_dir.join("manifest.txt");
    let reuse = manifest_path.exists()
        && DatasetManifest::load(&manifest_path)
            .map(|m| m == manifest)
            .unwrap_or(false);
    if !reuse {
        manifest.write_images(&dataset_dir)?;
        manifest.save(&manifest_path)?;
    }
    Ok((manifest, dataset_dir))
}

/// Full metrics of `mode` over one split.
pub fn evaluate_model<E: Element>(
    model: &Network<E>,
    store: &mut ImageStore,
    split: Split,
    mode: PredictionMode,
) -> Result<MetricsReport, ExperimentError> {
    let classes = model.classes().clone();
    let n = store.manifest().split_len(split);
    if n == 0 {
        return Err(ExperimentError::Spec(format!("empty split {}", split.tag())));
    }
    let split_records = store.manifest().split_indices(split);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut preds = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(64) {
        let (batch, _) =
            store.load_batch::<E>(split, chunk, &AugmentationPolicy::none(), &mut rng)?;
        for (pred, &i) in model.forward(&batch)?.iter().zip(chunk) {
            preds.push(predict_label(pred, mode, &classes));
            truths.push(store.manifest().records[split_records[i]].label);
        }
    }
    let cm = confusion(&preds, &truths, &classes)?;
    Ok(macro_metrics(&cm)?)
}

/// Output paths for one (run, seed) pair.
fn run_dir(out_dir: &Path, run: &str, seed: u64) -> PathBuf {
    out_dir.join("runs").join(run).join(format!("seed{seed}"))
}

fn train_one<E: Element>(
    spec: &ExperimentSpec,
    run: &RunSpec,
    seed: u64,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<(MetricsReport, TrainingHistory, usize), ExperimentError> {
    let model: Network<E> = build_network(run.backbone.clone(), spec.classes.clone(), seed)?;
    let param_count = model.param_count();
    let cfg = TrainConfig {
        loss_weights: run.weights,
        seed,
        eval_mode: run.mode,
        ..spec.train.clone()
    };
    let mut store = ImageStore::new(manifest, dataset_dir);
    store.preload(Split::Val)?;
    store.preload(Split::Test)?;
    let outcome = train(model, &mut store, &cfg)?;

    let metrics = evaluate_model(&outcome.best_model, &mut store, Split::Test, run.mode)?;

    let dir = run_dir(out_dir, &run.name, seed);
    std::fs::create_dir_all(&dir)?;
    outcome.best_model.save_checkpoint(
        &dir.join("checkpoint.bin"),
        outcome.best_iteration,
        Some((run.weights.alpha(), run.weights.beta(), run.weights.gamma())),
    )?;
    spec.classes.save(&dir.join("classes.txt"))?;
    std::fs::write(dir.join("history.csv"), outcome.history.to_csv())?;
    std::fs::write(
        dir.join("metrics.csv"),
        format!(
            "method,accuracy,precision,recall,f1\n{}\n",
            metrics.to_csv_row(&run.name)
        ),
    )?;
    std::fs::write(
        dir.join("meta.txt"),
        format!(
            "manifest_sha256={}\nbest_iteration={}\nbest_val_accuracy={:.6}\n",
            manifest.sha256(),
            outcome.best_iteration,
            outcome.best_val_accuracy
        ),
    )?;
    Ok((metrics, outcome.history, param_count))
}

/// Trains every run in the spec on the shared dataset and writes the
/// results table, per-run artifacts, and validation curves under `out_dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<ResultsTable, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    let (manifest, dataset_dir) = ensure_dataset(spec, out_dir)?;

    let mut rows = Vec::with_capacity(spec.runs.len());
    let mut first_histories = Vec::new();
    let mut names = Vec::new();
    for run in &spec.runs {
        let mut result = RunResult {
            name: run.name.clone(),
            weights: run.weights,
            mode: run.mode,
            seeds: run.seeds.clone(),
            param_count: 0,
            accuracy: Vec::new(),
            precision: Vec::new(),
            recall: Vec::new(),
            f1: Vec::new(),
        };
        for (si, &seed) in run.seeds.iter().enumerate() {
            let wrap = |e: ExperimentError| ExperimentError::Run {
                run: run.name.clone(),
                source: Box::new(e),
            };
            let (metrics, history, params) = match spec.precision {
                Precision::F32 => {
                    train_one::<f32>(spec, run, seed, &manifest, &dataset_dir, out_dir)
                        .map_err(wrap)?
                }
                Precision::F64 => {
                    train_one::<f64>(spec, run, seed, &manifest, &dataset_dir, out_dir)
                        .map_err(wrap)?
                }
            };
            result.param_count = params;
            result.accuracy.push(metrics.accuracy);
            result.precision.push(metrics.macro_precision);
            result.recall.push(metrics.macro_recall);
            result.f1.push(metrics.macro_f1);
            if si == 0 {
                first_histories.push(history);
                names.push(run.name.clone());
            }
        }
        rows.push(result);
    }

    let table = ResultsTable {
        rows,
        manifest_sha256: manifest.sha256(),
    };
    std::fs::write(out_dir.join("results.csv"), table.to_csv())?;
    std::fs::write(
        out_dir.join("experiment.txt"),
        format!(
            "manifest_sha256={}\nruns={}\nprecision={}\n",
            table.manifest_sha256,
            names.join(","),
            spec.precision.tag()
        ),
    )?;
    emit_curves(
        &first_histories,
        &names,
        &out_dir.join("curves.csv"),
        &out_dir.join("curves.svg"),
    )?;
    Ok(table)
}

/// The comparison weight settings, in table order.
pub const COMPARISON_WEIGHTS: [(f64, f64, f64); 3] =
    [(1.0, 0.0, 0.0), (0.0, 0.5, 0.5), (0.3, 0.35, 0.35)];

/// The 8-row loss-weight ablation grid, in table order. The 0.33 row is
/// exact thirds.
pub fn ablation_weights() -> Vec<(f64, f64, f64)> {
    vec![
        (1.0, 0.0, 0.0),
        (0.8, 0.1, 0.1),
        (0.5, 0.25, 0.25),
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
        (0.3, 0.35, 0.35),
        (0.2, 0.4, 0.4),
        (0.1, 0.45, 0.45),
        (0.0, 0.5, 0.5),
    ]
}

fn weights_close(a: LossWeights, b: (f64, f64, f64)) -> bool {
    (a.alpha() - b.0).abs() < 1e-9 && (a.beta() - b.1).abs() < 1e-9 && (a.gamma() - b.2).abs() < 1e-9
}

/// The three-setting comparison: holistic (1,0,0), digit-wise (0,0.5,0.5),
/// multi-task (0.3,0.35,0.35), each scored with its matching mode on the
/// shared dataset.
pub fn run_comparison(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<ResultsTable, ExperimentError> {
    if spec.runs.len() != 3 {
        return Err(ExperimentError::Spec(format!(
            "comparison needs exactly 3 runs, got {}",
            spec.runs.len()
        )));
    }
    for (run, &expected) in spec.runs.iter().zip(&COMPARISON_WEIGHTS) {
        if !weights_close(run.weights, expected) {
            return Err(ExperimentError::Spec(format!(
                "comparison run {} must use weights {expected:?}, got {}",
                run.name, run.weights
            )));
        }
        let want_mode = mode_for_weights(run.weights);
        if run.mode != want_mode {
            return Err(ExperimentError::Spec(format!(
                "comparison run {} must be scored with mode {}, got {}",
                run.name,
                want_mode.tag(),
                run.mode.tag()
            )));
        }
    }
    run_experiment(spec, out_dir)
}

/// The loss-weight ablation over the 8 canonical triples, emitting the
/// results table plus a `best.txt` naming the argmax row.
pub fn run_ablation(spec: &ExperimentSpec, out_dir: &Path) -> Result<ResultsTable, ExperimentError> {
    let grid = ablation_weights();
    if spec.runs.len() != grid.len() {
        return Err(ExperimentError::Spec(format!(
            "ablation needs exactly {} runs, got {}",
            grid.len(),
            spec.runs.len()
        )));
    }
    for (run, &expected) in spec.runs.iter().zip(&grid) {
        if !weights_close(run.weights, expected) {
            return Err(ExperimentError::Spec(format!(
                "ablation run {} must use weights {expected:?} (grid order), got {}",
                run.name, run.weights
            )));
        }
    }
    let table = run_experiment(spec, out_dir)?;
    let best = table.best_row_by_accuracy();
    std::fs::write(
        out_dir.join("best.txt"),
        format!(
            "best_run={}\nweights=({}, {}, {})\nmean_accuracy={:.6}\n",
            table.rows[best].name,
            table.rows[best].weights.alpha(),
            table.rows[best].weights.beta(),
            table.rows[best].weights.gamma(),
            table.rows[best].mean_accuracy()
        ),
    )?;
    Ok(table)
}

/// The backbone sweep: >= 2 configs of differing capacity, loss weights
/// fixed to (0.3, 0.35, 0.35).
pub fn run_backbone_sweep(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<ResultsTable, ExperimentError> {
    if spec.runs.len() < 2 {
        return Err(ExperimentError::Spec(format!(
            "backbone sweep needs at least 2 runs, got {}",
            spec.runs.len()
        )));
    }
    for run in &spec.runs {
        if !weights_close(run.weights, (0.3, 0.35, 0.35)) {
            return Err(ExperimentError::Spec(format!(
                "backbone sweep fixes weights to (0.3, 0.35, 0.35); run {} uses {}",
                run.name, run.weights
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for run in &spec.runs {
        if !seen.insert(format!("{:?}", run.backbone)) {
            return Err(ExperimentError::Spec(format!(
                "backbone sweep run {} repeats an earlier backbone config",
                run.name
            )));
        }
    }
    run_experiment(spec, out_dir)
}

// ── Curves ───────────────────────────────────────────────────────────

/// Writes validation-accuracy curves: a CSV with one accuracy column per
/// run, and an SVG line chart (one polyline per run, one point per
/// validation record).
pub fn emit_curves(
    histories: &[TrainingHistory],
    names: &[String],
    csv_path: &Path,
    svg_path: &Path,
) -> Result<(), ExperimentError> {
    if histories.is_empty() {
        return Err(ExperimentError::Spec("no histories to plot".into()));
    }
    if histories.len() != names.len() {
        return Err(ExperimentError::Spec(format!(
            "{} histories but {} names",
            histories.len(),
            names.len()
        )));
    }
    let grid: Vec<u64> = histories[0].records.iter().map(|r| r.iteration).collect();
    for (h, n) in histories.iter().zip(names) {
        let this: Vec<u64> = h.records.iter().map(|r| r.iteration).collect();
        if this != grid {
            return Err(ExperimentError::Spec(format!(
                "history for {n} has a different validation grid"
            )));
        }
    }

    let mut csv = String::from("iteration");
    for n in names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for (i, &it) in grid.iter().enumerate() {
        csv.push_str(&it.to_string());
        for h in histories {
            csv.push_str(&format!(",{:.6}", h.records[i].val_accuracy));
        }
        csv.push('\n');
    }
    std::fs::write(csv_path, csv)?;
    std::fs::write(svg_path, curves_svg(histories, names, &grid))?;
    Ok(())
}

const SVG_PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

fn curves_svg(histories: &[TrainingHistory], names: &[String], grid: &[u64]) -> String {
    let (width, height) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);
    let max_iter = *grid.last().unwrap_or(&1) as f64;
    let x = |it: f64| ml + pw * it / max_iter.max(1.0);
    let y = |acc: f64| mt + ph * (1.0 - acc);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    // Axes.
    writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph
    )
    .unwrap();
    writeln!(s, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, mt + ph).unwrap();
    // Y ticks every 0.2.
    for i in 0..=5 {
        let acc = i as f64 * 0.2;
        writeln!(
            s,
            r#"<line x1="{}" y1="{:.1}" x2="{ml}" y2="{:.1}" stroke="black"/><text x="{}" y="{:.1}" font-size="11" text-anchor="end">{:.1}</text>"#,
            ml - 4.0,
            y(acc),
            y(acc),
            ml - 7.0,
            y(acc) + 4.0,
            acc
        )
        .unwrap();
    }
    // X ticks at quarters.
    for i in 0..=4 {
        let it = max_iter * i as f64 / 4.0;
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{}" x2="{:.1}" y2="{}" stroke="black"/><text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            x(it),
            mt + ph,
            x(it),
            mt + ph + 4.0,
            x(it),
            mt + ph + 18.0,
            it.round() as u64
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">Iterations</text>"#,
        ml + pw / 2.0,
        height - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">Validation accuracy</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    )
    .unwrap();

    for (ci, (h, name)) in histories.iter().zip(names).enumerate() {
        let color = SVG_PALETTE[ci % SVG_PALETTE.len()];
        let points: Vec<String> = h
            .records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.iteration as f64), y(r.val_accuracy)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = mt + 16.0 + 16.0 * ci as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{name}</text>"#,
            ml + pw - 150.0,
            ml + pw - 125.0,
            ml + pw - 118.0,
            ly + 4.0
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossBreakdown;
    use crate::trainer::HistoryRecord;

    fn sample_spec_text() -> String {
        r#"
[dataset]
number_range = [1, 9]
min_count = 6
style_seeds = 18
split_ratios = [0.6, 0.2, 0.2]
master_seed = 5
image_size = 16

[train]
total_iterations = 20
batch_size = 4
validation_interval = 10

[backbone]
input_size = [16, 16]
channels_per_stage = [4, 8]
blocks_per_stage = [1, 1]
residual = true
feature_dim = 16

[runs.holistic]
loss_weights = [1.0, 0.0, 0.0]
seeds = [1]

[runs.digitwise]
loss_weights = [0.0, 0.5, 0.5]
seeds = [1]

[runs.multitask]
loss_weights = [0.3, 0.35, 0.35]
seeds = [1]
"#
        .to_string()
    }

    #[test]
    fn parse_sample_spec_and_derive_modes() {
        let spec = parse_spec_str(&sample_spec_text()).unwrap();
        assert_eq!(spec.runs.len(), 3);
        assert_eq!(spec.runs[0].name, "holistic");
        assert_eq!(spec.runs[0].mode, PredictionMode::Holistic);
        assert_eq!(spec.runs[1].mode, PredictionMode::DigitWise);
        assert_eq!(spec.runs[2].mode, PredictionMode::MultiTaskDefault);
        assert_eq!(spec.classes.len(), 10);
        assert_eq!(spec.train.lr_milestones, vec![4, 8, 12, 14]);
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = parse_spec_str(&sample_spec_text()).unwrap();
        let text = spec_to_toml(&spec);
        let back = parse_spec_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn bad_weight_sum_rejected() {
        let text = sample_spec_text().replace("[1.0, 0.0, 0.0]", "[0.6, 0.2, 0.1]");
        let err = parse_spec_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("holistic") && msg.contains("sum"), "{msg}");
    }

    #[test]
    fn missing_seeds_rejected_naming_run() {
        let text = sample_spec_text().replace("loss_weights = [0.0, 0.5, 0.5]\nseeds = [1]", "loss_weights = [0.0, 0.5, 0.5]\nseeds = []");
        let err = parse_spec_str(&text).unwrap_err();
        assert!(err.to_string().contains("digitwise"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = sample_spec_text().replace("master_seed = 5", "master_seed = 5\nbogus_key = 1");
        let err = parse_spec_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn mismatched_backbone_input_rejected() {
        let text = sample_spec_text().replace("input_size = [16, 16]", "input_size = [32, 32]");
        let err = parse_spec_str(&text).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn comparison_validates_weights_and_order() {
        let mut spec = parse_spec_str(&sample_spec_text()).unwrap();
        spec.runs.swap(0, 1);
        let dir = tempfile::tempdir().unwrap();
        let err = run_comparison(&spec, dir.path()).unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
    }

    #[test]
    fn best_row_ties_break_earliest() {
        let mk = |name: &str, acc: f64| RunResult {
            name: name.into(),
            weights: LossWeights::multitask_best(),
            mode: PredictionMode::MultiTaskDefault,
            seeds: vec![1],
            param_count: 10,
            accuracy: vec![acc],
            precision: vec![acc],
            recall: vec![acc],
            f1: vec![acc],
        };
        let table = ResultsTable {
            rows: vec![mk("a", 0.7), mk("b", 0.9), mk("c", 0.9), mk("d", 0.1)],
            manifest_sha256: "x".into(),
        };
        assert_eq!(table.best_row_by_accuracy(), 1);
    }

    fn fake_history(n: usize, base: f64) -> TrainingHistory {
        TrainingHistory {
            records: (1..=n)
                .map(|i| HistoryRecord {
                    iteration: (i * 10) as u64,
                    lr: 0.001,
                    loss: LossBreakdown {
                        holistic: 1.0,
                        digit1: 1.0,
                        digit2: 1.0,
                        digitwise: 0.7,
                        total: 1.0,
                    },
                    val_accuracy: base + 0.05 * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn curves_csv_and_svg_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let histories = vec![fake_history(5, 0.1), fake_history(5, 0.2), fake_history(5, 0.3)];
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let csv_path = dir.path().join("curves.csv");
        let svg_path = dir.path().join("curves.svg");
        emit_curves(&histories, &names, &csv_path, &svg_path).unwrap();

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iteration,a,b,c");
        assert_eq!(lines.clone().count(), 5);
        assert!(lines.all(|l| l.split(',').count() == 4));

        let svg = std::fs::read_to_string(&svg_path).unwrap();
        let polylines: Vec<&str> = svg.matches("<polyline").collect();
        assert_eq!(polylines.len(), 3);
        // Each polyline has exactly one x,y pair per history record.
        for segment in svg.split("<polyline").skip(1) {
            let points = segment.split("points=\"").nth(1).unwrap();
            let points = points.split('"').next().unwrap();
            assert_eq!(points.split_whitespace().count(), 5);
        }
        assert!(svg.contains("Iterations"));
        assert!(svg.contains("Validation accuracy"));
    }

    #[test]
    fn curves_reject_empty_and_mismatched() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_curves(
            &[],
            &[],
            &dir.path().join("a.csv"),
            &dir.path().join("a.svg"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("no histories"));

        let histories = vec![fake_history(5, 0.1), fake_history(4, 0.1)];
        let names = vec!["a".to_string(), "b".to_string()];
        let err = emit_curves(
            &histories,
            &names,
            &dir.path().join("b.csv"),
            &dir.path().join("b.svg"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("different validation grid"));
    }

    #[test]
    fn ablation_grid_matches_reference_rows() {
        let grid = ablation_weights();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid[0], (1.0, 0.0, 0.0));
        assert_eq!(grid[4], (0.3, 0.35, 0.35));
        assert_eq!(grid[7], (0.0, 0.5, 0.5));
        for &(a, b, g) in &grid {
            LossWeights::validate(a, b, g).unwrap();
        }
    }
}
