//! Training on one damage type and scoring mixed sets.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cwt::{augment_set, SampleTensor};
use crate::eval::{self, Modality, Orientation, ScoreRecord, ScoreSet};
use crate::losses::LossKind;
use crate::models::{build_model, FusionConfig, Model};
use crate::nn::train::{train, Dataset, TrainConfig, TrainHistory};
use crate::nn::{checkpoint, Scalar};
use crate::pipeline::dataset::WindowSample;
use crate::{Error, Label, Result};

pub const DEFAULT_TRAIN_CATEGORY: &str = "dent";
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub model: FusionConfig,
    pub train: TrainConfig,
    /// The single damage category the autoencoder learns.
    pub train_category: String,
    /// Expand each training sample into its seven dihedral images.
    pub augment: bool,
    /// Share of training windows held out (before augmentation) for the
    /// minimum-validation-loss checkpoint.
    pub val_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            model: FusionConfig::default(),
            train: TrainConfig::default(),
            train_category: DEFAULT_TRAIN_CATEGORY.into(),
            augment: true,
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

impl TrainOptions {
    pub fn loss(&self) -> Result<LossKind> {
        self.train.loss.parse()
    }
}

fn expand(samples: &[&SampleTensor], augment: bool) -> Vec<SampleTensor> {
    if augment {
        samples.iter().flat_map(|s| augment_set(s)).collect()
    } else {
        samples.iter().map(|&s| s.clone()).collect()
    }
}

/// Damage windows of the trained category, split into training and
/// validation sets and augmented.
pub fn training_sets(samples: &[WindowSample], opts: &TrainOptions) -> Result<(Vec<SampleTensor>, Vec<SampleTensor>)> {
    let chosen: Vec<&SampleTensor> = samples
        .iter()
        .map(|s| &s.tensor)
        .filter(|t| t.label == Label::Damage && t.category == opts.train_category)
        .collect();
    if chosen.is_empty() {
        return Err(Error::invalid(format!("no '{}' damage windows to train on", opts.train_category)));
    }
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 1)", opts.val_fraction)));
    }
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.train.seed));
    let n_val = if chosen.len() >= 2 {
        ((chosen.len() as f64 * opts.val_fraction).ceil() as usize).min(chosen.len() - 1)
    } else {
        0
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| chosen[i]).collect::<Vec<_>>();
    let val = expand(&pick(&order[..n_val]), opts.augment);
    let train = expand(&pick(&order[n_val..]), opts.augment);
    Ok((train, val))
}

fn dataset<T: Scalar>(model: &Model<T>, samples: &[SampleTensor]) -> Result<Dataset<T>> {
    let refs: Vec<&SampleTensor> = samples.iter().collect();
    Dataset::autoencoding(model.batch_inputs(&refs)?)
}

/// Splits one labeled pool into training candidates and a test set: a
/// seeded `test_fraction` of the damage windows plus every background go to
/// the test set.
pub fn holdout_split(samples: &[WindowSample], test_fraction: f64, seed: u64) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut damage: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].tensor.label.is_damage()).collect();
    damage.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (damage.len() as f64 * test_fraction).round() as usize;
    let mut in_test = vec![true; samples.len()];
    for &i in &damage[n_test..] {
        in_test[i] = false;
    }
    let (test, train): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(in_test).partition(|(_, t)| *t);
    Ok((train.into_iter().map(|(s, _)| s).collect(), test.into_iter().map(|(s, _)| s).collect()))
}

/// Builds and trains the configured model on pre-split sets.
pub fn train_on(train_set: &[SampleTensor], val_set: &[SampleTensor], opts: &TrainOptions) -> Result<(Model, TrainHistory)> {
    let loss = opts.loss()?;
    let mut model = build_model::<f32>(&opts.model, opts.train.seed)?;
    let train_data = dataset(&model, train_set)?;
    let val_data = if val_set.is_empty() { None } else { Some(dataset(&model, val_set)?) };
    let objective = model.objective(loss);
    let history = train(&mut model.graph, &train_data, val_data.as_ref(), &opts.train, &objective)?;
    log::info!(
        "{}: best epoch {} loss {:.6}{}",
        model.id(),
        history.best_epoch,
        history.best_loss,
        history.diverged.as_deref().map(|d| format!(" (diverged: {d})")).unwrap_or_default()
    );
    Ok((model, history))
}

pub fn train_model(samples: &[WindowSample], opts: &TrainOptions) -> Result<(Model, TrainHistory)> {
    let (t, v) = training_sets(samples, opts)?;
    train_on(&t, &v, opts)
}

/// Per-sample reconstruction errors (one forward pass per sample) and the
/// wall-clock inference time of each, in milliseconds.
pub fn score(model: &Model, samples: &[WindowSample], loss: LossKind) -> Result<(ScoreSet, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut times = Vec::with_capacity(samples.len());
    for s in samples {
        let t0 = Instant::now();
        let out = model.reconstruct(&s.tensor, loss)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        records.push(ScoreRecord {
            id: s.id.clone(),
            score_acc: out.loss_acc,
            score_aud: out.loss_aud,
            label: s.tensor.label,
            category: s.tensor.category.clone(),
        });
    }
    Ok((ScoreSet { records }, times))
}

/// A ROC operating point; the leading `+inf` threshold is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpRow {
    pub category: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub auc: f64,
    /// Oriented-score threshold from the calibration backgrounds.
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
    pub fp_table: Vec<FpRow>,
    pub false_positives: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub loss_id: String,
    pub orientation: Orientation,
    pub positive_class: Label,
    pub percentile: f64,
    pub n_samples: usize,
    pub n_positive: usize,
    pub auc_acc: Option<f64>,
    pub auc_aud: Option<f64>,
    pub auc_best: f64,
    pub best_modality: Modality,
    pub modalities: BTreeMap<Modality, ModalityReport>,
    /// False positives of the best modality per background category.
    pub fp_table: Vec<FpRow>,
    pub param_count: usize,
    pub model_bytes: usize,
    /// NaN when read back from a report written without timing.
    #[serde(default = "not_measured")]
    pub mean_inference_ms: f64,
    #[serde(default = "not_measured")]
    pub std_inference_ms: f64,
}

fn not_measured() -> f64 {
    f64::NAN
}

/// Fields that vary between otherwise identical runs.
pub const TIMING_FIELDS: [&str; 2] = ["mean_inference_ms", "std_inference_ms"];

impl EvalReport {
    /// Sorted-key JSON; timing fields dropped unless `with_timing`.
    pub fn to_canonical_json(&self, with_timing: bool) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if !with_timing {
            if let Some(m) = v.as_object_mut() {
                for f in TIMING_FIELDS {
                    m.remove(f);
                }
            }
        }
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    /// `modality,threshold,fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("modality,threshold,fpr,tpr\n");
        for (m, r) in &self.modalities {
            for p in &r.roc {
                let t = p.threshold.map_or("inf".to_string(), |t| format!("{t:e}"));
                out.push_str(&format!("{m},{t},{},{}\n", p.fpr, p.tpr));
            }
        }
        out
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Oriented background scores of `set` for `m`.
pub fn background_scores(set: &ScoreSet, m: Modality, orientation: Orientation) -> Result<Vec<f64>> {
    let (scores, positive) = set.oriented(m, orientation, Label::Damage)?;
    let bg: Vec<f64> = scores.into_iter().zip(positive).filter(|(_, p)| !p).map(|(s, _)| s).collect();
    if bg.is_empty() {
        return Err(Error::invalid("no background samples to calibrate on"));
    }
    Ok(bg)
}

pub struct EvalSettings<'a> {
    pub loss: LossKind,
    pub orientation: Orientation,
    pub percentile: f64,
    /// Backgrounds for the thresholds; the test set's own when `None`.
    pub calibration: Option<&'a ScoreSet>,
}

impl Default for EvalSettings<'_> {
    fn default() -> Self {
        EvalSettings {
            loss: LossKind::Mse,
            orientation: Orientation::default(),
            percentile: eval::DEFAULT_PERCENTILE,
            calibration: None,
        }
    }
}

/// ROC, AUC, thresholds and false-positive tables for a scored test set.
pub fn build_report(model: &Model, set: &ScoreSet, times_ms: &[f64], settings: &EvalSettings<'_>) -> Result<EvalReport> {
    let positive = Label::Damage;
    let mut modalities = BTreeMap::new();
    for &m in model.modalities() {
        let (scores, labels) = set.oriented(m, settings.orientation, positive)?;
        let roc = eval::roc_curve(&scores, &labels)?;
        let calib = settings.calibration.unwrap_or(set);
        let threshold = eval::calibrate_threshold(&background_scores(calib, m, settings.orientation)?, settings.percentile)?;
        let fp_table: Vec<FpRow> = eval::fp_report(set, m, settings.orientation, threshold)?
            .into_iter()
            .map(|(category, count)| FpRow { category, count })
            .collect();
        let true_positives = scores.iter().zip(&labels).filter(|(&s, &l)| l && s > threshold).count();
        modalities.insert(
            m,
            ModalityReport {
                auc: roc.auc,
                threshold,
                roc: roc
                    .thresholds
                    .iter()
                    .zip(roc.fpr.iter().zip(&roc.tpr))
                    .map(|(&t, (&fpr, &tpr))| RocPoint {
                        threshold: t.is_finite().then_some(t),
                        fpr,
                        tpr,
                    })
                    .collect(),
                false_positives: fp_table.iter().map(|r| r.count).sum(),
                fp_table,
                true_positives,
            },
        );
    }
    // Ties go to acceleration, the first modality.
    let (&best_modality, best) = modalities
        .iter()
        .fold(None::<(&Modality, &ModalityReport)>, |acc, (m, r)| match acc {
            Some((_, b)) if b.auc >= r.auc => acc,
            _ => Some((m, r)),
        })
        .expect("every model has a modality");
    let auc_of = |m| modalities.get(&m).map(|r: &ModalityReport| r.auc);
    let (auc_acc, auc_aud) = (auc_of(Modality::Accel), auc_of(Modality::Audio));
    let auc_best = match (auc_acc, auc_aud) {
        (Some(a), Some(b)) => eval::max_strategy(a, b),
        (a, b) => a.or(b).expect("at least one modality"),
    };
    let (mean_inference_ms, std_inference_ms) = mean_std(times_ms);
    Ok(EvalReport {
        model_id: model.id().to_string(),
        loss_id: settings.loss.id().to_string(),
        orientation: settings.orientation,
        positive_class: positive,
        percentile: settings.percentile,
        n_samples: set.records.len(),
        n_positive: set.records.iter().filter(|r| r.label == positive).count(),
        auc_acc,
        auc_aud,
        auc_best,
        best_modality,
        fp_table: best.fp_table.clone(),
        modalities,
        param_count: model.param_count(),
        model_bytes: model_bytes(model)?,
        mean_inference_ms,
        std_inference_ms,
    })
}

/// Size of the serialized checkpoint.
pub fn model_bytes(model: &Model) -> Result<usize> {
    Ok(checkpoint::to_bytes(&model.graph, &checkpoint_metadata(model, None))?.len())
}

/// Metadata stored with every checkpoint: enough to rebuild the model.
pub fn checkpoint_metadata(model: &Model, options: Option<&TrainOptions>) -> serde_json::Value {
    serde_json::json!({
        "model": model.config,
        "train": options.map(|o| &o.train),
        "train_category": options.map(|o| &o.train_category),
    })
}

pub fn evaluate_model(model: &Model, samples: &[WindowSample], settings: &EvalSettings<'_>) -> Result<EvalReport> {
    let (set, times) = score(model, samples, settings.loss)?;
    build_report(model, &set, &times, settings)
}

pub fn save_model(path: &std::path::Path, model: &Model, options: Option<&TrainOptions>) -> Result<()> {
    checkpoint::save(path, &model.graph, &checkpoint_metadata(model, options))
}

/// The training loss recorded in checkpoint metadata; MSE when absent.
pub fn checkpoint_loss(meta: &serde_json::Value) -> Result<LossKind> {
    match meta.pointer("/train/loss").and_then(|v| v.as_str()) {
        Some(l) => l.parse(),
        None => Ok(LossKind::Mse),
    }
}

/// Loads a checkpoint and checks its graph against the stored config.
pub fn load_model(path: &std::path::Path) -> Result<(Model, serde_json::Value)> {
    let (graph, meta) = checkpoint::load::<f32>(path)?;
    let config: FusionConfig = serde_json::from_value(meta.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("{}: model config: {e}", path.display())))?;
    let (spec, layout) = crate::models::build_graph(&config)?;
    if &spec != graph.spec() {
        return Err(Error::Checkpoint(format!(
            "{}: graph does not match its {} config",
            path.display(),
            config.variant
        )));
    }
    Ok((Model { config, graph, layout }, meta))
}
