//! Training loop (Adam, step-decay learning rate), checkpoints and corpus
//! evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError};
use crate::datamodel::{argmax_labels, CaseRecord, IntensityUnit, LabelMap, ProbabilityMap};
use crate::losses::{self, LossConfig, LossError, LossValue};
use crate::metrics::{self, Hd95, MetricError, MetricReport};
use crate::network::{self, Network, NetworkError};
use crate::nn::{Parameterized, Tensor};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid train config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("case `{0}` has no labels")]
    Unlabelled(String),
    #[error("training cases must share one shape; `{id}` is {found:?}, expected {expected:?}")]
    ShapeMismatch {
        id: String,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("non-finite loss at epoch {epoch}, step {step}; last finite checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn default_initial_lr() -> f64 {
    1e-3
}
fn default_decay_factor() -> f64 {
    10.0
}
fn default_decay_every() -> usize {
    50
}
fn default_lr_floor() -> f64 {
    1e-5
}
fn default_batch_size() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every_epochs: usize,
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimisation steps, even mid-epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(max_epochs: usize, seed: u64, loss: LossConfig) -> Self {
        TrainConfig {
            initial_lr: default_initial_lr(),
            decay_factor: default_decay_factor(),
            decay_every_epochs: default_decay_every(),
            lr_floor: default_lr_floor(),
            batch_size: default_batch_size(),
            max_epochs,
            max_steps: None,
            seed,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: String| Err(EngineError::InvalidConfig { field, message });
        if !(self.lr_floor.is_finite() && self.lr_floor > 0.0) {
            return bad("lr_floor", format!("must be > 0, got {}", self.lr_floor));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr >= self.lr_floor) {
            return bad(
                "initial_lr",
                format!("must be >= lr_floor ({}), got {}", self.lr_floor, self.initial_lr),
            );
        }
        if !(self.decay_factor.is_finite() && self.decay_factor >= 1.0) {
            return bad("decay_factor", format!("must be >= 1, got {}", self.decay_factor));
        }
        if self.decay_every_epochs == 0 {
            return bad("decay_every_epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        Ok(())
    }
}

/// `max(initial_lr / decay_factor^floor(epoch / decay_every), lr_floor)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every_epochs) as i32;
    (cfg.initial_lr / cfg.decay_factor.powi(k)).max(cfg.lr_floor)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one buffer per parameter tensor in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &impl Parameterized) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| m.push(vec![0.0; p.len()]));
        Adam {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update(&mut self, model: &mut impl Parameterized, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for k in 0..p.value.len() {
                let g = p.grad[k] as f64;
                let mk = ADAM_BETA1 * m[k] as f64 + (1.0 - ADAM_BETA1) * g;
                let vk = ADAM_BETA2 * v[k] as f64 + (1.0 - ADAM_BETA2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
                p.value[k] = (p.value[k] as f64 - update) as f32;
            }
            i += 1;
        });
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for buf in self.m.iter().chain(&self.v) {
            for x in buf {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> bool {
        let total: usize = self.m.iter().map(Vec::len).sum::<usize>() * 2;
        if bytes.len() != total * 4 {
            return false;
        }
        let mut it = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in buf.iter_mut() {
                *x = it.next().expect("length checked");
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over the epoch's batches.
    pub train_loss: LossValue,
    #[serde(default)]
    pub val_mean_dsc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoints {
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
    #[serde(rename = "final")]
    pub final_: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Checkpoints,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serialises") + "\n")
            .collect()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }
}

/// Extra knobs that do not affect the numerical result.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory receiving `best/`, `last/`, `final/` and `log.jsonl`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint (normally `<dir>/last`) to continue from.
    pub resume_from: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

const OPTIMIZER_FILE: &str = "optimizer.bin";
const STATE_FILE: &str = "train_state.json";
const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    next_epoch: usize,
    adam_step: u64,
    steps: usize,
    best_score: Option<f64>,
    log: TrainLog,
}

fn save_checkpoint(dir: &Path, net: &Network, adam: &Adam, state: &TrainState, shape: [usize; 3]) -> Result<()> {
    net.save_weights(dir, Some(shape))?;
    let opt = dir.join(OPTIMIZER_FILE);
    fs::write(&opt, adam.to_bytes()).map_err(io_err(&opt))?;
    let st = dir.join(STATE_FILE);
    let text = serde_json::to_string_pretty(state).expect("state serialises");
    fs::write(&st, text + "\n").map_err(io_err(&st))
}

fn load_checkpoint(dir: &Path) -> Result<(Network, Adam, TrainState)> {
    let (net, _) = Network::load_checkpoint(dir)?;
    let mut adam = Adam::new(&net);
    let opt = dir.join(OPTIMIZER_FILE);
    let bytes = fs::read(&opt).map_err(io_err(&opt))?;
    if !adam.load_bytes(&bytes) {
        return Err(EngineError::Checkpoint {
            path: opt.display().to_string(),
            message: "optimizer state does not match the model".into(),
        });
    }
    let st = dir.join(STATE_FILE);
    let text = fs::read_to_string(&st).map_err(io_err(&st))?;
    let state: TrainState = serde_json::from_str(&text).map_err(|e| EngineError::Checkpoint {
        path: st.display().to_string(),
        message: e.to_string(),
    })?;
    adam.step = state.adam_step;
    Ok((net, adam, state))
}

/// One-hot `(n, C, z, y, x)` target for a batch of label maps.
pub fn one_hot_batch(labels: &[&LabelMap], num_classes: usize) -> Array5<f64> {
    let [z, y, x] = labels[0].shape();
    let mut out = Array5::<f64>::zeros((labels.len(), num_classes, z, y, x));
    for (b, l) in labels.iter().enumerate() {
        for ((k, j, i), &c) in l.data().indexed_iter() {
            out[[b, c as usize, k, j, i]] = 1.0;
        }
    }
    out
}

/// Loss and parameter gradients for one batch. Gradients are zeroed first.
pub fn compute_gradients(net: &mut Network, cases: &[&CaseRecord], loss: &LossConfig) -> Result<LossValue> {
    let volumes: Vec<_> = cases.iter().map(|c| c.volume().clone()).collect();
    let x = network::stack_volumes(&volumes)?;
    let labels: Vec<&LabelMap> = cases
        .iter()
        .map(|c| c.labels().ok_or_else(|| EngineError::Unlabelled(c.id.clone())))
        .collect::<Result<_>>()?;
    let target = one_hot_batch(&labels, net.config().num_classes);
    let (logits, cache) = net.forward_train(&x)?;
    let (value, grad) = losses::combined_loss_from_logits(logits.mapv(f64::from).view(), target.view(), loss)?;
    net.zero_grad();
    if value.total.is_finite() {
        let grad: Tensor = grad.mapv(|g| g as f32);
        net.backward(cache, &grad);
    }
    Ok(value)
}

/// Batch loss without touching gradients.
pub fn batch_loss(net: &Network, cases: &[&CaseRecord], loss: &LossConfig) -> Result<LossValue> {
    let volumes: Vec<_> = cases.iter().map(|c| c.volume().clone()).collect();
    let x = network::stack_volumes(&volumes)?;
    let labels: Vec<&LabelMap> = cases
        .iter()
        .map(|c| c.labels().ok_or_else(|| EngineError::Unlabelled(c.id.clone())))
        .collect::<Result<_>>()?;
    let target = one_hot_batch(&labels, net.config().num_classes);
    let logits = net.logits(&x)?;
    let probs = losses::softmax(logits.mapv(f64::from).view());
    Ok(losses::combined_loss(probs.view(), target.view(), loss)?)
}

fn check_training_set(cases: &[CaseRecord]) -> Result<[usize; 3]> {
    let first = cases.first().ok_or(EngineError::EmptyCorpus)?;
    let shape = first.volume().shape();
    for c in cases {
        if c.labels().is_none() {
            return Err(EngineError::Unlabelled(c.id.clone()));
        }
        if c.volume().shape() != shape {
            return Err(EngineError::ShapeMismatch {
                id: c.id.clone(),
                expected: shape,
                found: c.volume().shape(),
            });
        }
    }
    Network::check_input_shape(shape)?;
    Ok(shape)
}

/// Mean foreground DSC over `cases`, predicted at their stored resolution.
pub fn mean_dsc(net: &Network, cases: &[CaseRecord]) -> Result<f64> {
    let mut total = 0.0;
    for case in cases {
        let pred = predict_labels(net, case)?;
        let gt = case.labels().ok_or_else(|| EngineError::Unlabelled(case.id.clone()))?;
        total += metrics::evaluate_case(&pred, gt, gt.spacing())?.mean_dsc;
    }
    Ok(total / cases.len() as f64)
}

fn predict_labels(net: &Network, case: &CaseRecord) -> Result<LabelMap> {
    let probs = net.forward(std::slice::from_ref(case.volume()))?;
    Ok(argmax_labels(&probs[0]))
}

/// Order of training cases in `epoch`: a shuffle seeded by `(seed, epoch)`,
/// so any epoch can be replayed on its own.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Train `net` on preprocessed, same-shaped cases.
///
/// Checkpoints (weights, optimiser state, log) are written after every
/// epoch to `last/`, to `best/` when validation DSC improves (training loss
/// when there is no validation set) and to `final/` at the end.
pub fn train(
    net: Network,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    cfg.loss.validate(net.config().num_classes)?;
    let shape = check_training_set(train_cases)?;
    if !val_cases.is_empty() {
        check_training_set(val_cases)?;
    }

    let (mut net, mut adam, mut state) = match &opts.resume_from {
        Some(dir) => {
            let (loaded, adam, state) = load_checkpoint(dir)?;
            if loaded.config() != net.config() {
                return Err(EngineError::Checkpoint {
                    path: dir.display().to_string(),
                    message: "checkpoint config differs from the model being trained".into(),
                });
            }
            (loaded, adam, state)
        }
        None => {
            let adam = Adam::new(&net);
            (
                net,
                adam,
                TrainState {
                    next_epoch: 0,
                    adam_step: 0,
                    steps: 0,
                    best_score: None,
                    log: TrainLog::default(),
                },
            )
        }
    };

    let dir = opts.checkpoint_dir.clone();
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in state.next_epoch..cfg.max_epochs {
        if state.steps >= max_steps {
            break;
        }
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(train_cases.len(), cfg.seed, epoch);
        let mut sum = LossValue {
            total: 0.0,
            focal: 0.0,
            dice: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if state.steps >= max_steps {
                break;
            }
            let batch: Vec<&CaseRecord> = chunk.iter().map(|&i| &train_cases[i]).collect();
            let value = compute_gradients(&mut net, &batch, &cfg.loss)?;
            if !value.total.is_finite() {
                return Err(EngineError::Diverged {
                    epoch,
                    step: state.steps,
                    last_checkpoint: state.log.checkpoints.last.clone(),
                });
            }
            adam.update(&mut net, lr);
            state.steps += 1;
            batches += 1;
            sum.total += value.total;
            sum.focal += value.focal;
            sum.dice += value.dice;
        }
        let k = batches.max(1) as f64;
        let val_mean_dsc = if val_cases.is_empty() {
            None
        } else {
            Some(mean_dsc(&net, val_cases)?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            steps: batches,
            train_loss: LossValue {
                total: sum.total / k,
                focal: sum.focal / k,
                dice: sum.dice / k,
            },
            val_mean_dsc,
        };
        log::info!(
            "epoch {epoch} lr {lr:.1e} loss {:.5} (focal {:.5}, dice {:.5}) val dsc {}",
            record.train_loss.total,
            record.train_loss.focal,
            record.train_loss.dice,
            val_mean_dsc.map_or("-".into(), |d| format!("{d:.4}"))
        );
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        // higher is better
        let score = val_mean_dsc.unwrap_or(-record.train_loss.total);
        let improved = state.best_score.is_none_or(|b| score > b);
        if improved {
            state.best_score = Some(score);
        }
        state.log.epochs.push(record);
        state.next_epoch = epoch + 1;
        state.adam_step = adam.step;
        if let Some(d) = &dir {
            let last = d.join("last");
            state.log.checkpoints.last = Some(last.clone());
            if improved {
                state.log.checkpoints.best = Some(d.join("best"));
            }
            save_checkpoint(&last, &net, &adam, &state, shape)?;
            if improved {
                save_checkpoint(&d.join("best"), &net, &adam, &state, shape)?;
            }
            let log_path = d.join(LOG_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(io_err(&log_path))?;
            let line = serde_json::to_string(state.log.epochs.last().expect("just pushed")).expect("record serialises");
            writeln!(f, "{line}").map_err(io_err(&log_path))?;
        }
    }
    if let Some(d) = &dir {
        let fin = d.join("final");
        state.log.checkpoints.final_ = Some(fin.clone());
        save_checkpoint(&fin, &net, &adam, &state, shape)?;
    }
    Ok((net, state.log))
}

/// Anything that turns a case into a label map at the case's own geometry.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn segment(&self, case: &CaseRecord) -> Result<LabelMap>;
}

/// Network inference at a fixed input shape: normalise, resize, forward,
/// argmax, resize back.
pub struct NetworkSegmenter {
    pub net: Network,
    pub input_shape: [usize; 3],
}

impl NetworkSegmenter {
    pub fn new(net: Network, input_shape: [usize; 3]) -> Result<Self> {
        Network::check_input_shape(input_shape)?;
        Ok(NetworkSegmenter { net, input_shape })
    }

    pub fn probabilities(&self, case: &CaseRecord) -> Result<ProbabilityMap> {
        let volume = match case.volume().unit() {
            IntensityUnit::Hu => data::normalize_intensity(case.volume()),
            IntensityUnit::Normalized => case.volume().clone(),
        };
        let resized = data::resize_volume(&volume, self.input_shape)?;
        Ok(self.net.forward(std::slice::from_ref(&resized))?.remove(0))
    }
}

impl Segmenter for NetworkSegmenter {
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    fn segment(&self, case: &CaseRecord) -> Result<LabelMap> {
        let labels = argmax_labels(&self.probabilities(case)?);
        let back = data::resize_labels(&labels, case.volume().shape())?;
        Ok(LabelMap::new(back.data().clone(), back.num_classes(), case.volume().spacing()).expect("valid labels"))
    }
}

/// Returns the ground truth; useful to check evaluation plumbing.
pub struct OracleSegmenter {
    pub num_classes: usize,
}

impl Segmenter for OracleSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, case: &CaseRecord) -> Result<LabelMap> {
        case.labels().cloned().ok_or_else(|| EngineError::Unlabelled(case.id.clone()))
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class_id: usize,
    /// Over cases where the class is present in prediction or ground truth.
    pub dsc: Option<MeanStd>,
    /// Over cases with a defined HD95.
    pub hd95: Option<MeanStd>,
    pub undefined_hd95: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub num_classes: usize,
    pub cases: Vec<CaseReport>,
    pub per_class: Vec<ClassAggregate>,
    /// Over per-case mean DSC.
    pub mean_dsc: MeanStd,
    /// Over per-case mean HD95 (cases with at least one defined value).
    pub mean_hd95: Option<MeanStd>,
}

impl CorpusReport {
    pub fn from_cases(num_classes: usize, cases: Vec<CaseReport>) -> Result<Self> {
        if cases.is_empty() {
            return Err(EngineError::EmptyCorpus);
        }
        let per_class = (1..num_classes)
            .map(|c| {
                let entries: Vec<_> = cases.iter().filter_map(|r| r.report.class(c)).collect();
                let dsc: Vec<f64> = entries.iter().map(|m| m.dsc).collect();
                let hd: Vec<f64> = entries.iter().filter_map(|m| m.hd95.value()).collect();
                ClassAggregate {
                    class_id: c,
                    dsc: MeanStd::of(&dsc),
                    hd95: MeanStd::of(&hd),
                    undefined_hd95: entries.iter().filter(|m| m.hd95 == Hd95::Undefined).count(),
                }
            })
            .collect();
        let dsc: Vec<f64> = cases.iter().map(|r| r.report.mean_dsc).collect();
        let hd: Vec<f64> = cases.iter().filter_map(|r| r.report.mean_hd95.value()).collect();
        Ok(CorpusReport {
            num_classes,
            mean_dsc: MeanStd::of(&dsc).expect("non-empty"),
            mean_hd95: MeanStd::of(&hd),
            per_class,
            cases,
        })
    }

    /// Per-case mean DSC in case order, for paired comparisons.
    pub fn case_dsc(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.report.mean_dsc).collect()
    }
}

/// Segment and score every labelled case at its original geometry.
pub fn evaluate_corpus(segmenter: &dyn Segmenter, cases: &[CaseRecord]) -> Result<CorpusReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let gt = case.labels().ok_or_else(|| EngineError::Unlabelled(case.id.clone()))?;
        let pred = segmenter.segment(case)?;
        let report = metrics::evaluate_case(&pred, gt, case.volume().spacing())?;
        reports.push(CaseReport {
            id: case.id.clone(),
            report,
        });
    }
    CorpusReport::from_cases(segmenter.num_classes(), reports)
}

/// Slice of a batch tensor as an owned single-sample tensor.
pub fn sample(x: &Tensor, i: usize) -> Tensor {
    x.slice(s![i..i + 1, .., .., .., ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phantom_corpus, preprocess_corpus, PhantomSpec};
    use crate::network::{NetworkConfig, NetworkVariant};

    fn cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig::new(max_epochs, 3, LossConfig::with_alpha(vec![0.5, 1.0, 4.0]))
    }

    fn tiny_corpus(n: usize) -> Vec<CaseRecord> {
        let spec = PhantomSpec {
            size_ratio: 4.0,
            smallest_voxels: 10.0,
            ..PhantomSpec::new(1, [8, 16, 16], 3)
        };
        let corpus = phantom_corpus(&spec, n, [1.0, 0.0, 0.0]).unwrap();
        preprocess_corpus(&corpus.cases, [4, 16, 16], 1).unwrap()
    }

    fn tiny_net() -> Network {
        let cfg = NetworkConfig {
            base_channels: 8,
            ..NetworkConfig::new(NetworkVariant::OrganNet25d, 3)
        };
        Network::build(&cfg, 2).unwrap()
    }

    #[test]
    fn schedule() {
        let c = cfg(1);
        assert_eq!(lr_at(0, &c), 0.001);
        assert_eq!(lr_at(49, &c), 0.001);
        assert_eq!(lr_at(50, &c), 0.0001);
        assert_eq!(lr_at(100, &c), 0.00001);
        assert_eq!(lr_at(500, &c), 0.00001);
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let mut net = tiny_net();
        net.zero_grad();
        let before = net.clone();
        let mut adam = Adam::new(&net);
        adam.update(&mut net, 1e-3);
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params(&mut |p| a.extend_from_slice(&p.value));
        before.visit_params(&mut |p| b.extend_from_slice(&p.value));
        assert_eq!(a, b);
    }

    #[test]
    fn small_step_descends() {
        let cases = tiny_corpus(2);
        let batch: Vec<&CaseRecord> = cases.iter().collect();
        let loss = LossConfig::with_alpha(vec![0.5, 1.0, 4.0]);
        let mut wins = 0;
        for seed in 0..5 {
            let cfg = NetworkConfig {
                base_channels: 8,
                ..NetworkConfig::new(NetworkVariant::OrganNet25d, 3)
            };
            let mut net = Network::build(&cfg, seed).unwrap();
            let before = compute_gradients(&mut net, &batch, &loss).unwrap().total;
            Adam::new(&net).update(&mut net, 1e-4);
            let after = batch_loss(&net, &batch, &loss).unwrap().total;
            wins += (after < before) as usize;
        }
        assert!(wins >= 3, "{wins}/5 steps reduced the loss");
    }

    #[test]
    fn log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_corpus(3);
        let mut seen = Vec::new();
        let mut cb = |r: &EpochRecord| seen.push(r.epoch);
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            on_epoch: Some(&mut cb),
            ..Default::default()
        };
        let c = TrainConfig {
            decay_every_epochs: 1,
            ..cfg(3)
        };
        let (_, log) = train(tiny_net(), &cases, &cases[..1], &c, opts).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        for (i, e) in log.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i);
            assert_eq!(e.lr, lr_at(i, &c));
            assert_eq!(e.steps, 2);
            assert!(e.val_mean_dsc.is_some());
        }
        for sub in ["best", "last", "final"] {
            assert!(dir.path().join(sub).join(network::WEIGHTS_FILE).exists());
        }
        let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines, log.to_jsonl());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cases = tiny_corpus(3);
        let c = cfg(3);
        let (full_net, full) = train(tiny_net(), &cases, &[], &c, TrainOptions::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        train(tiny_net(), &cases, &[], &cfg(2), first).unwrap();
        let resumed = TrainOptions {
            resume_from: Some(dir.path().join("last")),
            ..Default::default()
        };
        let (net, log) = train(tiny_net(), &cases, &[], &c, resumed).unwrap();
        assert_eq!(log.epochs, full.epochs);
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params(&mut |p| a.extend(p.value.iter().map(|v| v.to_bits())));
        full_net.visit_params(&mut |p| b.extend(p.value.iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let cases = tiny_corpus(2);
        let mut net = tiny_net();
        net.visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = f32::NAN));
        let err = train(net, &cases, &[], &cfg(1), TrainOptions::default()).unwrap_err();
        assert!(matches!(err, EngineError::Diverged { epoch: 0, step: 0, .. }));
    }

    #[test]
    fn oracle_evaluation() {
        let cases = tiny_corpus(3);
        let report = evaluate_corpus(&OracleSegmenter { num_classes: 3 }, &cases).unwrap();
        assert_eq!(report.mean_dsc.mean, 1.0);
        assert_eq!(report.mean_hd95.unwrap().mean, 0.0);
        let by_hand = report.cases.iter().map(|c| c.report.mean_dsc).sum::<f64>() / 3.0;
        assert_eq!(report.mean_dsc.mean, by_hand);
    }

    #[test]
    fn background_stub_scores_zero() {
        struct Background;
        impl Segmenter for Background {
            fn num_classes(&self) -> usize {
                3
            }
            fn segment(&self, case: &CaseRecord) -> Result<LabelMap> {
                let l = case.labels().unwrap();
                Ok(LabelMap::new(ndarray::Array3::zeros(l.data().raw_dim()), 3, l.spacing()).unwrap())
            }
        }
        let cases = tiny_corpus(2);
        let report = evaluate_corpus(&Background, &cases).unwrap();
        for c in &report.per_class {
            assert_eq!(c.dsc.unwrap().mean, 0.0);
            assert!(c.hd95.is_none());
            assert_eq!(c.undefined_hd95, 2);
        }
    }
}
