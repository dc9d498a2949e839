//! Optimization loop, validation and model selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, preprocess, AugmentParams, AugmentProbabilities, DataError, Level, PreparedPair, Sample};
use crate::labelgen::{generate_targets, LabelError, SegTargets};
use crate::loss::{total_loss_grad, LossConfig, LossError, LossReport};
use crate::metrics::{aggregate, score_image, MetricReport, MetricsError};
use crate::model::{save_checkpoint, ModelError, RoiMatcher, SegOutput};
use crate::nn::Graph;
use crate::postprocess::{decode, DecodeConfig, DecodeError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error("non-finite loss at iteration {iteration} on pairs {pair_ids:?}")]
    NonFinite { iteration: usize, pair_ids: Vec<String>, snapshot: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every level from the first iteration.
    Joint,
    /// Level I, then I+II, then all levels, in equal thirds.
    Curriculum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Iterations at which the rate is multiplied by `lr_factor`; empty means
    /// 60% and 80% of `max_iterations`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Validate every this many iterations (0 disables periodic validation).
    pub eval_every: usize,
    pub grad_clip: f64,
    pub augment: AugmentProbabilities,
    pub augment_params: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            milestones: Vec::new(),
            lr_factor: 0.1,
            batch_size: 4,
            max_iterations: 1000,
            strategy: Strategy::Joint,
            seed: 0,
            eval_every: 0,
            grad_clip: 5.0,
            augment: AugmentProbabilities::default(),
            augment_params: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("rates and clip norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor must be positive");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        Ok(())
    }

    /// Milestones after defaulting.
    pub fn effective_milestones(&self) -> Vec<usize> {
        if self.milestones.is_empty() {
            vec![self.max_iterations * 3 / 5, self.max_iterations * 4 / 5]
        } else {
            self.milestones.clone()
        }
    }

    /// Learning rate used at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.effective_milestones().iter().filter(|&&m| iteration >= m).count();
        self.learning_rate * self.lr_factor.powi(passed as i32)
    }

    /// Levels drawn from at `iteration`.
    pub fn levels_at(&self, iteration: usize) -> &'static [Level] {
        match self.strategy {
            Strategy::Joint => &Level::ALL,
            Strategy::Curriculum => {
                let third = self.max_iterations.div_ceil(3).max(1);
                &Level::ALL[..(iteration / third + 1).min(3)]
            }
        }
    }
}

/// Decoupled weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter tensor with its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                p[i] *= 1.0 - lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// A prepared pair with its training labels.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub pair: PreparedPair,
    pub targets: SegTargets,
}

/// Resizes a sample to the model input and builds its labels.
pub fn prepare_item(sample: &Sample, size: (usize, usize), shrink_ratio: f64) -> Result<TrainItem, TrainError> {
    let pair = preprocess(sample, size)?;
    let targets = generate_targets(&pair.target_polygons, size.0, size.1, shrink_ratio)?;
    Ok(TrainItem { pair, targets })
}

/// Loss and parameter gradients (in parameter-store order) of one pair,
/// scaled by `weight`.
pub fn sample_gradients(
    model: &RoiMatcher,
    item: &TrainItem,
    loss: &LossConfig,
    weight: f64,
) -> Result<(LossReport, Vec<Vec<f64>>), TrainError> {
    let mut g = Graph::new();
    let trace = model.forward(&mut g, &item.pair.reference, &item.pair.prompt, &item.pair.target)?;
    let out = SegOutput::from_tensor(g.value(trace.output))?;
    let lg = total_loss_grad(&out, &item.targets, loss)?;
    let seed: Vec<f64> = lg.grad.iter().map(|v| v * weight).collect();
    let grads = g.backward(trace.output, &seed);
    let mut per_param: Vec<Vec<f64>> = model.params().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, gv) in grads.params() {
        per_param[id.index()].copy_from_slice(gv);
    }
    Ok((lg.report, per_param))
}

/// Where and how the trainer writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory for `train_log.jsonl`, `best.ckpt`, `last.ckpt` and failure
    /// snapshots; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    /// Validation history as `(iteration, report)`.
    pub validations: Vec<(usize, MetricReport)>,
    /// Iteration and mIoU of the best validation.
    pub best: Option<(usize, f64)>,
    /// Parameters of the best validation, if any validation ran.
    pub best_model: Option<RoiMatcher>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    iteration: usize,
    pair_ids: &'a [String],
    reports: &'a [LossReport],
}

enum Pool<'a> {
    Fixed(Vec<TrainItem>),
    Augmented(&'a [Sample]),
}

/// Trains `model` in place.
pub fn train(
    model: &mut RoiMatcher,
    train_set: &[Sample],
    val_set: &[Sample],
    loss: &LossConfig,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    loss.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    let size = model.config().input_size;
    let augmenting = config.augment != AugmentProbabilities::none();
    let pool = if augmenting {
        Pool::Augmented(train_set)
    } else {
        Pool::Fixed(
            train_set
                .iter()
                .map(|s| prepare_item(s, size, loss.shrink_ratio))
                .collect::<Result<_, _>>()?,
        )
    };
    let val_items: Vec<PreparedPair> =
        val_set.iter().map(|s| preprocess(s, size)).collect::<Result<_, _>>()?;
    let mut log_file = match &outputs.dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(fs::File::create(d.join("train_log.jsonl"))?)
        }
        None => None,
    };

    let sizes: Vec<usize> = model.params().iter().map(|(_, _, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut outcome = TrainOutcome { log: Vec::new(), validations: Vec::new(), best: None, best_model: None };

    for it in 0..config.max_iterations {
        let levels = config.levels_at(it);
        let eligible: Vec<usize> = (0..train_set.len()).filter(|&i| levels.contains(&train_set[i].level)).collect();
        let eligible = if eligible.is_empty() { (0..train_set.len()).collect() } else { eligible };
        let picks: Vec<usize> = (0..config.batch_size).map(|_| eligible[rng.random_range(0..eligible.len())]).collect();
        let aug_seeds: Vec<u64> = picks.iter().map(|_| rng.random()).collect();

        let weight = 1.0 / config.batch_size as f64;
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut reports = Vec::with_capacity(picks.len());
        let mut ids = Vec::with_capacity(picks.len());
        for (&i, &aseed) in picks.iter().zip(&aug_seeds) {
            let owned;
            let item = match &pool {
                Pool::Fixed(items) => &items[i],
                Pool::Augmented(samples) => {
                    let s = augment_with(&samples[i], aseed, &config.augment, &config.augment_params);
                    owned = prepare_item(&s, size, loss.shrink_ratio)?;
                    &owned
                }
            };
            ids.push(item.pair.pair_id.clone());
            let (report, g) = sample_gradients(model, item, loss, weight)?;
            reports.push(report);
            if !report.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                let snapshot = match &outputs.dir {
                    Some(d) => {
                        let path = d.join(format!("nonfinite_iter{it}.json"));
                        let snap = Snapshot { iteration: it, pair_ids: &ids, reports: &reports };
                        fs::write(&path, serde_json::to_string_pretty(&snap).expect("snapshot serializes"))?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainError::NonFinite { iteration: it, pair_ids: ids, snapshot });
            }
            for (acc, gv) in grads.iter_mut().zip(&g) {
                for (a, v) in acc.iter_mut().zip(gv) {
                    *a += v;
                }
            }
        }
        clip_grad_norm(&mut grads, config.grad_clip);
        let lr = config.lr_at(it);
        opt.step(&mut model.params_mut().data_slices_mut(), &grads, lr);

        let n = reports.len() as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let entry = LogEntry {
            iteration: it,
            lr,
            loss: LossReport {
                total: mean(|r| r.total),
                region: mean(|r| r.region),
                kernel: mean(|r| r.kernel),
                agg: mean(|r| r.agg),
                dis: mean(|r| r.dis),
                ohem_mask_coverage: mean(|r| r.ohem_mask_coverage),
            },
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serializes"))?;
        }
        log::debug!("iter {it} lr {lr:.2e} loss {:.5}", entry.loss.total);
        outcome.log.push(entry);

        let last = it + 1 == config.max_iterations;
        let periodic = config.eval_every > 0 && (it + 1) % config.eval_every == 0;
        if !val_items.is_empty() && (periodic || (last && config.eval_every > 0)) {
            let report = validate(model, &val_items, &outputs.decode)?;
            log::info!("iter {} validation mIoU {:.4} F {:.4}", it + 1, report.miou, report.f_measure);
            if outcome.best.is_none_or(|(_, b)| report.miou > b) {
                outcome.best = Some((it + 1, report.miou));
                outcome.best_model = Some(model.clone());
                if let Some(d) = &outputs.dir {
                    save_checkpoint(model, &d.join("best.ckpt"))?;
                }
            }
            outcome.validations.push((it + 1, report));
        }
    }
    if let Some(d) = &outputs.dir {
        save_checkpoint(model, &d.join("last.ckpt"))?;
    }
    Ok(outcome)
}

/// Runs forward → decode → metrics over prepared pairs.
pub fn validate(model: &RoiMatcher, pairs: &[PreparedPair], decode_config: &DecodeConfig) -> Result<MetricReport, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.predict(&p.reference, &p.prompt, &p.target)?;
        let result = decode(&out, decode_config)?;
        scores.push(score_image(&result, &p.target_polygons, p.level)?);
    }
    Ok(aggregate(&scores))
}

/// Means of consecutive non-overlapping `window`-iteration blocks of `totals`
/// starting at iteration `start`.
pub fn window_means(totals: &[f64], start: usize, window: usize) -> Vec<f64> {
    if window == 0 || totals.len() <= start {
        return Vec::new();
    }
    totals[start..].chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect()
}

/// Checks that every window mean is at most `1 + tolerance` times the
/// previous one. Returns the first offending window index on failure.
pub fn check_non_increasing(means: &[f64], tolerance: f64) -> Result<(), usize> {
    match means.windows(2).position(|w| w[1] > w[0] * (1.0 + tolerance)) {
        Some(k) => Err(k + 1),
        None => Ok(()),
    }
}

/// Writes `report` as `metrics.json` and `metrics.csv` into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<(), std::io::Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report).expect("report serializes"))?;
    fs::write(dir.join("metrics.csv"), report.to_csv())
}
