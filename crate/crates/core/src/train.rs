//! Losses, AdamW, the learning-rate schedule and the epoch loop.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{classify_levels, LevelField, Sample, NUM_LEVELS};
use crate::metrics::{Evaluator, Forecast, TS_THRESHOLDS};
use crate::model::{HeadKind, Model};
use crate::parallel;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Dice,
    Recall,
    Ce,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(Self::Dice),
            "recall" => Ok(Self::Recall),
            "ce" | "cross-entropy" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!(
                "unknown loss {s:?} (dice, recall, ce, mse)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dice => "dice",
            Self::Recall => "recall",
            Self::Ce => "ce",
            Self::Mse => "mse",
        })
    }
}

impl LossKind {
    pub fn head(self) -> HeadKind {
        match self {
            Self::Mse => HeadKind::Regression,
            _ => HeadKind::Levels,
        }
    }
}

/// Flatten `(…, 5)` logits to `(N, 5)` and check them against `labels`.
fn flat_logits(g: &mut Graph, logits: Var, labels: &LevelField) -> Result<(Var, usize)> {
    let s = g.shape(logits).to_vec();
    let n = labels.len();
    if s.last() != Some(&NUM_LEVELS) || s[..s.len() - 1] != *labels.shape() {
        return Err(Error::shape("loss", &s, labels.shape()));
    }
    Ok((g.reshape(logits, &[n, NUM_LEVELS])?, n))
}

fn one_hot(labels: &LevelField, weights: &[f64; NUM_LEVELS]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), NUM_LEVELS]);
    for (row, &l) in t
        .data_mut()
        .chunks_exact_mut(NUM_LEVELS)
        .zip(labels.levels())
    {
        row[l as usize] = weights[l as usize];
    }
    t
}

/// Soft Dice over levels with unit smoothing: `1 − mean_c (2Σpy+1)/(Σp+Σy+1)`.
pub fn dice_loss(g: &mut Graph, logits: Var, labels: &LevelField) -> Result<Var> {
    let (x, _) = flat_logits(g, logits, labels)?;
    let p = g.softmax(x);
    let y = one_hot(labels, &[1.0; NUM_LEVELS]);
    let counts = labels.histogram();
    let ysum = g.constant(Tensor::from_fn(&[NUM_LEVELS], |c| counts[c] as f64 + 1.0));
    let y = g.constant(y);
    let py = g.mul(p, y)?;
    let inter = g.sum_rows(py);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let psum = g.sum_rows(p);
    let den = g.add(psum, ysum)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Per-level recall of the argmax prediction; `None` for absent levels.
pub fn argmax_recall(logits: &Tensor, labels: &LevelField) -> Result<[Option<f64>; NUM_LEVELS]> {
    let pred = crate::model::argmax_levels(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::shape("recall", pred.shape(), labels.shape()));
    }
    let mut tp = [0usize; NUM_LEVELS];
    let mut total = [0usize; NUM_LEVELS];
    for (&p, &y) in pred.levels().iter().zip(labels.levels()) {
        total[y as usize] += 1;
        if p == y {
            tp[y as usize] += 1;
        }
    }
    Ok(std::array::from_fn(|c| {
        (total[c] > 0).then(|| tp[c] as f64 / total[c] as f64)
    }))
}

/// Class weights `clamp(1 − recall_c, 0.05, 1)`, 1 for absent levels.
pub fn recall_weights(logits: &Tensor, labels: &LevelField) -> Result<[f64; NUM_LEVELS]> {
    let r = argmax_recall(logits, labels)?;
    Ok(std::array::from_fn(|c| {
        r[c].map_or(1.0, |r| (1.0 - r).clamp(0.05, 1.0))
    }))
}

fn weighted_ce(
    g: &mut Graph,
    logits: Var,
    labels: &LevelField,
    w: &[f64; NUM_LEVELS],
) -> Result<Var> {
    let (x, n) = flat_logits(g, logits, labels)?;
    let lp = g.log_softmax(x);
    let y = g.constant(one_hot(labels, w));
    let picked = g.mul(lp, y)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub fn ce_loss(g: &mut Graph, logits: Var, labels: &LevelField) -> Result<Var> {
    weighted_ce(g, logits, labels, &[1.0; NUM_LEVELS])
}

/// Cross-entropy reweighted towards levels the current prediction misses.
/// The weights are treated as constants.
pub fn recall_loss(g: &mut Graph, logits: Var, labels: &LevelField) -> Result<Var> {
    let w = recall_weights(g.value(logits), labels)?;
    weighted_ce(g, logits, labels, &w)
}

pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape("mse", g.shape(pred), target.shape()));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Loss of a model output against `(j, h, w)` target precipitation.
pub fn loss_for(g: &mut Graph, kind: LossKind, out: Var, target: &Tensor) -> Result<Var> {
    match kind {
        LossKind::Mse => mse_loss(g, out, target),
        _ => {
            let labels = classify_levels(target)?;
            match kind {
                LossKind::Dice => dice_loss(g, out, &labels),
                LossKind::Recall => recall_loss(g, out, &labels),
                _ => ce_loss(g, out, &labels),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient see a zero gradient. Fails
    /// without touching anything if a gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, gr) in grads.iter() {
            if !gr.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let gr = grads.get(id);
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            let p = store.get_mut(id).value.data_mut();
            for i in 0..p.len() {
                let gi = gr.map_or(0.0, |t| t.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * c.weight_decay * p[i];
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpoints.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (id, p) in store.iter() {
            out.push((format!("adam.m.{}", p.name), self.m[id.0].clone()));
            out.push((format!("adam.v.{}", p.name), self.v[id.0].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore,
        tensors: &[(String, Tensor)],
        step: u64,
    ) -> Result<()> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("checkpoint lacks optimizer tensor {name}")))
        };
        for (id, p) in store.iter() {
            let (m, v) = (
                find(format!("adam.m.{}", p.name))?,
                find(format!("adam.v.{}", p.name))?,
            );
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape("optimizer state", m.shape(), p.value.shape()));
            }
            self.m[id.0] = m;
            self.v[id.0] = v;
        }
        self.step = step;
        Ok(())
    }
}

/// Exponential decay `lr0 · γ^epoch`, epochs counted from 0.
pub fn lr_at(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples whose graphs are alive at once; batches are accumulated in
    /// chunks of this size.
    pub micro_batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub adamw: AdamWConfig,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            micro_batch: 8,
            lr: 1e-3,
            gamma: 0.9,
            adamw: AdamWConfig::default(),
            loss: LossKind::Dice,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, head: HeadKind) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config(
                "batch_size and micro_batch must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("lr and gamma must be positive".into()));
        }
        if self.loss.head() != head {
            return Err(Error::Config(format!(
                "loss {} does not fit a {head:?} head",
                self.loss
            )));
        }
        Ok(())
    }
}

/// Validation scores for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub mean_iou: Option<f64>,
    pub mean_ts: f64,
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<ValMetrics>,
}

/// Everything besides tensors needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub adam_step: u64,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `train_log.ndjson` and the `last`/`best` checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last` if it exists.
    pub resume: bool,
    /// Stop once this many epochs are complete, leaving a resumable run.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

pub const LOG_FILE: &str = "train_log.ndjson";

/// Per-sample pieces of a batch loss that are still on the tape.
enum Parts {
    Dice { inter: Var, psum: Var },
    Ce { lp: Var, labels: LevelField },
    Mse { sq: Var },
}

/// Per-sample sums that fix the batch-level loss coefficients.
#[derive(Clone, Copy, Debug, Default)]
struct Stats {
    inter: [f64; NUM_LEVELS],
    psum: [f64; NUM_LEVELS],
    ysum: [f64; NUM_LEVELS],
    hits: [u64; NUM_LEVELS],
    count: [u64; NUM_LEVELS],
    cells: usize,
}

enum Coeffs {
    Dice {
        a: [f64; NUM_LEVELS],
        b: [f64; NUM_LEVELS],
    },
    Ce {
        w: [f64; NUM_LEVELS],
    },
    Mse,
}

fn loss_parts(g: &mut Graph, kind: LossKind, out: Var, target: &Tensor) -> Result<(Parts, Stats)> {
    let mut st = Stats {
        cells: target.numel(),
        ..Stats::default()
    };
    if kind == LossKind::Mse {
        if g.shape(out) != target.shape() {
            return Err(Error::shape("mse", g.shape(out), target.shape()));
        }
        let t = g.constant(target.clone());
        let d = g.sub(out, t)?;
        let sq = g.mul(d, d)?;
        return Ok((Parts::Mse { sq: g.sum(sq) }, st));
    }
    let labels = classify_levels(target)?;
    let (x, _) = flat_logits(g, out, &labels)?;
    let counts = labels.histogram();
    st.ysum = std::array::from_fn(|c| counts[c] as f64);
    if kind == LossKind::Dice {
        let p = g.softmax(x);
        let y = g.constant(one_hot(&labels, &[1.0; NUM_LEVELS]));
        let py = g.mul(p, y)?;
        let inter = g.sum_rows(py);
        let psum = g.sum_rows(p);
        st.inter.copy_from_slice(g.value(inter).data());
        st.psum.copy_from_slice(g.value(psum).data());
        return Ok((Parts::Dice { inter, psum }, st));
    }
    if kind == LossKind::Recall {
        let pred = crate::model::argmax_levels(g.value(out))?;
        for (&p, &y) in pred.levels().iter().zip(labels.levels()) {
            st.count[y as usize] += 1;
            st.hits[y as usize] += u64::from(p == y);
        }
    }
    let lp = g.log_softmax(x);
    Ok((Parts::Ce { lp, labels }, st))
}

/// Pool per-sample sums. Returns the loss when it is already determined,
/// the coefficients of each sample's surrogate and the batch cell count.
fn combine(kind: LossKind, stats: &[Stats]) -> (Option<f64>, Coeffs, usize) {
    let mut t = Stats::default();
    for s in stats {
        for c in 0..NUM_LEVELS {
            t.inter[c] += s.inter[c];
            t.psum[c] += s.psum[c];
            t.ysum[c] += s.ysum[c];
            t.hits[c] += s.hits[c];
            t.count[c] += s.count[c];
        }
        t.cells += s.cells;
    }
    match kind {
        LossKind::Dice => {
            let k = NUM_LEVELS as f64;
            let num: [f64; NUM_LEVELS] = std::array::from_fn(|c| 2.0 * t.inter[c] + 1.0);
            let den: [f64; NUM_LEVELS] = std::array::from_fn(|c| t.psum[c] + t.ysum[c] + 1.0);
            let loss = 1.0 - (0..NUM_LEVELS).map(|c| num[c] / den[c]).sum::<f64>() / k;
            let a = std::array::from_fn(|c| -2.0 / (k * den[c]));
            let b = std::array::from_fn(|c| num[c] / (k * den[c] * den[c]));
            (Some(loss), Coeffs::Dice { a, b }, t.cells)
        }
        LossKind::Recall => {
            let w = std::array::from_fn(|c| {
                if t.count[c] == 0 {
                    1.0
                } else {
                    (1.0 - t.hits[c] as f64 / t.count[c] as f64).clamp(0.05, 1.0)
                }
            });
            (None, Coeffs::Ce { w }, t.cells)
        }
        LossKind::Ce => (
            None,
            Coeffs::Ce {
                w: [1.0; NUM_LEVELS],
            },
            t.cells,
        ),
        LossKind::Mse => (None, Coeffs::Mse, t.cells),
    }
}

/// Scalar whose gradient is this sample's share of the batch loss gradient.
fn surrogate(g: &mut Graph, parts: &Parts, coeffs: &Coeffs, cells: usize) -> Result<Var> {
    let dot = |g: &mut Graph, v: Var, c: &[f64; NUM_LEVELS]| -> Result<Var> {
        let c = g.constant(Tensor::new(vec![NUM_LEVELS], c.to_vec())?);
        let m = g.mul(v, c)?;
        Ok(g.sum(m))
    };
    match (parts, coeffs) {
        (Parts::Dice { inter, psum }, Coeffs::Dice { a, b }) => {
            let x = dot(g, *inter, a)?;
            let y = dot(g, *psum, b)?;
            g.add(x, y)
        }
        (Parts::Ce { lp, labels }, Coeffs::Ce { w }) => {
            let y = g.constant(one_hot(labels, w));
            let picked = g.mul(*lp, y)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0 / cells as f64))
        }
        (Parts::Mse { sq }, Coeffs::Mse) => Ok(g.scale(*sq, 1.0 / cells as f64)),
        _ => unreachable!("parts and coefficients come from the same loss kind"),
    }
}

/// Loss and gradient of a batch-level loss over `n` outputs. `forward`
/// builds output `i` on a fresh graph. Dice and recall pool their sums over
/// the whole batch; CE and MSE average over every cell of the batch.
///
/// At most `micro_batch` graphs are alive at once. When the batch does not
/// fit, losses that need batch statistics run the forward pass twice.
pub fn batch_backward<F>(
    n: usize,
    kind: LossKind,
    micro_batch: usize,
    forward: F,
    targets: &[&Tensor],
) -> Result<(f64, Gradients)>
where
    F: Fn(usize, &mut Graph) -> Result<Var> + Sync + Send,
{
    let mb = micro_batch.max(1);
    let build = |i: usize| -> Result<(Graph, Parts, Stats)> {
        let mut g = Graph::new();
        let out = forward(i, &mut g)?;
        let (parts, st) = loss_parts(&mut g, kind, out, targets[i])?;
        Ok((g, parts, st))
    };
    let finish = |(mut g, parts, _): (Graph, Parts, Stats),
                  coeffs: &Coeffs,
                  cells: usize|
     -> Result<(f64, Gradients)> {
        let s = surrogate(&mut g, &parts, coeffs, cells)?;
        let v = g.value(s).data()[0];
        if !v.is_finite() {
            return Ok((v, Gradients::default()));
        }
        Ok((v, g.backward(s)?.into_params()))
    };
    let needs_stats = matches!(kind, LossKind::Dice | LossKind::Recall);
    let mut kept = None;
    let mut stats = Vec::with_capacity(n);
    if needs_stats {
        if n <= mb {
            let built = parallel::map_range(n, build)
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            stats.extend(built.iter().map(|b| b.2));
            kept = Some(built);
        } else {
            for start in (0..n).step_by(mb) {
                let part =
                    parallel::map_range((n - start).min(mb), |i| build(start + i).map(|b| b.2));
                for st in part {
                    stats.push(st?);
                }
            }
        }
    } else {
        stats.extend(targets.iter().map(|t| Stats {
            cells: t.numel(),
            ..Stats::default()
        }));
    }
    let (fixed_loss, coeffs, cells) = combine(kind, &stats);
    let results = match kept {
        Some(built) => parallel::map_owned(built, |b| finish(b, &coeffs, cells)),
        None => {
            let mut all = Vec::with_capacity(n);
            for start in (0..n).step_by(mb) {
                all.extend(parallel::map_range((n - start).min(mb), |i| {
                    finish(build(start + i)?, &coeffs, cells)
                }));
            }
            all
        }
    };
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for r in results {
        let (v, g) = r?;
        loss += v;
        total.add_assign(&g);
    }
    Ok((fixed_loss.unwrap_or(loss), total))
}

/// Batch loss and gradient of `model` over `samples`.
pub fn batch_gradients(
    model: &Model,
    kind: LossKind,
    samples: &[&Sample],
    micro_batch: usize,
) -> Result<(f64, Gradients)> {
    let targets: Vec<&Tensor> = samples.iter().map(|s| &s.targets).collect();
    batch_backward(
        samples.len(),
        kind,
        micro_batch,
        |i, g| model.forward(g, &samples[i].inputs),
        &targets,
    )
}

/// Verify `model` on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<crate::metrics::VerificationReport> {
    let mut ev = Evaluator::new(model.cfg.horizon, &TS_THRESHOLDS);
    let preds = parallel::map(samples, |s| -> Result<Forecast> {
        Ok(match model.cfg.head {
            HeadKind::Levels => Forecast::Levels(model.predict_levels(&s.inputs)?),
            HeadKind::Regression => Forecast::Amounts(model.predict(&s.inputs)?),
        })
    });
    for (p, s) in preds.into_iter().zip(samples) {
        ev.add(&p?, &s.targets)?;
    }
    Ok(ev.finish())
}

fn validate_metrics(model: &Model, val: &[Sample]) -> Result<Option<ValMetrics>> {
    if val.is_empty() {
        return Ok(None);
    }
    let r = evaluate(model, val)?;
    Ok(Some(ValMetrics {
        mean_iou: r.mean.mean_iou,
        mean_ts: r.mean.mean_ts,
        rmse: r.mean.rmse,
    }))
}

/// Higher is better: mean IoU for levels, negated RMSE for regression.
fn score(head: HeadKind, v: &ValMetrics) -> Option<f64> {
    match head {
        HeadKind::Levels => v.mean_iou,
        HeadKind::Regression => v.rmse.map(|r| -r),
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const RECENT: usize = 8;

/// Train `model` in place. With an output directory, every epoch appends a
/// record to the NDJSON log and refreshes the `last` checkpoint; `best`
/// follows the validation score.
pub fn train_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    opts: &RunOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate(model.cfg.head)?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg.adamw);
    let mut state = TrainState {
        config: cfg.clone(),
        epochs_done: 0,
        adam_step: 0,
        best_epoch: None,
        best_score: None,
        history: Vec::new(),
    };
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let last = d.join("last");
        if opts.resume && checkpoint_exists(&last) {
            let (loaded, extra, st): (Model, _, TrainState) = Model::load(&last)?;
            if loaded.cfg != model.cfg || st.config != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was written with a different configuration".into(),
                ));
            }
            *model = loaded;
            opt.load_state(&model.store, &extra, st.adam_step)?;
            state = st;
        }
        write_log(&d.join(LOG_FILE), &state.history)?;
    }

    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut recent: Vec<f64> = Vec::new();
    for epoch in state.epochs_done..stop {
        let lr = lr_at(cfg.lr, cfg.gamma, epoch);
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(model, cfg.loss, &batch, cfg.micro_batch)?;
            recent.push(loss);
            if recent.len() > RECENT {
                recent.remove(0);
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    history: recent,
                });
            }
            opt.update(&mut model.store, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_m = validate_metrics(model, val)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val: val_m,
        };
        let s = val_m.and_then(|v| score(model.cfg.head, &v));
        let improved = s.is_some_and(|s| state.best_score.is_none_or(|b| s > b));
        if improved {
            state.best_score = s;
            state.best_epoch = Some(rec.epoch);
        }
        state.epochs_done = epoch + 1;
        state.adam_step = opt.step;
        state.history.push(rec.clone());
        if let Some(d) = dir {
            let log = d.join(LOG_FILE);
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&log)
                .map_err(|e| Error::io(&log, e))?;
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&log, e))?;
            let extra = opt.state_tensors(&model.store);
            model.save(&d.join("last"), &extra, &state)?;
            if improved {
                model.save(&d.join("best"), &[], &state)?;
            }
        }
        on_epoch(&rec);
    }
    Ok(TrainOutcome {
        history: state.history,
        best_epoch: state.best_epoch,
        best_score: state.best_score,
    })
}

fn checkpoint_exists(stem: &Path) -> bool {
    let (bin, json) = crate::checkpoint::paths(stem);
    bin.exists() && json.exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synth_advect, SynthConfig};
    use crate::model::ModelConfig;
    use crate::tensor::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn labels(shape: &[usize], seed: u64) -> LevelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        LevelField::new(
            shape.to_vec(),
            (0..n)
                .map(|_| rng.random_range(0..NUM_LEVELS as u8))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn dice_uniform_closed_form() {
        let lab = LevelField::new(vec![1024], vec![0; 1024]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1024, 5]));
        let l = dice_loss(&mut g, x, &lab).unwrap();
        let expect = 1.0 - (410.6 / 1229.8 + 4.0 / 205.8) / 5.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_near_zero_when_confident_and_right() {
        let lab = labels(&[64], 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[64, 5], |i| {
            if i % 5 == lab.levels()[i / 5] as usize {
                40.0
            } else {
                0.0
            }
        }));
        let l = dice_loss(&mut g, x, &lab).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn ce_uniform_is_ln5() {
        let lab = labels(&[7, 3], 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[7, 3, 5]));
        let l = ce_loss(&mut g, x, &lab).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn recall_weights_follow_misses() {
        let lab = LevelField::new(vec![4], vec![0, 0, 1, 1]).unwrap();
        // Predicts level 0 everywhere: level 0 recall 1, level 1 recall 0.
        let logits = Tensor::from_fn(&[4, 5], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let w = recall_weights(&logits, &lab).unwrap();
        assert_eq!(w, [0.05, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn loss_gradchecks() {
        let lab = labels(&[4, 4], 11);
        let target = Tensor::from_fn(&[4, 4], |i| i as f64 * 0.3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = store.add_uniform("x", &[4, 4, 5], 2.0, &mut rng);
        let r = store.add_uniform("r", &[4, 4], 2.0, &mut rng);
        let opts = GradCheckOptions::default();
        for kind in [LossKind::Dice, LossKind::Recall, LossKind::Ce] {
            let rep = grad_check(
                |g, s| {
                    let x = g.param(s, id);
                    match kind {
                        LossKind::Dice => dice_loss(g, x, &lab),
                        LossKind::Recall => recall_loss(g, x, &lab),
                        _ => ce_loss(g, x, &lab),
                    }
                },
                &store,
                &opts,
            )
            .unwrap();
            assert!(rep.passed, "{kind}: {}", rep.max_rel_err);
        }
        let rep = grad_check(
            |g, s| {
                let x = g.param(s, r);
                mse_loss(g, x, &target)
            },
            &store,
            &opts,
        )
        .unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let lab = labels(&[4, 4], 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 5, 5]));
        assert!(dice_loss(&mut g, x, &lab).is_err());
        let y = g.constant(Tensor::zeros(&[4, 4, 4]));
        assert!(ce_loss(&mut g, y, &lab).is_err());
    }

    #[test]
    fn batch_losses_match_pooled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let id = store.add_uniform("x", &[12, 5], 2.0, &mut rng);
        let rid = store.add_uniform("r", &[12, 1], 2.0, &mut rng);
        let precip: Vec<f64> = (0..12)
            .map(|_| {
                if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.random_range(0.0..30.0)
                }
            })
            .collect();
        let t0 = Tensor::new(vec![2, 3], precip[..6].to_vec()).unwrap();
        let t1 = Tensor::new(vec![2, 3], precip[6..].to_vec()).unwrap();
        let pooled = Tensor::new(vec![12], precip.clone()).unwrap();
        let labels = classify_levels(&pooled).unwrap();
        for kind in [
            LossKind::Dice,
            LossKind::Recall,
            LossKind::Ce,
            LossKind::Mse,
        ] {
            let (pid, width) = if kind == LossKind::Mse {
                (rid, 1)
            } else {
                (id, 5)
            };
            let mut g = Graph::new();
            let x = g.param(&store, pid);
            let l = match kind {
                LossKind::Dice => dice_loss(&mut g, x, &labels),
                LossKind::Recall => recall_loss(&mut g, x, &labels),
                LossKind::Ce => ce_loss(&mut g, x, &labels),
                LossKind::Mse => {
                    let x = g.reshape(x, &[12]).unwrap();
                    mse_loss(&mut g, x, &pooled)
                }
            }
            .unwrap();
            let want = g.value(l).data()[0];
            let want_g = g.backward(l).unwrap().into_params();
            for mb in [1, 2] {
                let (got, grads) = batch_backward(
                    2,
                    kind,
                    mb,
                    |i, g| {
                        let x = g.param(&store, pid);
                        let r = g.gather_rows(x, &(6 * i..6 * i + 6).collect::<Vec<_>>())?;
                        if width == 1 {
                            g.reshape(r, &[2, 3])
                        } else {
                            g.reshape(r, &[2, 3, 5])
                        }
                    },
                    &[&t0, &t1],
                )
                .unwrap();
                assert!((got - want).abs() < 1e-12, "{kind} {got} {want}");
                let (a, b) = (grads.get(pid).unwrap(), want_g.get(pid).unwrap());
                assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{kind}");
            }
        }
    }

    fn one_param_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    fn grads_of(store: &ParamStore, v: f64) -> Gradients {
        let mut g = Graph::new();
        let id = store.ids().next().unwrap();
        let p = g.param(store, id);
        let l = g.scale(p, v);
        g.backward(l).unwrap().into_params()
    }

    #[test]
    fn adamw_examples() {
        let mut s = one_param_store(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        let gr = grads_of(&s, 0.0);
        opt.update(&mut s, &gr, 0.1).unwrap();
        assert_eq!(s.value(crate::tensor::ParamId(0)).data()[0], 1.0);

        let mut s = one_param_store(1.0);
        let mut opt = AdamW::new(&s, cfg);
        let gr = grads_of(&s, 1.0);
        opt.update(&mut s, &gr, 0.1).unwrap();
        assert!((s.value(crate::tensor::ParamId(0)).data()[0] - 0.9).abs() < 1e-6);

        let mut s = one_param_store(2.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.update(&mut s, &Gradients::default(), 0.1).unwrap();
        assert!(
            (s.value(crate::tensor::ParamId(0)).data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15
        );
    }

    #[test]
    fn adamw_rejects_non_finite_and_names_param() {
        let mut s = one_param_store(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let gr = grads_of(&s, f64::NAN);
        let err = opt.update(&mut s, &gr, 0.1).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(s.value(crate::tensor::ParamId(0)).data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(1e-3, 0.9, 0), 1e-3);
        assert!((lr_at(1e-3, 0.9, 10) - 3.486784401e-4).abs() < 1e-12);
    }

    #[test]
    fn loss_kind_parse() {
        assert_eq!("dice".parse::<LossKind>().unwrap(), LossKind::Dice);
        assert_eq!("MSE".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert!("hinge".parse::<LossKind>().is_err());
    }

    fn toy() -> (ModelConfig, Vec<Sample>) {
        let mcfg = ModelConfig {
            height: 16,
            width: 16,
            history: 2,
            horizon: 1,
            patch: 4,
            dim: 8,
            group: 4,
            encoder_depth: 1,
            translator_depth: 1,
            heads: 1,
            decoder_dim: 8,
            ..ModelConfig::default()
        };
        let scfg = SynthConfig {
            samples: 6,
            height: 16,
            width: 16,
            history: 2,
            horizon: 1,
            ..SynthConfig::default()
        };
        (mcfg, synth_advect(&scfg, 9).unwrap())
    }

    #[test]
    fn accumulation_does_not_change_gradients() {
        let (mcfg, data) = toy();
        let model = Model::new(mcfg).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let (l1, g1) = batch_gradients(&model, LossKind::Dice, &refs, 6).unwrap();
        let (l2, g2) = batch_gradients(&model, LossKind::Dice, &refs, 2).unwrap();
        assert!((l1 - l2).abs() <= 1e-8 * l1.abs());
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let (mcfg, data) = toy();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            micro_batch: 2,
            ..TrainConfig::default()
        };
        let (train, val) = data.split_at(4);
        let full_dir = tempfile::tempdir().unwrap();
        let mut a = Model::new(mcfg.clone()).unwrap();
        let opts = RunOptions {
            out_dir: Some(full_dir.path().into()),
            ..RunOptions::default()
        };
        train_loop(&mut a, &cfg, train, val, &opts, |_| {}).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut b = Model::new(mcfg.clone()).unwrap();
        let mut opts = RunOptions {
            out_dir: Some(part_dir.path().into()),
            resume: true,
            stop_after: Some(1),
        };
        train_loop(&mut b, &cfg, train, val, &opts, |_| {}).unwrap();
        let mut c = Model::new(mcfg).unwrap();
        opts.stop_after = None;
        train_loop(&mut c, &cfg, train, val, &opts, |_| {}).unwrap();

        assert_eq!(a.parameter_tensors(), c.parameter_tensors());
        for f in [LOG_FILE, "last.bin", "last.json"] {
            assert_eq!(
                fs::read(full_dir.path().join(f)).unwrap(),
                fs::read(part_dir.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let lines = fs::read_to_string(full_dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 3);
    }

    #[test]
    fn nan_loss_aborts() {
        let (mcfg, data) = toy();
        let mut m = Model::new(mcfg).unwrap();
        let id = m.store.ids().next().unwrap();
        let mut v = m.store.value(id).clone();
        v.data_mut()[0] = f64::NAN;
        m.store.set_value(id, v).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train_loop(&mut m, &cfg, &data, &[], &RunOptions::default(), |_| {}).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteLoss {
                epoch: 1,
                batch: 1,
                ..
            }
        ));
    }

    #[test]
    fn loss_head_mismatch_rejected() {
        let cfg = TrainConfig {
            loss: LossKind::Mse,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(HeadKind::Levels).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_permutation_invariant_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            let lab = labels(&[n], seed + 1);
            let x = Tensor::from_fn(&[n, 5], |_| rng.random_range(-3.0..3.0));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let px = Tensor::from_fn(&[n, 5], |i| x.data()[perm[i / 5] * 5 + i % 5]);
            let plab = LevelField::new(vec![n], perm.iter().map(|&i| lab.levels()[i]).collect()).unwrap();
            for kind in [LossKind::Dice, LossKind::Recall, LossKind::Ce] {
                let eval = |x: &Tensor, l: &LevelField| {
                    let mut g = Graph::new();
                    let v = g.constant(x.clone());
                    let out = match kind {
                        LossKind::Dice => dice_loss(&mut g, v, l),
                        LossKind::Recall => recall_loss(&mut g, v, l),
                        _ => ce_loss(&mut g, v, l),
                    }.unwrap();
                    g.value(out).data()[0]
                };
                let (a, b) = (eval(&x, &lab), eval(&px, &plab));
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!(a >= 0.0);
                if kind == LossKind::Dice {
                    prop_assert!(a <= 1.0);
                }
            }
        }
    }
}
