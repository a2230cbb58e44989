//! Losses, masked-duplicate construction, Adam and the training loop.
//!
//! The invariant loss compares the front-end features of the full-array
//! input with those of `P` duplicates that keep a random subset of the
//! channels:
//!
//! ```text
//! L_inv = (1/P) Σ_p ‖X − X_p‖_F / (‖X‖_F · ‖X_p‖_F)
//! L     = λ·L_CE + (1 − λ)·L_inv
//! ```
//!
//! Cross-entropy is computed on the full-array path only.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arraysim::ToyDataset;
use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::rng::{derive_seed, XorShift64Star};
use crate::segeval::{argmax_rows, score_labels, FrameLabels, FrameTiming, ScoreReport};
use crate::seqmodel::posteriors;
use crate::signal::{mask_channels, slice_segment, MultichannelSignal};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard added to each norm in the denominator of the invariant loss.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantConfig {
    /// Number of masked duplicates per example.
    pub p: usize,
    pub lambda: f64,
    pub min_keep: usize,
    pub rng_seed: u64,
    /// Use `1 − cos(X, X_p)` instead of the norm-ratio form.
    pub cosine: bool,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig {
            p: 2,
            lambda: 0.7,
            min_keep: 2,
            rng_seed: 0,
            cosine: false,
        }
    }
}

impl InvariantConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.p >= 1, Argument, "need at least one duplicate");
        ensure!((0.0..=1.0).contains(&self.lambda), Argument, "lambda {} outside [0, 1]", self.lambda);
        ensure!(self.min_keep >= 2, Argument, "min_keep must be at least 2");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub segment_s: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps_per_epoch: 2000,
            segment_s: 2.0,
            lr: 1e-3,
            patience: 5,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: 50 steps of 8 segments per epoch.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            steps_per_epoch: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size >= 1 && self.steps_per_epoch >= 1 && self.max_epochs >= 1 && self.patience >= 1,
            Argument,
            "batch size, steps, epochs and patience must be positive"
        );
        ensure!(self.segment_s > 0.0 && self.lr > 0.0 && self.lr.is_finite(), Argument, "segment length and lr must be positive");
        Ok(())
    }
}

/// Mean over frames of `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Array2<f64>, y: &FrameLabels) -> Result<f64> {
    ensure!(logits.nrows() == y.len(), Argument, "{} logit rows for {} labels", logits.nrows(), y.len());
    ensure!(logits.nrows() >= 1, Argument, "empty logits");
    let mut total = 0.0;
    for (row, &c) in logits.rows().into_iter().zip(&y.labels) {
        ensure!((c as usize) < row.len(), Argument, "label {c} out of range");
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[c as usize];
    }
    ensure!(total.is_finite(), Numeric, "non-finite cross-entropy");
    Ok(total / logits.nrows() as f64)
}

fn frob(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Invariant loss between reference features and masked-duplicate features.
pub fn invariant_loss(x_ref: &Array2<f64>, masked: &[Array2<f64>], cosine: bool) -> Result<f64> {
    ensure!(!masked.is_empty(), Argument, "need at least one masked feature map");
    let nr = frob(x_ref) + EPS_NORM;
    let mut total = 0.0;
    for x in masked {
        ensure!(x.dim() == x_ref.dim(), Argument, "feature maps differ in shape: {:?} vs {:?}", x.dim(), x_ref.dim());
        let np = frob(x) + EPS_NORM;
        total += if cosine {
            1.0 - (x_ref * x).sum() / (nr * np)
        } else {
            frob(&(x_ref - x)) / (nr * np)
        };
    }
    Ok(total / masked.len() as f64)
}

/// Tape version of [`invariant_loss`].
pub fn invariant_loss_tape(tape: &mut Tape, x_ref: Var, masked: &[Var], cosine: bool) -> Var {
    let nr = tape.frob_norm(x_ref, EPS_NORM);
    let mut terms = Vec::with_capacity(masked.len());
    for &x in masked {
        let np = tape.frob_norm(x, EPS_NORM);
        let den = tape.mul(nr, np);
        let term = if cosine {
            let prod = tape.mul(x_ref, x);
            let dot = tape.sum(prod);
            let c = tape.div(dot, den);
            let one = tape.constant(Tensor::scalar(1.0));
            tape.sub(one, c)
        } else {
            let d = tape.sub(x_ref, x);
            let num = tape.frob_norm(d, 0.0);
            tape.div(num, den)
        };
        terms.push(term);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / masked.len() as f64)
}

/// `λ·ce + (1 − λ)·inv`.
pub fn dual_loss(ce: f64, inv: f64, lambda: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&lambda), Argument, "lambda {lambda} outside [0, 1]");
    Ok(lambda * ce + (1.0 - lambda) * inv)
}

/// Channel ids kept by duplicate `p` of draw `step`: `C_p` uniform on
/// `{min_keep, …, C}`, then a uniform subset of that size, from an
/// xorshift64* stream seeded by `(rng_seed, step, p)`.
pub fn sample_keep(channel_ids: &[usize], cfg: &InvariantConfig, step: u64, p: u64) -> Result<Vec<usize>> {
    let c = channel_ids.len();
    ensure!(c >= 2, Argument, "masked duplicates need at least two channels, got {c}");
    let lo = cfg.min_keep.min(c);
    let mut rng = XorShift64Star::new(derive_seed(cfg.rng_seed, &[step, p]));
    let c_p = lo + (rng.next() % (c - lo + 1) as u64) as usize;
    let mut ids = channel_ids.to_vec();
    for i in 0..c_p {
        let j = i + (rng.next() % (c - i) as u64) as usize;
        ids.swap(i, j);
    }
    let mut keep = ids[..c_p].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// `cfg.p` copies of `x`, each keeping a random channel subset.
pub fn make_masked_duplicates(x: &MultichannelSignal, cfg: &InvariantConfig, step: u64) -> Result<Vec<MultichannelSignal>> {
    cfg.validate()?;
    (0..cfg.p as u64)
        .map(|p| mask_channels(x, &sample_keep(x.channel_ids(), cfg, step, p)?))
        .collect()
}

/// Adam with bias correction; moments are kept per tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update with `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        ensure!(grads.len() == self.m.len(), Argument, "{} gradients for {} tensors", grads.len(), self.m.len());
        for (g, (name, p)) in grads.iter().zip(store.iter()) {
            ensure!(g.shape() == p.shape(), Argument, "gradient shape mismatch for {name}");
            ensure!(g.all_finite(), Numeric, "non-finite gradient for {name}");
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / b1t;
                let v_hat = v[j] / b2t;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// A multichannel segment with labels at the label rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSegment {
    pub signal: MultichannelSignal,
    pub labels: FrameLabels,
}

/// Random-access source of labelled segments.
pub trait Dataset {
    fn len(&self) -> usize;

    fn segment(&self, i: usize) -> Result<LabelledSegment>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for ToyDataset {
    fn len(&self) -> usize {
        ToyDataset::len(self)
    }

    fn segment(&self, i: usize) -> Result<LabelledSegment> {
        let s = self.get(i)?;
        Ok(LabelledSegment {
            signal: s.signal,
            labels: s.labels,
        })
    }
}

impl Dataset for Vec<LabelledSegment> {
    fn len(&self) -> usize {
        <[LabelledSegment]>::len(self)
    }

    fn segment(&self, i: usize) -> Result<LabelledSegment> {
        self.get(i).cloned().ok_or_else(|| Error::Range(format!("segment {i} out of range")))
    }
}

/// Restricts another dataset to a subset of its indices.
pub struct Subset<'a, D: Dataset + ?Sized> {
    pub inner: &'a D,
    pub indices: Vec<usize>,
}

impl<D: Dataset + ?Sized> Dataset for Subset<'_, D> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn segment(&self, i: usize) -> Result<LabelledSegment> {
        let j = *self.indices.get(i).ok_or_else(|| Error::Range(format!("segment {i} out of range")))?;
        self.inner.segment(j)
    }
}

/// Labels aligned to the model's frames.
pub fn align_labels(labels: &FrameLabels, timing: FrameTiming, n_frames: usize) -> Vec<usize> {
    let last = labels.len().saturating_sub(1);
    (0..n_frames)
        .map(|i| labels.labels[timing.label_index(i, labels.rate).min(last)] as usize)
        .collect()
}

/// A `segment_s` window of `seg` on the label grid, at a random offset when
/// the segment is longer.
pub fn crop(seg: &LabelledSegment, segment_s: f64, rng: &mut impl Rng) -> Result<LabelledSegment> {
    let dur = seg.signal.duration_s();
    if dur <= segment_s + 1e-9 {
        return Ok(seg.clone());
    }
    let slots = ((dur - segment_s) * seg.labels.rate).floor() as usize;
    let start = rng.gen_range(0..=slots);
    let start_s = start as f64 / seg.labels.rate;
    let signal = slice_segment(&seg.signal, start_s, segment_s)?;
    let n = (segment_s * seg.labels.rate).round() as usize;
    let end = (start + n).min(seg.labels.len());
    Ok(LabelledSegment {
        signal,
        labels: FrameLabels::new(seg.labels.labels[start..end].to_vec(), seg.labels.rate),
    })
}

/// Losses of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub ce: f64,
    /// Absent without an invariant objective.
    pub inv: Option<f64>,
}

/// Batch loss and gradients (store order). `keys` gives the masking key of
/// each segment.
pub fn loss_and_grads(
    model: &Model,
    batch: &[LabelledSegment],
    icfg: Option<&InvariantConfig>,
    keys: &[u64],
) -> Result<(LossStats, Vec<Tensor>)> {
    ensure!(!batch.is_empty() && keys.len() == batch.len(), Argument, "empty batch or key count mismatch");
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let timing = model.cfg.frontend.timing();
    let (mut ces, mut invs, mut losses) = (vec![], vec![], vec![]);
    for (seg, &key) in batch.iter().zip(keys) {
        let prep = model.prepare(&seg.signal)?;
        let (feats, logits) = model.forward(&mut tape, &vars, &prep);
        let y = align_labels(&seg.labels, timing, prep.num_frames());
        let ce = tape.cross_entropy(logits, &y);
        ces.push(ce);
        let loss = match icfg {
            Some(ic) => {
                let mut masked = Vec::with_capacity(ic.p);
                for dup in make_masked_duplicates(&seg.signal, ic, key)? {
                    let p = model.prepare(&dup)?;
                    masked.push(model.frontend_forward(&mut tape, &vars, &p));
                }
                let inv = invariant_loss_tape(&mut tape, feats, &masked, ic.cosine);
                invs.push(inv);
                let a = tape.scale(ce, ic.lambda);
                let b = tape.scale(inv, 1.0 - ic.lambda);
                tape.add(a, b)
            }
            None => ce,
        };
        losses.push(loss);
    }
    let mean = |tape: &mut Tape, xs: &[Var]| {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = tape.add(acc, x);
        }
        tape.scale(acc, 1.0 / xs.len() as f64)
    };
    let loss = mean(&mut tape, &losses);
    let value = |tape: &Tape, xs: &[Var]| xs.iter().map(|&v| tape.value(v).item()).sum::<f64>() / xs.len() as f64;
    let stats = LossStats {
        loss: tape.value(loss).item(),
        ce: value(&tape, &ces),
        inv: (!invs.is_empty()).then(|| value(&tape, &invs)),
    };
    if !stats.loss.is_finite() {
        return Err(Error::Numeric(format!("training diverged: loss {} (ce {})", stats.loss, stats.ce)));
    }
    let grads = tape.backward(loss)?;
    Ok((stats, vars.vars().iter().map(|&v| grads.get_or_zero(v)).collect()))
}

/// Frame-level evaluation of a model on whole segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub ce: f64,
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent reference class.
    pub majority_accuracy: f64,
    pub score: ScoreReport,
}

/// Evaluates on model frames with labels aligned as in training; `keep`
/// restricts the input channels.
pub fn evaluate(model: &Model, data: &dyn Dataset, keep: Option<&[usize]>) -> Result<EvalReport> {
    ensure!(!data.is_empty(), Argument, "evaluation set is empty");
    let timing = model.cfg.frontend.timing();
    let (mut refs, mut hyps) = (Vec::new(), Vec::new());
    let mut ce_sum = 0.0;
    for i in 0..data.len() {
        let seg = data.segment(i)?;
        let signal = match keep {
            Some(k) => mask_channels(&seg.signal, k)?,
            None => seg.signal,
        };
        let logits = model.logits(&signal)?;
        let y = align_labels(&seg.labels, timing, logits.nrows());
        let yl = FrameLabels::new(y.iter().map(|&v| v as u8).collect(), seg.labels.rate);
        ce_sum += cross_entropy(&logits, &yl)? * logits.nrows() as f64;
        hyps.extend(argmax_rows(&posteriors(&logits)));
        refs.extend(yl.labels);
    }
    let n = refs.len();
    let correct = refs.iter().zip(&hyps).filter(|(a, b)| a == b).count();
    let mut hist = [0usize; 3];
    refs.iter().for_each(|&r| hist[r as usize] += 1);
    let rate = data.segment(0)?.labels.rate;
    let score = score_labels(&FrameLabels::new(refs, rate), &FrameLabels::new(hyps, rate))?;
    Ok(EvalReport {
        frames: n,
        ce: ce_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        majority_accuracy: *hist.iter().max().unwrap() as f64 / n as f64,
        score,
    })
}

/// Validation OSD F1 (percent) with argmax decisions.
pub fn validation_f1(model: &Model, data: &dyn Dataset) -> Result<f64> {
    let r = evaluate(model, data, None)?;
    Ok(r.score.osd.f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        ce: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        inv: Option<f64>,
    },
    Epoch {
        epoch: usize,
        step: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_f1: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        best_f1: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model, or the last one without a validation set.
    pub model: Model,
    pub last: Model,
    pub history: Vec<LogRecord>,
    pub best_f1: Option<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Trains `model` with Adam; each step draws `batch_size` segments uniformly
/// (seeded by `(seed, step)`), crops them to `segment_s` and optionally adds
/// the invariant objective. After every epoch the validation OSD F1 is
/// computed; training stops after `patience` epochs without improvement.
/// Records are written to `log` as newline-delimited JSON.
pub fn train(
    mut model: Model,
    data: &dyn Dataset,
    val: Option<&dyn Dataset>,
    tcfg: &TrainConfig,
    icfg: Option<&InvariantConfig>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if let Some(ic) = icfg {
        ic.validate()?;
    }
    ensure!(!data.is_empty(), Argument, "training set is empty");
    let mut adam = Adam::new(tcfg.lr, &model.params);
    let mut history = Vec::new();
    let mut emit = |rec: LogRecord, history: &mut Vec<LogRecord>| -> Result<()> {
        writeln!(log, "{}", serde_json::to_string(&rec).expect("log record serialises"))
            .map_err(|e| Error::io("training log", e))?;
        history.push(rec);
        Ok(())
    };
    let (mut best, mut best_f1, mut stale) = (model.clone(), None::<f64>, 0usize);
    let mut step = 0usize;
    let mut stopped_early = false;
    for epoch in 0..tcfg.max_epochs {
        for _ in 0..tcfg.steps_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &[step as u64]));
            let mut batch = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let seg = data.segment(rng.gen_range(0..data.len()))?;
                batch.push(crop(&seg, tcfg.segment_s, &mut rng)?);
            }
            let keys: Vec<u64> = (0..tcfg.batch_size).map(|b| (step * tcfg.batch_size + b) as u64).collect();
            let (stats, grads) = loss_and_grads(&model, &batch, icfg, &keys)?;
            adam.step(&mut model.params, &grads)?;
            emit(
                LogRecord::Step {
                    step,
                    epoch,
                    loss: stats.loss,
                    ce: stats.ce,
                    inv: stats.inv,
                },
                &mut history,
            )?;
            step += 1;
        }
        let val_f1 = match val {
            Some(v) => Some(validation_f1(&model, v)?),
            None => None,
        };
        if let Some(f1) = val_f1 {
            if best_f1.map_or(true, |b| f1 > b) {
                best_f1 = Some(f1);
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        emit(
            LogRecord::Epoch {
                epoch,
                step,
                val_f1,
                best_f1,
            },
            &mut history,
        )?;
        if stale >= tcfg.patience {
            stopped_early = true;
            break;
        }
    }
    let best = if val.is_some() { best } else { model.clone() };
    Ok(TrainOutcome {
        model: best,
        last: model,
        history,
        best_f1,
        steps: step,
        stopped_early,
    })
}

/// Scores with only the channels in each keep set active.
pub fn mask_eval(model: &Model, data: &dyn Dataset, keep_sets: &[Vec<usize>]) -> Result<Vec<(Vec<usize>, EvalReport)>> {
    keep_sets
        .iter()
        .map(|k| Ok((k.clone(), evaluate(model, data, Some(k))?)))
        .collect()
}
