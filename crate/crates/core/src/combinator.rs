//! Self-attention channel combinators.
//!
//! Every variant estimates per-frame convex weights over channels with a
//! single-head attention block applied framewise:
//!
//! ```text
//! w[:, t] = softmax_c( softmax(Q Kᵀ / √D) · V )
//! ```
//!
//! where `Q`, `K` (`C × D`) and `V` (`C × 1`) are linear maps of the frame's
//! per-channel features. The real combinator sums `w · |Y|` over channels; the
//! complex ones split into a magnitude weight and a phase weight and sum
//! `w_mag·|Y|·exp(j(2π·w_φ + ∠Y))` over channels.
//!
//! All graphs are built on a [`Tape`] in frame-major `[T, C, ·]` layout. The
//! array functions below run the same graph with frozen parameters.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::spectral::{self, ComplexSpectrogram, EPS_LOG, EPS_STD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Linear query/key/value maps of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
}

const ATT_NAMES: [&str; 6] = ["wq", "bq", "wk", "bk", "wv", "bv"];

impl AttentionParams {
    /// Weights uniform in `±1/√k_in`, biases zero.
    pub fn init(k_in: usize, hidden: usize, n_values: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure!(k_in >= 1 && hidden >= 1 && n_values >= 1, Argument, "attention sizes must be positive");
        let bound = 1.0 / (k_in as f64).sqrt();
        let mut draw = |cols: usize| Array2::from_shape_fn((k_in, cols), |_| rng.gen_range(-bound..=bound));
        let wq = draw(hidden);
        let wk = draw(hidden);
        let wv = draw(n_values);
        Ok(AttentionParams {
            wq,
            bq: Array1::zeros(hidden),
            wk,
            bk: Array1::zeros(hidden),
            wv,
            bv: Array1::zeros(n_values),
        })
    }

    pub fn seeded(k_in: usize, hidden: usize, n_values: usize, seed: u64) -> Result<Self> {
        Self::init(k_in, hidden, n_values, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.wq.ncols()
    }

    pub fn n_values(&self) -> usize {
        self.wv.ncols()
    }

    pub fn num_scalars(&self) -> usize {
        self.wq.len() + self.bq.len() + self.wk.len() + self.bk.len() + self.wv.len() + self.bv.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, v) = (self.input_width(), self.hidden(), self.n_values());
        ensure!(
            self.wk.dim() == (k, d) && self.bq.len() == d && self.bk.len() == d && self.wv.nrows() == k && self.bv.len() == v,
            Argument,
            "inconsistent attention parameter shapes"
        );
        ensure!(
            self.tensors().iter().all(|t| t.all_finite()),
            Numeric,
            "attention parameters are not finite"
        );
        Ok(())
    }

    fn tensors(&self) -> [Tensor; 6] {
        [
            Tensor::from_array(&self.wq),
            Tensor::from_array(&self.bq),
            Tensor::from_array(&self.wk),
            Tensor::from_array(&self.bk),
            Tensor::from_array(&self.wv),
            Tensor::from_array(&self.bv),
        ]
    }

    /// Stores the six tensors as `{prefix}wq`, `{prefix}bq`, ...
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in ATT_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get2 = |n: &str| -> Result<Array2<f64>> {
            let t = store.require(&format!("{prefix}{n}"))?;
            ensure!(t.shape().len() == 2, Format, "{prefix}{n} must be 2-D");
            Ok(Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).unwrap())
        };
        let get1 = |n: &str| -> Result<Array1<f64>> {
            let t = store.require(&format!("{prefix}{n}"))?;
            ensure!(t.shape().len() == 1, Format, "{prefix}{n} must be 1-D");
            Ok(Array1::from(t.data().to_vec()))
        };
        let p = AttentionParams {
            wq: get2("wq")?,
            bq: get1("bq")?,
            wk: get2("wk")?,
            bk: get1("bk")?,
            wv: get2("wv")?,
            bv: get1("bv")?,
        };
        p.validate()?;
        Ok(p)
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        self.insert_into(&mut s, "");
        s
    }
}

/// Tape handles of an attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
}

impl AttentionVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        let v = |n: &str| bound.var(&format!("{prefix}{n}"));
        AttentionVars {
            wq: v("wq"),
            bq: v("bq"),
            wk: v("wk"),
            bk: v("bk"),
            wv: v("wv"),
            bv: v("bv"),
        }
    }
}

/// Framewise `softmax(QKᵀ/√D)·V` for `x: [T, C, K_in]`; returns `[T, C, n_values]`
/// before the channel softmax.
pub fn attention_values(tape: &mut Tape, x: Var, p: &AttentionVars) -> Var {
    let shape = tape.shape(x).to_vec();
    let (t_len, c_len, k_in) = (shape[0], shape[1], shape[2]);
    let d = tape.shape(p.wq)[1];
    let nv = tape.shape(p.wv)[1];
    let flat = tape.reshape(x, &[t_len * c_len, k_in]);
    let mut lin = |w: Var, b: Var, cols: usize| {
        let y = tape.matmul(flat, w);
        let y = tape.add_bias(y, b);
        tape.reshape(y, &[t_len, c_len, cols])
    };
    let q = lin(p.wq, p.bq, d);
    let k = lin(p.wk, p.bk, d);
    let v = lin(p.wv, p.bv, nv);
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let a = tape.softmax(s);
    tape.matmul(a, v)
}

/// Channel softmax of column `col` of `[T, C, n]` values, restricted to the
/// channel rows `[start, start + len)`; returns `[T, len]`.
pub fn channel_softmax(tape: &mut Tape, values: Var, col: usize, start: usize, len: usize) -> Var {
    let shape = tape.shape(values).to_vec();
    let v = tape.narrow(values, 2, col, 1);
    let v = tape.narrow(v, 1, start, len);
    let v = tape.reshape(v, &[shape[0], len]);
    tape.softmax(v)
}

/// `Σ_c w[t, c] · x[t, c, :]` for `w: [T, C]`, `x: [T, C, K]`; returns `[T, K]`.
pub fn weighted_sum(tape: &mut Tape, w: Var, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let (t_len, c_len, k) = (shape[0], shape[1], shape[2]);
    let w3 = tape.reshape(w, &[t_len, 1, c_len]);
    let y = tape.matmul(w3, x);
    tape.reshape(y, &[t_len, k])
}

/// Real and imaginary parts of `Σ_c w_mag·|Y|·exp(j(2π·w_φ + ∠Y))` for
/// constant `mag`, `phase: [T, C, K]` and weights `[T, C]`.
pub fn complex_combine(tape: &mut Tape, mag: Var, phase: Var, w_mag: Var, w_phi: Var) -> (Var, Var) {
    let k = tape.shape(mag)[2];
    let shift = tape.broadcast_last(w_phi, k);
    let shift = tape.scale(shift, 2.0 * PI);
    let theta = tape.add(shift, phase);
    let cos = tape.cos(theta);
    let sin = tape.sin(theta);
    let re = tape.mul(mag, cos);
    let im = tape.mul(mag, sin);
    (weighted_sum(tape, w_mag, re), weighted_sum(tape, w_mag, im))
}

/// Which pair of STFT parts feeds the complex combinators' attention blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplexParts {
    /// MVN of log-magnitude and MVN of the principal angle.
    #[default]
    MagPhase,
    /// MVN of the real and imaginary parts.
    ReIm,
}

/// How the implicit combinator concatenates its two inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcLayout {
    /// `2C` tokens of width `K`; one value column, split into the two halves.
    #[default]
    ChannelAxis,
    /// `C` tokens of width `2K`; two value columns.
    FeatureAxis,
}

impl IcLayout {
    pub fn input_width(self, k: usize) -> usize {
        match self {
            IcLayout::ChannelAxis => k,
            IcLayout::FeatureAxis => 2 * k,
        }
    }

    pub fn n_values(self) -> usize {
        match self {
            IcLayout::ChannelAxis => 1,
            IcLayout::FeatureAxis => 2,
        }
    }
}

/// `(w_mag, w_φ)`, each `[T, C]`, from the implicit combinator's single block.
pub fn implicit_weights(tape: &mut Tape, a: Var, b: Var, p: &AttentionVars, layout: IcLayout) -> (Var, Var) {
    let c_len = tape.shape(a)[1];
    match layout {
        IcLayout::ChannelAxis => {
            let x = tape.concat(&[a, b], 1);
            let v = attention_values(tape, x, p);
            (
                channel_softmax(tape, v, 0, 0, c_len),
                channel_softmax(tape, v, 0, c_len, c_len),
            )
        }
        IcLayout::FeatureAxis => {
            let x = tape.concat(&[a, b], 2);
            let v = attention_values(tape, x, p);
            (
                channel_softmax(tape, v, 0, 0, c_len),
                channel_softmax(tape, v, 1, 0, c_len),
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Real,
    Magnitude,
    Phase,
}

/// Convex per-frame channel weights, stored `C × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationWeights {
    pub w: Array2<f64>,
    pub kind: WeightKind,
}

impl CombinationWeights {
    pub fn num_channels(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combinator {
    SingleChannel,
    Sacc,
    SaccAnalytic,
    EcSacc,
    IcSacc,
    Mvdr,
}

/// One combined `T × K` representation; real combinators leave the imaginary
/// part at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedSpectrogram {
    pub values: Array2<Complex64>,
    pub provenance: Combinator,
    /// Weights that produced `values`, when the combinator has any.
    pub weights: Vec<CombinationWeights>,
}

impl CombinedSpectrogram {
    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|z| z.norm())
    }
}

/// Reorders `C × T × K` into a frame-major `[T, C, K]` tensor.
pub fn frame_major(a: &Array3<f64>) -> Tensor {
    let p = a.view().permuted_axes([1, 0, 2]);
    Tensor::new(&[p.shape()[0], p.shape()[1], p.shape()[2]], p.iter().copied().collect()).unwrap()
}

fn weights_from(t: &Tensor, kind: WeightKind) -> CombinationWeights {
    let (t_len, c_len) = (t.shape()[0], t.shape()[1]);
    let w = Array2::from_shape_fn((c_len, t_len), |(c, tt)| t.data()[tt * c_len + c]);
    CombinationWeights { w, kind }
}

fn real_rows(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).unwrap()
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Combination weights from `C × T × K_in` features.
pub fn attention_weights(feats: &Array3<f64>, p: &AttentionParams) -> Result<CombinationWeights> {
    p.validate()?;
    let (c_len, _, k_in) = feats.dim();
    ensure!(c_len >= 1, Argument, "need at least one channel");
    ensure!(k_in == p.input_width(), Argument, "feature width {k_in} != attention input width {}", p.input_width());
    ensure!(p.n_values() == 1, Argument, "attention_weights needs a single value column");
    let mut tape = Tape::new();
    let pv = AttentionVars::from_bound(&p.store().bind_frozen(&mut tape), "");
    let x = tape.constant(frame_major(feats));
    let v = attention_values(&mut tape, x, &pv);
    let w = channel_softmax(&mut tape, v, 0, 0, c_len);
    check_finite(&tape, w, "combination weights")?;
    Ok(weights_from(tape.value(w), WeightKind::Real))
}

/// `Y_att[t, k] = Σ_c w[c, t]·mag[c, t, k]`.
pub fn combine_magnitude(w: &CombinationWeights, mag: &Array3<f64>) -> Result<CombinedSpectrogram> {
    let (c_len, t_len, k) = mag.dim();
    ensure!(w.kind == WeightKind::Real, Argument, "combine_magnitude needs real weights");
    ensure!(w.w.dim() == (c_len, t_len), Argument, "weights {:?} do not match spectrogram {c_len}×{t_len}", w.w.dim());
    let mut out = Array2::zeros((t_len, k));
    for t in 0..t_len {
        for c in 0..c_len {
            let wc = w.w[[c, t]];
            for kk in 0..k {
                out[[t, kk]] += wc * mag[[c, t, kk]];
            }
        }
    }
    Ok(CombinedSpectrogram {
        values: out.mapv(|v| Complex64::new(v, 0.0)),
        provenance: Combinator::Sacc,
        weights: vec![w.clone()],
    })
}

/// MVN'd attention inputs derived from `Y`, each `C × T × K`.
pub fn attention_inputs(y: &ComplexSpectrogram, parts: ComplexParts) -> Result<(Array3<f64>, Array3<f64>)> {
    match parts {
        ComplexParts::MagPhase => Ok((
            spectral::mvn(&y.magnitude().mapv(|v| (v + EPS_LOG).ln()))?,
            spectral::mvn(&y.phase())?,
        )),
        ComplexParts::ReIm => Ok((
            spectral::mvn(&y.bins.mapv(|z| z.re))?,
            spectral::mvn(&y.bins.mapv(|z| z.im))?,
        )),
    }
}

/// The real STFT combinator: weights from MVN(log|Y|), applied to `|Y|`.
pub fn sacc_combine(y: &ComplexSpectrogram, p: &AttentionParams) -> Result<CombinedSpectrogram> {
    let mag = y.magnitude();
    let feats = spectral::mvn(&mag.mapv(|v| (v + EPS_LOG).ln()))?;
    let w = attention_weights(&feats, p)?;
    combine_magnitude(&w, &mag)
}

fn complex_result(
    tape: &Tape,
    re: Var,
    im: Var,
    w_mag: Var,
    w_phi: Var,
    provenance: Combinator,
) -> Result<CombinedSpectrogram> {
    check_finite(tape, re, "combined spectrogram")?;
    check_finite(tape, im, "combined spectrogram")?;
    let (re, im) = (real_rows(tape.value(re)), real_rows(tape.value(im)));
    Ok(CombinedSpectrogram {
        values: Array2::from_shape_fn(re.dim(), |ix| Complex64::new(re[ix], im[ix])),
        provenance,
        weights: vec![
            weights_from(tape.value(w_mag), WeightKind::Magnitude),
            weights_from(tape.value(w_phi), WeightKind::Phase),
        ],
    })
}

/// Explicit complex combinator: independent attention blocks for magnitude
/// and phase weights.
pub fn ecsacc_combine(
    y: &ComplexSpectrogram,
    p_mag: &AttentionParams,
    p_phi: &AttentionParams,
    parts: ComplexParts,
) -> Result<CombinedSpectrogram> {
    p_mag.validate()?;
    p_phi.validate()?;
    let k = y.num_bins();
    for p in [p_mag, p_phi] {
        ensure!(p.input_width() == k && p.n_values() == 1, Argument, "attention block must take {k} inputs and emit one value");
    }
    let (a, b) = attention_inputs(y, parts)?;
    let mut tape = Tape::new();
    let pm = AttentionVars::from_bound(&p_mag.store().bind_frozen(&mut tape), "");
    let pp = AttentionVars::from_bound(&p_phi.store().bind_frozen(&mut tape), "");
    let (mag, phase, a, b) = (
        tape.constant(frame_major(&y.magnitude())),
        tape.constant(frame_major(&y.phase())),
        tape.constant(frame_major(&a)),
        tape.constant(frame_major(&b)),
    );
    let c_len = y.num_channels();
    let va = attention_values(&mut tape, a, &pm);
    let w_mag = channel_softmax(&mut tape, va, 0, 0, c_len);
    let vb = attention_values(&mut tape, b, &pp);
    let w_phi = channel_softmax(&mut tape, vb, 0, 0, c_len);
    let (re, im) = complex_combine(&mut tape, mag, phase, w_mag, w_phi);
    complex_result(&tape, re, im, w_mag, w_phi, Combinator::EcSacc)
}

/// Implicit complex combinator: one attention block over the concatenated
/// inputs emits both weight kinds.
pub fn icsacc_combine(
    y: &ComplexSpectrogram,
    p: &AttentionParams,
    layout: IcLayout,
    parts: ComplexParts,
) -> Result<CombinedSpectrogram> {
    p.validate()?;
    let k = y.num_bins();
    ensure!(
        p.input_width() == layout.input_width(k) && p.n_values() == layout.n_values(),
        Argument,
        "attention block must take {} inputs and emit {} values for the {layout:?} layout",
        layout.input_width(k),
        layout.n_values()
    );
    let (a, b) = attention_inputs(y, parts)?;
    let mut tape = Tape::new();
    let pv = AttentionVars::from_bound(&p.store().bind_frozen(&mut tape), "");
    let (mag, phase, a, b) = (
        tape.constant(frame_major(&y.magnitude())),
        tape.constant(frame_major(&y.phase())),
        tape.constant(frame_major(&a)),
        tape.constant(frame_major(&b)),
    );
    let (w_mag, w_phi) = implicit_weights(&mut tape, a, b, &pv, layout);
    let (re, im) = complex_combine(&mut tape, mag, phase, w_mag, w_phi);
    complex_result(&tape, re, im, w_mag, w_phi, Combinator::IcSacc)
}

/// Log-mel features of a combined spectrogram, or for the analytic
/// combinator the real and imaginary parts side by side.
pub fn frontend_features(combined: &CombinedSpectrogram, n_mels: usize, rate: u32) -> Result<Array2<f64>> {
    let v = &combined.values;
    if combined.provenance == Combinator::SaccAnalytic {
        let (t_len, nf) = v.dim();
        return Ok(Array2::from_shape_fn((t_len, 2 * nf), |(t, j)| {
            if j < nf {
                v[[t, j]].re
            } else {
                v[[t, j - nf]].im
            }
        }));
    }
    let mel = spectral::mel_project(combined.magnitude().view(), n_mels, rate)?;
    Ok(mel.mapv(|x| (x + EPS_LOG).ln()))
}

/// Tape version of MVN with the spectral module's floor.
pub fn mvn_tape(tape: &mut Tape, x: Var) -> Var {
    tape.mvn(x, EPS_STD)
}
