//! Front end plus TCN as one trainable model.
//!
//! A segment is first turned into [`Prepared`] inputs, everything that does
//! not depend on trainable parameters (spectra, MVN'd attention inputs,
//! framed samples). [`Model::forward`] then records the parameter-dependent
//! part on a tape and returns both the front-end features and the logits.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::beamform::{cdr_mask, mvdr, ArrayGeometry};
use crate::combinator::{
    attention_inputs, attention_values, channel_softmax, complex_combine, frame_major, implicit_weights,
    weighted_sum, AttentionParams, AttentionVars, CombinationWeights, ComplexParts, IcLayout, WeightKind,
};
use crate::error::{ensure, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::derive_seed;
use crate::segeval::{sliding_infer, FrameLabels, FrameTiming, SlidingConfig};
use crate::seqmodel::{posteriors, tcn_forward, tcn_init, TcnConfig};
use crate::signal::MultichannelSignal;
use crate::spectral::{
    frame_matrix, hilbert_matrix, mel_filterbank, mvn, stft, AnalyticFilterBank, StftConfig, EPS_LOG, EPS_STD,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontendKind {
    /// Log-mel of the first channel (single distant microphone).
    Stft,
    Sacc,
    /// SACC over learnable analytic filters.
    Analytic,
    Ecsacc,
    Icsacc,
    /// CDR-masked MVDR followed by log-mel.
    Mvdr,
}

impl FrontendKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, FrontendKind::Stft | FrontendKind::Mvdr)
    }
}

impl std::str::FromStr for FrontendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Argument(format!("unknown front end {s:?}")))
    }
}

fn default_rate() -> u32 {
    16000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub kind: FrontendKind,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default = "FrontendConfig::default_n_mels")]
    pub n_mels: usize,
    /// Attention hidden size.
    #[serde(default = "FrontendConfig::default_hidden")]
    pub hidden: usize,
    #[serde(default = "FrontendConfig::default_n_filters")]
    pub n_filters: usize,
    #[serde(default = "FrontendConfig::default_filter_len")]
    pub filter_len: usize,
    #[serde(default = "FrontendConfig::default_filter_stride")]
    pub filter_stride: usize,
    #[serde(default)]
    pub parts: ComplexParts,
    #[serde(default)]
    pub ic_layout: IcLayout,
    /// Needed by the MVDR front end only.
    #[serde(default)]
    pub geometry: Option<ArrayGeometry>,
}

impl FrontendConfig {
    fn default_n_mels() -> usize {
        64
    }

    fn default_hidden() -> usize {
        256
    }

    fn default_n_filters() -> usize {
        32
    }

    fn default_filter_len() -> usize {
        400
    }

    fn default_filter_stride() -> usize {
        160
    }

    pub fn new(kind: FrontendKind) -> Self {
        FrontendConfig {
            kind,
            sample_rate: default_rate(),
            stft: StftConfig::default(),
            n_mels: Self::default_n_mels(),
            hidden: Self::default_hidden(),
            n_filters: Self::default_n_filters(),
            filter_len: Self::default_filter_len(),
            filter_stride: Self::default_filter_stride(),
            parts: ComplexParts::default(),
            ic_layout: IcLayout::default(),
            geometry: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate(self.sample_rate)?;
        ensure!(self.n_mels >= 1 && self.n_mels <= self.stft.num_bins(), Argument, "n_mels out of range");
        ensure!(self.hidden >= 1, Argument, "attention hidden size must be positive");
        if self.kind == FrontendKind::Analytic {
            ensure!(self.n_filters >= 1 && self.filter_stride >= 1, Argument, "invalid analytic filter bank");
            ensure!(self.filter_len >= 2 && self.filter_len % 2 == 0, Argument, "filter length must be even");
        }
        if self.kind == FrontendKind::Mvdr {
            ensure!(self.geometry.is_some(), Argument, "the MVDR front end needs an array geometry");
        }
        Ok(())
    }

    /// Width of the features handed to the TCN.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            FrontendKind::Analytic => 2 * self.n_filters,
            _ => self.n_mels,
        }
    }

    /// Frame timing of the features.
    pub fn timing(&self) -> FrameTiming {
        let rate = self.sample_rate as f64;
        match self.kind {
            FrontendKind::Analytic => FrameTiming {
                hop_s: self.filter_stride as f64 / rate,
                win_s: self.filter_len as f64 / rate,
            },
            _ => FrameTiming {
                hop_s: self.stft.hop_samples(self.sample_rate) as f64 / rate,
                win_s: self.stft.win_samples(self.sample_rate) as f64 / rate,
            },
        }
    }

    /// Attention blocks as `(name prefix, input width, value columns)`.
    fn attention_blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let k = self.stft.num_bins();
        match self.kind {
            FrontendKind::Stft | FrontendKind::Mvdr => vec![],
            FrontendKind::Sacc => vec![("frontend.att.", k, 1)],
            FrontendKind::Analytic => vec![("frontend.att.", 2 * self.n_filters, 1)],
            FrontendKind::Ecsacc => vec![("frontend.mag.", k, 1), ("frontend.phi.", k, 1)],
            FrontendKind::Icsacc => vec![("frontend.att.", self.ic_layout.input_width(k), self.ic_layout.n_values())],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub tcn: TcnConfig,
}

impl ModelConfig {
    /// Pairs a front end with a TCN, fixing the TCN input width.
    pub fn new(frontend: FrontendConfig, mut tcn: TcnConfig) -> Self {
        tcn.input_dim = frontend.feature_dim();
        ModelConfig { frontend, tcn }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.tcn.validate()?;
        ensure!(
            self.tcn.input_dim == self.frontend.feature_dim(),
            Argument,
            "TCN input width {} != front-end feature width {}",
            self.tcn.input_dim,
            self.frontend.feature_dim()
        );
        Ok(())
    }
}

/// Parameter-independent inputs of one segment.
#[derive(Clone, Debug, PartialEq)]
pub enum Prepared {
    /// Final features `[T, F]` of a front end without parameters.
    Fixed(Tensor),
    /// Magnitudes and MVN(log-magnitude), both `[T, C, K]`.
    Sacc { mag: Tensor, att: Tensor },
    /// Frames of every channel, `[C·T, L]`.
    Analytic { frames: Tensor, c_len: usize, t_len: usize },
    /// Magnitude, phase and the two MVN'd attention inputs, all `[T, C, K]`.
    Complex { mag: Tensor, phase: Tensor, a: Tensor, b: Tensor },
}

impl Prepared {
    pub fn num_frames(&self) -> usize {
        match self {
            Prepared::Fixed(t) => t.shape()[0],
            Prepared::Sacc { mag, .. } | Prepared::Complex { mag, .. } => mag.shape()[0],
            Prepared::Analytic { t_len, .. } => *t_len,
        }
    }
}

fn log_mel(mag: &Array2<f64>, fb: &Array2<f64>) -> Array2<f64> {
    mag.dot(fb).mapv(|v| (v + EPS_LOG).ln())
}

/// Constant tensors shared by every forward pass of a model.
#[derive(Clone, Debug, PartialEq)]
struct Consts {
    mel: Tensor,
    hilbert: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    seed: u64,
}

const CHECKPOINT_FORMAT: &str = "distvad-model-1";

/// A front end and a TCN with their parameters under `frontend.` and `tcn.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
    consts: Consts,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let f = &cfg.frontend;
        let mut params = ParamStore::new();
        for (i, (prefix, width, nv)) in f.attention_blocks().into_iter().enumerate() {
            AttentionParams::seeded(width, f.hidden, nv, derive_seed(seed, &[1, i as u64]))?.insert_into(&mut params, prefix);
        }
        if f.kind == FrontendKind::Analytic {
            let fb = AnalyticFilterBank::init(f.n_filters, f.filter_len, f.filter_stride, derive_seed(seed, &[2]))?;
            params.insert("frontend.fb.real_ir", Tensor::from_array(fb.real_ir()));
        }
        let tcn = tcn_init(&cfg.tcn, derive_seed(seed, &[3]))?;
        params.extend_prefixed("tcn.", &tcn.store);
        Self::with_params(cfg, params, seed)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn with_params(cfg: ModelConfig, params: ParamStore, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let consts = Consts {
            mel: Tensor::from_array(&mel_filterbank(cfg.frontend.n_mels, cfg.frontend.stft.num_bins(), cfg.frontend.sample_rate)?),
            hilbert: if cfg.frontend.kind == FrontendKind::Analytic {
                Some(Tensor::from_array(&hilbert_matrix(cfg.frontend.filter_len)?))
            } else {
                None
            },
        };
        let model = Model { cfg, params, seed, consts };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let f = &self.cfg.frontend;
        let mut expected: Vec<(String, Vec<usize>)> = vec![];
        for (prefix, width, nv) in f.attention_blocks() {
            for (n, shape) in [
                ("wq", vec![width, f.hidden]),
                ("bq", vec![f.hidden]),
                ("wk", vec![width, f.hidden]),
                ("bk", vec![f.hidden]),
                ("wv", vec![width, nv]),
                ("bv", vec![nv]),
            ] {
                expected.push((format!("{prefix}{n}"), shape));
            }
        }
        if f.kind == FrontendKind::Analytic {
            expected.push(("frontend.fb.real_ir".into(), vec![f.n_filters, f.filter_len]));
        }
        let tcn = tcn_init(&self.cfg.tcn, 0)?;
        for (n, t) in tcn.store.iter() {
            expected.push((format!("tcn.{n}"), t.shape().to_vec()));
        }
        ensure!(
            expected.len() == self.params.len(),
            Format,
            "model has {} tensors, expected {}",
            self.params.len(),
            expected.len()
        );
        for (name, shape) in expected {
            let t = self.params.require(&name)?;
            ensure!(t.shape() == shape.as_slice(), Format, "{name}: shape {:?}, expected {shape:?}", t.shape());
            ensure!(t.all_finite(), Numeric, "{name} has non-finite entries");
        }
        Ok(())
    }

    pub fn num_frontend_scalars(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("frontend.")).map(|(_, t)| t.len()).sum()
    }

    /// Current analytic filter bank (with its Hilbert pairs), if any.
    pub fn filter_bank(&self) -> Result<Option<AnalyticFilterBank>> {
        match self.params.get("frontend.fb.real_ir") {
            None => Ok(None),
            Some(t) => {
                let real = Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).unwrap();
                Ok(Some(AnalyticFilterBank::from_real(real, self.cfg.frontend.filter_stride)?))
            }
        }
    }

    /// Parameter-independent inputs for `signal`.
    pub fn prepare(&self, signal: &MultichannelSignal) -> Result<Prepared> {
        prepare(&self.cfg.frontend, signal)
    }

    /// Records the model on `tape`; returns `(features [T, F], logits [T, 3])`.
    pub fn forward(&self, tape: &mut Tape, vars: &Bound, prep: &Prepared) -> (Var, Var) {
        let feats = self.frontend_forward(tape, vars, prep);
        let logits = tcn_forward(tape, &self.cfg.tcn, vars, "tcn.", feats);
        (feats, logits)
    }

    /// Records only the front end on `tape`.
    pub fn frontend_forward(&self, tape: &mut Tape, vars: &Bound, prep: &Prepared) -> Var {
        self.frontend_graph(tape, vars, prep).0
    }

    /// Combination weights the front end applies to `signal`: one matrix for
    /// real combinators, magnitude and phase weights for complex ones, none
    /// for fixed front ends.
    pub fn combination_weights(&self, signal: &MultichannelSignal) -> Result<Vec<CombinationWeights>> {
        let prep = self.prepare(signal)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (_, weights) = self.frontend_graph(&mut tape, &vars, &prep);
        weights
            .into_iter()
            .map(|(w, kind)| {
                let t = tape.value(w);
                ensure!(t.all_finite(), Numeric, "non-finite combination weights");
                let (t_len, c_len) = (t.shape()[0], t.shape()[1]);
                let w = Array2::from_shape_fn((c_len, t_len), |(c, tt)| t.data()[tt * c_len + c]);
                Ok(CombinationWeights { w, kind })
            })
            .collect()
    }

    fn frontend_graph(&self, tape: &mut Tape, vars: &Bound, prep: &Prepared) -> (Var, Vec<(Var, WeightKind)>) {
        let f = &self.cfg.frontend;
        let log_mel = |tape: &mut Tape, mag: Var| {
            let mel = tape.constant(self.consts.mel.clone());
            let m = tape.matmul(mag, mel);
            tape.log(m, EPS_LOG)
        };
        match prep {
            Prepared::Fixed(x) => (tape.constant(x.clone()), vec![]),
            Prepared::Sacc { mag, att } => {
                let p = AttentionVars::from_bound(vars, "frontend.att.");
                let c_len = mag.shape()[1];
                let (mag, att) = (tape.constant(mag.clone()), tape.constant(att.clone()));
                let v = attention_values(tape, att, &p);
                let w = channel_softmax(tape, v, 0, 0, c_len);
                let y = weighted_sum(tape, w, mag);
                (log_mel(tape, y), vec![(w, WeightKind::Real)])
            }
            Prepared::Analytic { frames, c_len, t_len } => {
                let real = vars.var("frontend.fb.real_ir");
                let h = tape.constant(self.consts.hilbert.clone().expect("analytic model without Hilbert map"));
                let imag = tape.matmul_nt(real, h);
                let frames = tape.constant(frames.clone());
                let re = tape.matmul_nt(frames, real);
                let im = tape.matmul_nt(frames, imag);
                let both = tape.concat(&[re, im], 1);
                let both = tape.reshape(both, &[*c_len, *t_len, 2 * f.n_filters]);
                let both = tape.swap_axes01(both);
                let att = tape.mvn(both, EPS_STD);
                let p = AttentionVars::from_bound(vars, "frontend.att.");
                let v = attention_values(tape, att, &p);
                let w = channel_softmax(tape, v, 0, 0, *c_len);
                (weighted_sum(tape, w, both), vec![(w, WeightKind::Real)])
            }
            Prepared::Complex { mag, phase, a, b } => {
                let c_len = mag.shape()[1];
                let (mag, phase, a, b) = (
                    tape.constant(mag.clone()),
                    tape.constant(phase.clone()),
                    tape.constant(a.clone()),
                    tape.constant(b.clone()),
                );
                let (w_mag, w_phi) = if f.kind == FrontendKind::Ecsacc {
                    let pm = AttentionVars::from_bound(vars, "frontend.mag.");
                    let pp = AttentionVars::from_bound(vars, "frontend.phi.");
                    let va = attention_values(tape, a, &pm);
                    let vb = attention_values(tape, b, &pp);
                    (channel_softmax(tape, va, 0, 0, c_len), channel_softmax(tape, vb, 0, 0, c_len))
                } else {
                    let p = AttentionVars::from_bound(vars, "frontend.att.");
                    implicit_weights(tape, a, b, &p, f.ic_layout)
                };
                let (re, im) = complex_combine(tape, mag, phase, w_mag, w_phi);
                let y = tape.complex_abs(re, im);
                (log_mel(tape, y), vec![(w_mag, WeightKind::Magnitude), (w_phi, WeightKind::Phase)])
            }
        }
    }

    /// Front-end features `T × F` with frozen parameters.
    pub fn features(&self, signal: &MultichannelSignal) -> Result<Array2<f64>> {
        let prep = self.prepare(signal)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x = self.frontend_forward(&mut tape, &vars, &prep);
        to_array2(tape.value(x))
    }

    /// Logits `T × 3` with frozen parameters.
    pub fn logits(&self, signal: &MultichannelSignal) -> Result<Array2<f64>> {
        let prep = self.prepare(signal)?;
        self.logits_prepared(&prep)
    }

    pub fn logits_prepared(&self, prep: &Prepared) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let (_, logits) = self.forward(&mut tape, &vars, prep);
        to_array2(tape.value(logits))
    }

    pub fn posteriors(&self, signal: &MultichannelSignal) -> Result<Array2<f64>> {
        Ok(posteriors(&self.logits(signal)?))
    }

    /// Frame labels at the label rate from overlapping windows.
    pub fn infer(&self, signal: &MultichannelSignal, cfg: &SlidingConfig) -> Result<FrameLabels> {
        sliding_infer(signal, cfg, self.cfg.frontend.timing(), |w| self.posteriors(w))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.cfg.clone(),
            seed: self.seed,
        };
        self.params.save(path, &serde_json::to_string(&meta).expect("config serialises"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let (params, meta) = ParamStore::load(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        ensure!(meta.format == CHECKPOINT_FORMAT, Format, "unsupported checkpoint format {:?}", meta.format);
        Self::with_params(meta.config, params, meta.seed)
    }
}

fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    ensure!(t.all_finite(), Numeric, "non-finite model output");
    Ok(Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).unwrap())
}

/// Parameter-independent inputs of a front end for `signal`.
pub fn prepare(f: &FrontendConfig, signal: &MultichannelSignal) -> Result<Prepared> {
    f.validate()?;
    signal.require_rate(f.sample_rate)?;
    let fb_mel = || mel_filterbank(f.n_mels, f.stft.num_bins(), f.sample_rate);
    match f.kind {
        FrontendKind::Stft => {
            let y = stft(signal, &f.stft)?;
            let mag = y.bins.index_axis(ndarray::Axis(0), 0).mapv(|z| z.norm());
            Ok(Prepared::Fixed(Tensor::from_array(&log_mel(&mag, &fb_mel()?))))
        }
        FrontendKind::Mvdr => {
            let geom = f.geometry.as_ref().expect("validated").subset(signal.channel_ids())?;
            let y = stft(signal, &f.stft)?;
            let out = mvdr(&y, &cdr_mask(&y, &geom)?)?;
            Ok(Prepared::Fixed(Tensor::from_array(&log_mel(&out.combined.magnitude(), &fb_mel()?))))
        }
        FrontendKind::Sacc => {
            let y = stft(signal, &f.stft)?;
            let mag = y.magnitude();
            let att = mvn(&mag.mapv(|v| (v + EPS_LOG).ln()))?;
            Ok(Prepared::Sacc {
                mag: frame_major(&mag),
                att: frame_major(&att),
            })
        }
        FrontendKind::Ecsacc | FrontendKind::Icsacc => {
            let y = stft(signal, &f.stft)?;
            let (a, b) = attention_inputs(&y, f.parts)?;
            Ok(Prepared::Complex {
                mag: frame_major(&y.magnitude()),
                phase: frame_major(&y.phase()),
                a: frame_major(&a),
                b: frame_major(&b),
            })
        }
        FrontendKind::Analytic => {
            let frames = frame_matrix(signal, f.filter_len, f.filter_stride)?;
            let c_len = signal.num_channels();
            let t_len = frames.nrows() / c_len;
            ensure!(t_len >= 2, Range, "analytic front end needs at least two frames");
            Ok(Prepared::Analytic {
                frames: Tensor::from_array(&frames),
                c_len,
                t_len,
            })
        }
    }
}

/// Front-end features without a model, for fixed front ends or freshly
/// initialised trainable ones.
pub fn features_with_init(f: &FrontendConfig, signal: &MultichannelSignal, seed: u64) -> Result<Array2<f64>> {
    let cfg = ModelConfig::new(f.clone(), TcnConfig { bottleneck: 1, hidden: 1, layers_per_block: 1, blocks: 1, kernel: 1, ..TcnConfig::default() });
    Model::init(cfg, seed)?.features(signal)
}

/// Array view of a `[T, C, K]` tape tensor as `C × T × K`.
pub fn channel_major(t: &Tensor) -> Array3<f64> {
    let s = t.shape();
    let (t_len, c_len, k) = (s[0], s[1], s[2]);
    Array3::from_shape_fn((c_len, t_len, k), |(c, tt, kk)| t.data()[(tt * c_len + c) * k + kk])
}
