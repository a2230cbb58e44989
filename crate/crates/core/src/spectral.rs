//! Time-frequency analysis: framed STFT, HTK mel projection, log compression,
//! per-bin mean/variance normalisation and the learnable analytic filterbank.
//!
//! Frames are left aligned with no centre padding, so frame `t` covers
//! samples `[t·H, t·H + W)` and `T = ⌊(N − W)/H⌋ + 1`.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::signal::MultichannelSignal;

/// Offset added before taking logarithms.
pub const EPS_LOG: f64 = 1e-8;
/// Floor added to the standard deviation in [`mvn`].
pub const EPS_STD: f64 = 1e-6;
/// Analytic filter stride at 16 kHz (10 ms).
pub const DEFAULT_FB_STRIDE: usize = 160;
/// Analytic filter length at 16 kHz (25 ms).
pub const DEFAULT_FB_LEN: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    #[default]
    HannPeriodic,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::HannPeriodic => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub win_len_s: f64,
    pub hop_s: f64,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_len_s: 0.025,
            hop_s: 0.010,
            fft_size: 512,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl StftConfig {
    pub fn win_samples(&self, rate: u32) -> usize {
        (self.win_len_s * rate as f64).round() as usize
    }

    pub fn hop_samples(&self, rate: u32) -> usize {
        (self.hop_s * rate as f64).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self, rate: u32) -> Result<()> {
        let (w, h) = (self.win_samples(rate), self.hop_samples(rate));
        ensure!(w >= 1 && h >= 1, Argument, "window and hop must be at least one sample");
        ensure!(self.fft_size >= w, Argument, "fft_size {} < window {w}", self.fft_size);
        ensure!(h <= w, Argument, "hop {h} exceeds window {w}");
        Ok(())
    }

    /// Number of frames for `n` samples, or `None` if shorter than one window.
    pub fn num_frames(&self, n: usize, rate: u32) -> Option<usize> {
        let (w, h) = (self.win_samples(rate), self.hop_samples(rate));
        (n >= w).then(|| (n - w) / h + 1)
    }
}

/// Multichannel STFT `C × T × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array3<Complex64>,
    pub rate: u32,
    pub hop_s: f64,
    pub win_s: f64,
    pub bin_hz: f64,
}

impl ComplexSpectrogram {
    pub fn num_channels(&self) -> usize {
        self.bins.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.bins.shape()[1]
    }

    pub fn num_bins(&self) -> usize {
        self.bins.shape()[2]
    }

    pub fn magnitude(&self) -> Array3<f64> {
        self.bins.mapv(|z| z.norm())
    }

    /// Principal phase angle in `(-π, π]`.
    pub fn phase(&self) -> Array3<f64> {
        self.bins.mapv(|z| z.arg())
    }

    /// Keeps the given rows (positions, not microphone ids).
    pub fn select_channels(&self, rows: &[usize]) -> ComplexSpectrogram {
        ComplexSpectrogram {
            bins: self.bins.select(Axis(0), rows),
            ..self.clone()
        }
    }
}

pub fn stft(signal: &MultichannelSignal, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let rate = signal.sample_rate();
    cfg.validate(rate)?;
    let (w, h) = (cfg.win_samples(rate), cfg.hop_samples(rate));
    let n = signal.num_samples();
    let t_len = cfg.num_frames(n, rate).ok_or_else(|| {
        crate::Error::Range(format!("signal of {n} samples is shorter than one {w}-sample window"))
    })?;
    let k_len = cfg.num_bins();
    let window = cfg.window.coefficients(w);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut bins = Array3::zeros((signal.num_channels(), t_len, k_len));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for (c, row) in signal.samples().outer_iter().enumerate() {
        for t in 0..t_len {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for i in 0..w {
                buf[i].re = row[t * h + i] * window[i];
            }
            fft.process(&mut buf);
            for k in 0..k_len {
                bins[[c, t, k]] = buf[k];
            }
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        rate,
        hop_s: h as f64 / rate as f64,
        win_s: w as f64 / rate as f64,
        bin_hz: rate as f64 / cfg.fft_size as f64,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-scale triangular filters spanning `0..rate/2`, returned as `K × F`.
/// Triangles peak at 1 and are not area-normalised.
pub fn mel_filterbank(n_mels: usize, n_bins: usize, rate: u32) -> Result<Array2<f64>> {
    ensure!(n_mels >= 1, Argument, "n_mels must be positive");
    ensure!(n_bins >= 2, Argument, "need at least two frequency bins");
    ensure!(n_mels <= n_bins, Argument, "n_mels {n_mels} exceeds {n_bins} bins");
    let nyquist = rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = nyquist / (n_bins - 1) as f64;
    Ok(Array2::from_shape_fn((n_bins, n_mels), |(k, m)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    }))
}

/// Projects a `T × K` magnitude spectrogram onto `n_mels` filters.
pub fn mel_project(mag: ArrayView2<'_, f64>, n_mels: usize, rate: u32) -> Result<Array2<f64>> {
    let fb = mel_filterbank(n_mels, mag.ncols(), rate)?;
    Ok(mag.dot(&fb))
}

/// Elementwise `ln(x + EPS_LOG)`; negative input is rejected.
pub fn log_compress(x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    ensure!(
        x.iter().all(|v| *v >= 0.0),
        Argument,
        "log_compress needs non-negative input"
    );
    Ok(x.mapv(|v| (v + EPS_LOG).ln()))
}

/// Per `(channel, bin)` normalisation over time to zero mean and unit
/// population standard deviation (plus [`EPS_STD`]).
pub fn mvn(x: &Array3<f64>) -> Result<Array3<f64>> {
    let (c_len, t_len, k_len) = x.dim();
    ensure!(t_len >= 2, Argument, "mvn needs at least two frames, got {t_len}");
    let mut out = x.clone();
    for c in 0..c_len {
        for k in 0..k_len {
            let col = x.slice(ndarray::s![c, .., k]);
            let mean = col.sum() / t_len as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t_len as f64).sqrt();
            for t in 0..t_len {
                out[[c, t, k]] = (x[[c, t, k]] - mean) / (std + EPS_STD);
            }
        }
    }
    Ok(out)
}

/// Imaginary part of the analytic signal of an even-length real sequence,
/// computed spectrally: negative frequencies zeroed, positive ones doubled,
/// DC and Nyquist kept.
pub fn hilbert(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    ensure!(n >= 2 && n % 2 == 0, Argument, "hilbert needs an even length, got {n}");
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let h = if k == 0 || k == n / 2 {
            1.0
        } else if k < n / 2 {
            2.0
        } else {
            0.0
        };
        *z *= h;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|z| z.im / n as f64).collect())
}

/// Matrix `H` with `hilbert(x) = H · x`. The map is circulant.
pub fn hilbert_matrix(len: usize) -> Result<Array2<f64>> {
    let mut e0 = vec![0.0; len];
    e0[0] = 1.0;
    let g = hilbert(&e0)?;
    Ok(Array2::from_shape_fn((len, len), |(i, j)| g[(i + len - j) % len]))
}

/// Learnable analytic filters: a real impulse response per filter and its
/// Hilbert pair, applied as a strided valid correlation shared by all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticFilterBank {
    real_ir: Array2<f64>,
    imag_ir: Array2<f64>,
    stride: usize,
}

impl AnalyticFilterBank {
    /// Uniform init in `[-1/√L, 1/√L]`.
    pub fn init(n_filters: usize, len: usize, stride: usize, seed: u64) -> Result<Self> {
        ensure!(n_filters >= 1, Argument, "need at least one filter");
        ensure!(len >= 2 && len % 2 == 0, Argument, "kernel length must be even, got {len}");
        let bound = 1.0 / (len as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = Array2::from_shape_fn((n_filters, len), |_| rng.gen_range(-bound..=bound));
        Self::from_real(real, stride)
    }

    pub fn from_real(real_ir: Array2<f64>, stride: usize) -> Result<Self> {
        ensure!(stride >= 1, Argument, "stride must be positive");
        ensure!(real_ir.nrows() >= 1, Argument, "need at least one filter");
        let len = real_ir.ncols();
        ensure!(len >= 2 && len % 2 == 0, Argument, "kernel length must be even, got {len}");
        let mut imag_ir = Array2::zeros(real_ir.raw_dim());
        for (src, mut dst) in real_ir.outer_iter().zip(imag_ir.outer_iter_mut()) {
            let h = hilbert(&src.to_vec())?;
            dst.assign(&ndarray::ArrayView1::from(&h));
        }
        Ok(AnalyticFilterBank {
            real_ir,
            imag_ir,
            stride,
        })
    }

    /// Replaces the real responses and recomputes their Hilbert pairs.
    pub fn set_real(&mut self, real_ir: Array2<f64>) -> Result<()> {
        *self = Self::from_real(real_ir, self.stride)?;
        Ok(())
    }

    pub fn real_ir(&self) -> &Array2<f64> {
        &self.real_ir
    }

    pub fn imag_ir(&self) -> &Array2<f64> {
        &self.imag_ir
    }

    pub fn n_filters(&self) -> usize {
        self.real_ir.nrows()
    }

    pub fn kernel_len(&self) -> usize {
        self.real_ir.ncols()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Feature width after concatenating real and imaginary outputs.
    pub fn output_width(&self) -> usize {
        2 * self.n_filters()
    }

    pub fn num_frames(&self, n: usize) -> Option<usize> {
        (n >= self.kernel_len()).then(|| (n - self.kernel_len()) / self.stride + 1)
    }
}

/// Default bank: 10 ms stride at 16 kHz.
pub fn analytic_fb_init(n_filters: usize, len: usize, seed: u64) -> Result<AnalyticFilterBank> {
    AnalyticFilterBank::init(n_filters, len, DEFAULT_FB_STRIDE, seed)
}

/// Frames of every channel stacked as a `(C·T) × L` matrix.
pub(crate) fn frame_matrix(signal: &MultichannelSignal, len: usize, stride: usize) -> Result<Array2<f64>> {
    let n = signal.num_samples();
    ensure!(n >= len, Range, "signal of {n} samples is shorter than the {len}-tap kernel");
    let t_len = (n - len) / stride + 1;
    let c_len = signal.num_channels();
    let x = signal.samples();
    Ok(Array2::from_shape_fn((c_len * t_len, len), |(r, l)| {
        let (c, t) = (r / t_len, r % t_len);
        x[[c, t * stride + l]]
    }))
}

/// Complex filterbank output `C × T × n_filters`.
pub fn analytic_fb_apply(
    signal: &MultichannelSignal,
    fb: &AnalyticFilterBank,
) -> Result<Array3<Complex64>> {
    let frames = frame_matrix(signal, fb.kernel_len(), fb.stride)?;
    let re = frames.dot(&fb.real_ir.t());
    let im = frames.dot(&fb.imag_ir.t());
    let c_len = signal.num_channels();
    let t_len = frames.nrows() / c_len;
    Ok(Array3::from_shape_fn((c_len, t_len, fb.n_filters()), |(c, t, f)| {
        Complex64::new(re[[c * t_len + t, f]], im[[c * t_len + t, f]])
    }))
}
