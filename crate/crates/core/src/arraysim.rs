//! Anechoic far-field scenes on a microphone array, with ground-truth speaker
//! schedules.
//!
//! Sources are rendered by fractional delays applied as a phase shift on a
//! zero-padded FFT of the whole gated source signal. The padding exceeds the
//! largest inter-microphone delay, so no circular wrap-around reaches the
//! output.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beamform::ArrayGeometry;
use crate::error::{ensure, Result};
use crate::rng::derive_seed;
use crate::segeval::{labels_from_segments, FrameLabels, Segment, SegmentSet, LABEL_RATE};
use crate::signal::MultichannelSignal;

/// RMS of a source rendered at 0 dB.
pub const REFERENCE_RMS: f64 = 0.05;
/// Raised-cosine ramp at gate edges.
const RAMP_S: f64 = 0.005;

fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Far-field delays in seconds, shifted so the earliest microphone is at 0.
///
/// For a UCA this is `-(r/v_s)·cos(θ − ψ_c)` plus a common offset.
pub fn plane_wave_delays(geom: &ArrayGeometry, azimuth: f64) -> Vec<f64> {
    plane_wave_delays_3d(geom, azimuth, 0.0)
}

/// As [`plane_wave_delays`] for a wave arriving from `elevation` above the
/// array plane.
pub fn plane_wave_delays_3d(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> Vec<f64> {
    let u = [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ];
    let raw: Vec<f64> = geom
        .positions()
        .iter()
        .map(|p| -(p[0] * u[0] + p[1] * u[1] + p[2] * u[2]) / geom.speed_of_sound())
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    raw.into_iter().map(|t| t - min).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Low-passed white noise with a slow sinusoidal envelope.
    ModulatedNoise,
    /// Noise through a random AR(2) resonator with a syllable-rate envelope.
    #[default]
    SpeechLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub azimuth_rad: f64,
    pub onset_s: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub signal: SourceKind,
    #[serde(default)]
    pub level_db: f64,
    /// Speaker label in the ground truth; `src{i}` when absent.
    #[serde(default)]
    pub speaker: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    None,
    White,
    /// 36 independent plane waves from evenly spaced azimuths, with
    /// elevations spread to mimic a spherically isotropic field.
    DiffuseApprox,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub snr_db: f64,
    /// Extra per-channel noise gain in dB (empty = none); applied after the
    /// SNR scaling, so the nominal SNR holds for the unmodified field.
    #[serde(default)]
    pub channel_offsets_db: Vec<f64>,
}

fn default_rate() -> u32 {
    16000
}

fn default_file_id() -> String {
    "scene".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub geometry: ArrayGeometry,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_file_id")]
    pub file_id: String,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.duration_s > 0.0 && self.duration_s.is_finite(), Argument, "scene duration must be positive");
        ensure!(self.sample_rate > 0, Argument, "sample rate must be positive");
        ensure!(self.noise.snr_db.is_finite(), Argument, "SNR must be finite");
        let c = self.geometry.num_mics();
        ensure!(
            self.noise.channel_offsets_db.is_empty() || self.noise.channel_offsets_db.len() == c,
            Argument,
            "channel_offsets_db needs {c} entries"
        );
        for (i, s) in self.sources.iter().enumerate() {
            ensure!(
                (0.0..2.0 * PI).contains(&s.azimuth_rad),
                Argument,
                "source {i}: azimuth {} outside [0, 2π)",
                s.azimuth_rad
            );
            ensure!(
                s.onset_s >= 0.0 && s.onset_s < self.duration_s,
                Argument,
                "source {i}: onset {} outside the scene",
                s.onset_s
            );
            ensure!(s.duration_s > 0.0 && s.level_db.is_finite(), Argument, "source {i}: invalid duration or level");
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// A rendered scene with its separate clean and noise components.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub mixture: MultichannelSignal,
    pub clean: Array2<f64>,
    pub noise: Array2<f64>,
    pub truth: SegmentSet,
}

impl RenderedScene {
    /// Realised SNR in dB over all channels.
    pub fn snr_db(&self) -> f64 {
        10.0 * (power(&self.clean) / power(&self.noise)).log10()
    }
}

fn power(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn source_signal(kind: SourceKind, n: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    match kind {
        SourceKind::ModulatedNoise => {
            let f_mod = rng.gen_range(2.0..6.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut y = 0.0;
            noise
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    y = 0.6 * y + e;
                    y * (0.55 + 0.45 * (2.0 * PI * f_mod * i as f64 / rate + phase).sin())
                })
                .collect()
        }
        SourceKind::SpeechLike => {
            let f0 = rng.gen_range(250.0..2000.0);
            let r: f64 = rng.gen_range(0.9..0.97);
            let (a1, a2) = (2.0 * r * (2.0 * PI * f0 / rate).cos(), -r * r);
            let f_syl = rng.gen_range(2.0..5.0);
            let phase = rng.gen_range(0.0..PI);
            let (mut y1, mut y2) = (0.0, 0.0);
            noise
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let y = e + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    y * (0.3 + 0.7 * (PI * f_syl * i as f64 / rate + phase).sin().abs())
                })
                .collect()
        }
    }
}

/// Gate with raised-cosine edges over `[a, b)` samples.
fn gate(x: &mut [f64], a: usize, b: usize, ramp: usize) {
    for (i, v) in x.iter_mut().enumerate() {
        let g = if i < a || i >= b {
            0.0
        } else {
            let d = (i - a).min(b - 1 - i);
            if d < ramp {
                0.5 - 0.5 * (PI * (d as f64 + 0.5) / ramp as f64).cos()
            } else {
                1.0
            }
        };
        *v *= g;
    }
}

struct Spectra {
    nfft: usize,
    planner: FftPlanner<f64>,
}

impl Spectra {
    fn new(n: usize, max_delay: usize) -> Self {
        Spectra {
            nfft: smooth_size(n + max_delay + 64),
            planner: FftPlanner::new(),
        }
    }

    fn forward(&mut self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (b, v) in buf.iter_mut().zip(x) {
            b.re = *v;
        }
        self.planner.plan_fft_forward(self.nfft).process(&mut buf);
        buf
    }

    /// Signed frequency of bin `k` in cycles per sample; Nyquist maps to 0.
    fn freq(&self, k: usize) -> f64 {
        let n = self.nfft;
        if 2 * k == n {
            0.0
        } else if 2 * k < n {
            k as f64 / n as f64
        } else {
            (k as f64 - n as f64) / n as f64
        }
    }

    /// Adds `x` delayed by `delay` samples into `acc`.
    fn accumulate_delayed(&self, acc: &mut [Complex64], x: &[Complex64], delay: f64) {
        // The phase advances by a fixed step per bin; it is recomputed
        // exactly every 256 bins to bound the drift of the recurrence.
        let step = Complex64::from_polar(1.0, -2.0 * PI * delay / self.nfft as f64);
        let mut rot = Complex64::new(1.0, 0.0);
        for (k, (a, v)) in acc.iter_mut().zip(x).enumerate() {
            if k % 256 == 0 || 2 * k == self.nfft + 1 || 2 * k == self.nfft + 2 {
                rot = Complex64::from_polar(1.0, -2.0 * PI * self.freq(k) * delay);
            }
            if 2 * k != self.nfft {
                *a += v * rot;
            }
            rot *= step;
        }
    }

    /// Real part of the inverse transform, first `n` samples.
    fn inverse(&mut self, mut spec: Vec<Complex64>, n: usize) -> Vec<f64> {
        self.planner.plan_fft_inverse(self.nfft).process(&mut spec);
        spec.iter().take(n).map(|z| z.re / self.nfft as f64).collect()
    }
}

/// Smallest `m ≥ n` whose only prime factors are 2, 3 and 5.
fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&m| {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .unwrap()
}

const DIFFUSE_WAVES: usize = 36;

/// Direction of diffuse component `i`: evenly spaced azimuths, with
/// elevations stratified in `sin(el)` (a coprime stride permutes the strata)
/// so the field approximates spherical rather than cylindrical isotropy.
fn diffuse_direction(i: usize) -> (f64, f64) {
    let n = DIFFUSE_WAVES;
    let az = 2.0 * PI * i as f64 / n as f64;
    let stratum = (i * 11) % n;
    let z = -1.0 + (2 * stratum + 1) as f64 / n as f64;
    (az, z.asin())
}

/// Renders a scene: clean sources, noise scaled to the SNR against the
/// summed sources (or against a 0 dB source when there is none), mixture.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let geom = &spec.geometry;
    let (c_len, n) = (geom.num_mics(), spec.num_samples());
    let rate = spec.sample_rate as f64;
    let aperture = (0..c_len)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| geom.mic_distance(i, j))
        .fold(0.0, f64::max);
    let max_delay = (aperture / geom.speed_of_sound() * rate).ceil() as usize + 2;
    let mut fft = Spectra::new(n, max_delay);
    let ramp = ((RAMP_S * rate) as usize).max(1);

    let mut clean_spec = vec![vec![Complex64::new(0.0, 0.0); fft.nfft]; c_len];
    let mut truth = Vec::new();
    for (i, src) in spec.sources.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, i as u64]));
        let mut x = source_signal(src.signal, n, rate, &mut rng);
        let a = (src.onset_s * rate).round() as usize;
        let b = (((src.onset_s + src.duration_s) * rate).round() as usize).min(n);
        gate(&mut x, a, b, ramp);
        let active = &x[a..b];
        let rms = (active.iter().map(|v| v * v).sum::<f64>() / active.len().max(1) as f64).sqrt();
        if rms > 0.0 {
            let g = REFERENCE_RMS * 10f64.powf(src.level_db / 20.0) / rms;
            x.iter_mut().for_each(|v| *v *= g);
        }
        let xs = fft.forward(&x);
        for (c, tau) in plane_wave_delays(geom, src.azimuth_rad).iter().enumerate() {
            fft.accumulate_delayed(&mut clean_spec[c], &xs, tau * rate);
        }
        truth.push(Segment {
            file_id: spec.file_id.clone(),
            onset: src.onset_s,
            duration: src.duration_s.min(spec.duration_s - src.onset_s),
            speaker: src.speaker.clone().unwrap_or_else(|| format!("src{i}")),
        });
    }
    let mut clean = Array2::zeros((c_len, n));
    for (c, s) in clean_spec.into_iter().enumerate() {
        let row = fft.inverse(s, n);
        clean.row_mut(c).assign(&ndarray::ArrayView1::from(&row));
    }

    let mut noise = Array2::zeros((c_len, n));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2]));
    match spec.noise.kind {
        NoiseKind::None => {}
        NoiseKind::White => noise.mapv_inplace(|_| standard_normal(&mut rng)),
        NoiseKind::DiffuseApprox => {
            let mut acc = vec![vec![Complex64::new(0.0, 0.0); fft.nfft]; c_len];
            for w in 0..DIFFUSE_WAVES {
                let (az, el) = diffuse_direction(w);
                let x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
                let xs = fft.forward(&x);
                for (c, tau) in plane_wave_delays_3d(geom, az, el).iter().enumerate() {
                    fft.accumulate_delayed(&mut acc[c], &xs, tau * rate);
                }
            }
            for (c, s) in acc.into_iter().enumerate() {
                let row = fft.inverse(s, n);
                noise.row_mut(c).assign(&ndarray::ArrayView1::from(&row));
            }
        }
    }
    if spec.noise.kind != NoiseKind::None {
        let p_clean = if spec.sources.is_empty() { REFERENCE_RMS * REFERENCE_RMS } else { power(&clean) };
        let target = p_clean / 10f64.powf(spec.noise.snr_db / 10.0);
        let p_noise = power(&noise);
        if p_noise > 0.0 {
            noise.mapv_inplace(|v| v * (target / p_noise).sqrt());
        }
        for (c, db) in spec.noise.channel_offsets_db.iter().enumerate() {
            let g = 10f64.powf(db / 20.0);
            noise.row_mut(c).mapv_inplace(|v| v * g);
        }
    }
    let mixture = MultichannelSignal::new(&clean + &noise, spec.sample_rate)?;
    Ok(RenderedScene {
        mixture,
        clean,
        noise,
        truth: SegmentSet::new(truth),
    })
}

/// Multichannel mixture and ground-truth segments of a scene.
pub fn synth_scene(spec: &SceneSpec) -> Result<(MultichannelSignal, SegmentSet)> {
    let r = render_scene(spec)?;
    Ok((r.mixture, r.truth))
}

/// One labelled toy segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySegment {
    pub signal: MultichannelSignal,
    pub truth: SegmentSet,
    pub labels: FrameLabels,
}

/// Target class shares of the toy generator.
pub const TOY_PRIOR: [f64; 3] = [0.3, 0.4, 0.3];

/// Lazily generated stream of i.i.d. toy scenes: two sources at random,
/// well separated azimuths, and three regions (silence, one talker, both
/// talkers) in random order with jittered lengths around [`TOY_PRIOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    template: SceneSpec,
    n_segments: usize,
    seed: u64,
}

pub fn toy_dataset(template: &SceneSpec, n_segments: usize, seed: u64) -> Result<ToyDataset> {
    ensure!(n_segments >= 1, Argument, "toy dataset needs at least one segment");
    template.validate()?;
    Ok(ToyDataset {
        template: template.clone(),
        n_segments,
        seed,
    })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.n_segments
    }

    pub fn is_empty(&self) -> bool {
        self.n_segments == 0
    }

    pub fn template(&self) -> &SceneSpec {
        &self.template
    }

    /// Scene specification of segment `i`.
    pub fn spec(&self, i: usize) -> SceneSpec {
        let scene_seed = derive_seed(self.seed, &[i as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let dur = self.template.duration_s;
        let mut lens: Vec<f64> = TOY_PRIOR.iter().map(|p| p * rng.gen_range(0.6..1.4)).collect();
        let total: f64 = lens.iter().sum();
        lens.iter_mut().for_each(|l| *l *= dur / total);
        let mut order = [0usize, 1, 2];
        for k in (1..3).rev() {
            order.swap(k, rng.gen_range(0..=k));
        }
        let az_a = rng.gen_range(0.0..2.0 * PI);
        let az_b = (az_a + rng.gen_range(PI / 4.0..7.0 * PI / 4.0)) % (2.0 * PI);
        let kinds = [SourceKind::SpeechLike, SourceKind::SpeechLike];
        let mut sources = Vec::new();
        let mut t = 0.0;
        for (idx, &class) in order.iter().enumerate() {
            // Region boundaries on the 10 ms label grid.
            let end = if idx == 2 { dur } else { ((t + lens[class]) * LABEL_RATE).round() / LABEL_RATE };
            let len = end - t;
            if len > 0.0 {
                let speakers: &[usize] = match class {
                    0 => &[],
                    1 => {
                        if rng.gen_bool(0.5) {
                            &[0]
                        } else {
                            &[1]
                        }
                    }
                    _ => &[0, 1],
                };
                for &s in speakers {
                    sources.push(SourceSpec {
                        azimuth_rad: if s == 0 { az_a } else { az_b },
                        onset_s: t,
                        duration_s: len,
                        signal: kinds[s],
                        level_db: rng.gen_range(-3.0..3.0),
                        speaker: Some(if s == 0 { "A".into() } else { "B".into() }),
                    });
                }
            }
            t = end;
        }
        SceneSpec {
            sources,
            seed: scene_seed,
            file_id: format!("toy{i:05}"),
            ..self.template.clone()
        }
    }

    pub fn get(&self, i: usize) -> Result<ToySegment> {
        let spec = self.spec(i);
        let (signal, truth) = synth_scene(&spec)?;
        let labels = labels_from_segments(&truth, spec.duration_s, LABEL_RATE);
        Ok(ToySegment { signal, truth, labels })
    }

    /// Ground-truth labels of segment `i` without rendering audio.
    pub fn labels(&self, i: usize) -> FrameLabels {
        let spec = self.spec(i);
        let truth = SegmentSet::new(
            spec.sources
                .iter()
                .map(|s| Segment {
                    file_id: spec.file_id.clone(),
                    onset: s.onset_s,
                    duration: s.duration_s,
                    speaker: s.speaker.clone().unwrap_or_default(),
                })
                .collect(),
        );
        labels_from_segments(&truth, spec.duration_s, LABEL_RATE)
    }
}
