//! Array geometry, beampatterns, CDR masking, MVDR and SRP-PHAT.
//!
//! Beampatterns follow the plane-wave response of a uniform circular array:
//!
//! ```text
//! B(θ) = Σ_c w_c · exp(j·ω̄·cos(θ − ψ_c)),   ω̄ = 2π·r·f / v_s
//! ```
//!
//! which is alias-free below `f_sup = C·v_s / (4π·r)`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::combinator::{Combinator, CombinationWeights, CombinedSpectrogram};
use crate::error::{ensure, Error, Result};
use crate::spectral::ComplexSpectrogram;

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum GeometrySpec {
    Uca {
        radius: f64,
        num_mics: usize,
        #[serde(default)]
        offset_rad: f64,
        #[serde(default = "default_speed")]
        speed_of_sound: f64,
    },
    Positions {
        positions: Vec<[f64; 3]>,
        #[serde(default = "default_speed")]
        speed_of_sound: f64,
    },
}

fn default_speed() -> f64 {
    SPEED_OF_SOUND
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryKind {
    Uca,
    Positions,
}

/// Microphone layout. UCA microphones sit at `r·(cos ψ_c, sin ψ_c, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometrySpec", into = "GeometrySpec")]
pub struct ArrayGeometry {
    kind: GeometryKind,
    radius: f64,
    psi: Vec<f64>,
    positions: Vec<[f64; 3]>,
    speed_of_sound: f64,
}

impl TryFrom<GeometrySpec> for ArrayGeometry {
    type Error = Error;

    fn try_from(s: GeometrySpec) -> Result<Self> {
        match s {
            GeometrySpec::Uca {
                radius,
                num_mics,
                offset_rad,
                speed_of_sound,
            } => {
                let psi = (0..num_mics)
                    .map(|c| offset_rad + 2.0 * PI * c as f64 / num_mics as f64)
                    .collect();
                ArrayGeometry::uca_with_angles(radius, psi, speed_of_sound)
            }
            GeometrySpec::Positions {
                positions,
                speed_of_sound,
            } => ArrayGeometry::from_positions(positions, speed_of_sound),
        }
    }
}

impl From<ArrayGeometry> for GeometrySpec {
    fn from(g: ArrayGeometry) -> Self {
        let regular = g.kind == GeometryKind::Uca
            && g.psi.iter().enumerate().all(|(c, p)| {
                (p - g.psi[0] - 2.0 * PI * c as f64 / g.psi.len() as f64).abs() < 1e-12
            });
        if regular {
            GeometrySpec::Uca {
                radius: g.radius,
                num_mics: g.psi.len(),
                offset_rad: g.psi[0],
                speed_of_sound: g.speed_of_sound,
            }
        } else {
            GeometrySpec::Positions {
                positions: g.positions,
                speed_of_sound: g.speed_of_sound,
            }
        }
    }
}

impl ArrayGeometry {
    /// `num_mics` microphones evenly spaced on a circle, the first at angle 0.
    pub fn uca(num_mics: usize, radius: f64) -> Result<Self> {
        let psi = (0..num_mics)
            .map(|c| 2.0 * PI * c as f64 / num_mics as f64)
            .collect();
        Self::uca_with_angles(radius, psi, SPEED_OF_SOUND)
    }

    pub fn uca_with_angles(radius: f64, psi: Vec<f64>, speed_of_sound: f64) -> Result<Self> {
        ensure!(radius > 0.0 && radius.is_finite(), Argument, "UCA radius must be positive");
        ensure!(!psi.is_empty(), Argument, "array needs at least one microphone");
        let positions = psi
            .iter()
            .map(|p| [radius * p.cos(), radius * p.sin(), 0.0])
            .collect();
        let g = ArrayGeometry {
            kind: GeometryKind::Uca,
            radius,
            psi,
            positions,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn from_positions(positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        ensure!(!positions.is_empty(), Argument, "array needs at least one microphone");
        let psi = positions.iter().map(|p| p[1].atan2(p[0])).collect();
        let radius = positions
            .iter()
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max);
        let g = ArrayGeometry {
            kind: GeometryKind::Positions,
            radius,
            psi,
            positions,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite(),
            Argument,
            "speed of sound must be positive"
        );
        for i in 0..self.positions.len() {
            for j in 0..i {
                ensure!(
                    distance(&self.positions[i], &self.positions[j]) > 1e-9,
                    Argument,
                    "microphones {j} and {i} coincide"
                );
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// Spatial-aliasing limit `C·v_s / (4π·r)`.
    pub fn f_sup(&self) -> f64 {
        self.num_mics() as f64 * self.speed_of_sound / (4.0 * PI * self.radius)
    }

    /// The microphones with the given original indices, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        ensure!(!ids.is_empty(), Argument, "empty microphone subset");
        for &i in ids {
            ensure!(i < self.num_mics(), Argument, "microphone {i} not in a {}-mic array", self.num_mics());
        }
        let mut g = self.clone();
        g.psi = ids.iter().map(|&i| self.psi[i]).collect();
        g.positions = ids.iter().map(|&i| self.positions[i]).collect();
        g.validate()?;
        Ok(g)
    }

    /// Distance between microphones `i` and `j`.
    pub fn mic_distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.positions[i], &self.positions[j])
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Angles and frequencies at which to evaluate a beampattern.
#[derive(Clone, Debug, PartialEq)]
pub struct BeampatternGrid {
    pub thetas: Vec<f64>,
    pub freqs: Vec<f64>,
    pub f_sup: f64,
}

impl BeampatternGrid {
    pub fn new(thetas: Vec<f64>, freqs: Vec<f64>, geom: &ArrayGeometry) -> Result<Self> {
        let f_sup = geom.f_sup();
        for &f in &freqs {
            ensure_alias_free(f, f_sup)?;
        }
        Ok(BeampatternGrid { thetas, freqs, f_sup })
    }

    /// `n` equally spaced angles starting at 0.
    pub fn degree_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
    }
}

fn ensure_alias_free(f: f64, f_sup: f64) -> Result<()> {
    if f >= f_sup || f < 0.0 {
        return Err(Error::Aliasing { freq: f, f_sup });
    }
    Ok(())
}

/// Beampattern values `|freqs| × |thetas|`.
#[derive(Clone, Debug, PartialEq)]
pub struct Beampattern {
    pub values: Array2<Complex64>,
    pub frame_index: Option<usize>,
}

fn require_uca(geom: &ArrayGeometry) -> Result<()> {
    ensure!(geom.kind() == GeometryKind::Uca, Argument, "beampatterns need a circular array");
    Ok(())
}

/// Narrow-band response of weights `w` at frequency `f`. Frequencies at or
/// above the aliasing limit are rejected unless `allow_aliasing` is set.
pub fn narrowband_beampattern(
    w: &[Complex64],
    geom: &ArrayGeometry,
    f: f64,
    thetas: &[f64],
    allow_aliasing: bool,
) -> Result<Vec<Complex64>> {
    require_uca(geom)?;
    ensure!(w.len() == geom.num_mics(), Argument, "{} weights for {} microphones", w.len(), geom.num_mics());
    if !allow_aliasing {
        ensure_alias_free(f, geom.f_sup())?;
    }
    let wbar = 2.0 * PI * geom.radius() * f / geom.speed_of_sound();
    Ok(thetas
        .iter()
        .map(|&th| {
            w.iter()
                .zip(geom.psi())
                .map(|(wc, psi)| wc * Complex64::from_polar(1.0, wbar * (th - psi).cos()))
                .sum()
        })
        .collect())
}

pub fn broadband_beampattern(w: &[Complex64], geom: &ArrayGeometry, grid: &BeampatternGrid) -> Result<Beampattern> {
    let mut values = Array2::zeros((grid.freqs.len(), grid.thetas.len()));
    for (i, &f) in grid.freqs.iter().enumerate() {
        let row = narrowband_beampattern(w, geom, f, &grid.thetas, false)?;
        values.row_mut(i).assign(&Array1::from(row));
    }
    Ok(Beampattern { values, frame_index: None })
}

/// Time-averaged response and its magnitude rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedBeampattern {
    pub values: Vec<Complex64>,
    pub normalized: Vec<f64>,
}

/// Mean over frames of the narrow-band responses of `w: C × T`.
pub fn time_avg_beampattern(
    w: &Array2<Complex64>,
    geom: &ArrayGeometry,
    f: f64,
    thetas: &[f64],
    allow_aliasing: bool,
) -> Result<AveragedBeampattern> {
    let t_len = w.ncols();
    ensure!(t_len >= 1, Argument, "need at least one frame of weights");
    let mut acc = vec![Complex64::new(0.0, 0.0); thetas.len()];
    for col in w.axis_iter(Axis(1)) {
        let b = narrowband_beampattern(&col.to_vec(), geom, f, thetas, allow_aliasing)?;
        for (a, v) in acc.iter_mut().zip(b) {
            *a += v;
        }
    }
    let values: Vec<Complex64> = acc.into_iter().map(|v| v / t_len as f64).collect();
    let peak = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let normalized = values
        .iter()
        .map(|v| if peak > 0.0 { v.norm() / peak } else { 0.0 })
        .collect();
    Ok(AveragedBeampattern { values, normalized })
}

/// Delay-and-sum weights steering a UCA towards `theta0` at frequency `f`.
pub fn delay_and_sum_weights(geom: &ArrayGeometry, theta0: f64, f: f64) -> Vec<Complex64> {
    let c = geom.num_mics() as f64;
    let wbar = 2.0 * PI * geom.radius() * f / geom.speed_of_sound();
    geom.psi()
        .iter()
        .map(|psi| Complex64::from_polar(1.0 / c, -wbar * (theta0 - psi).cos()))
        .collect()
}

/// Complex weights `w_mag·exp(j2π·w_φ)` as a `C × T` matrix.
pub fn complex_weights(w_mag: &CombinationWeights, w_phi: &CombinationWeights) -> Result<Array2<Complex64>> {
    ensure!(w_mag.w.dim() == w_phi.w.dim(), Argument, "magnitude and phase weights differ in shape");
    Ok(Array2::from_shape_fn(w_mag.w.dim(), |ix| {
        Complex64::from_polar(w_mag.w[ix], 2.0 * PI * w_phi.w[ix])
    }))
}

/// Real weights as complex ones with zero phase.
pub fn real_weights(w: &CombinationWeights) -> Array2<Complex64> {
    w.w.mapv(|v| Complex64::new(v, 0.0))
}

/// Coherence recursion constant at a 10 ms hop.
pub const CDR_FORGETTING: f64 = 0.68;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Coherent-to-diffuse ratio for one bin from the observed coherence `gx`
/// and the diffuse-field coherence `gn`, without knowledge of the DOA.
pub fn cdr_estimate(gx: Complex64, gn: f64) -> f64 {
    let mag = gx.norm();
    // Keep |Γx| strictly inside the unit circle.
    let gx = if mag > 1.0 - 1e-9 { gx * ((1.0 - 1e-9) / mag) } else { gx };
    let re = gx.re;
    let a2 = gx.norm_sqr();
    let disc = gn * gn * re * re - gn * gn * a2 + gn * gn - 2.0 * gn * re + a2;
    let cdr = (gn * re - a2 - disc.max(0.0).sqrt()) / (a2 - 1.0);
    if cdr.is_finite() {
        cdr.max(0.0)
    } else {
        0.0
    }
}

/// Speech-presence mask `CDR / (CDR + 1)` per `(t, k)`, from recursively
/// smoothed pairwise coherences with forgetting factor `lambda`.
pub fn cdr_mask_with(y: &ComplexSpectrogram, geom: &ArrayGeometry, lambda: f64) -> Result<Array2<f64>> {
    let (c_len, t_len, k_len) = y.bins.dim();
    ensure!(c_len >= 2, Argument, "CDR needs at least two channels, got {c_len}");
    ensure!(geom.num_mics() == c_len, Argument, "geometry has {} mics for {c_len} channels", geom.num_mics());
    ensure!((0.0..1.0).contains(&lambda), Argument, "forgetting factor must be in [0, 1)");
    let pairs: Vec<(usize, usize)> = (0..c_len).flat_map(|i| (i + 1..c_len).map(move |j| (i, j))).collect();
    let mut cdr_sum = Array2::<f64>::zeros((t_len, k_len));
    let mut auto = Array2::<f64>::zeros((c_len, k_len));
    let mut cross = Array2::<Complex64>::zeros((pairs.len(), k_len));
    for t in 0..t_len {
        let a = if t == 0 { 0.0 } else { lambda };
        for c in 0..c_len {
            for k in 0..k_len {
                auto[[c, k]] = a * auto[[c, k]] + (1.0 - a) * y.bins[[c, t, k]].norm_sqr();
            }
        }
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let d = geom.mic_distance(i, j);
            for k in 0..k_len {
                let x = y.bins[[i, t, k]] * y.bins[[j, t, k]].conj();
                cross[[p, k]] = cross[[p, k]] * a + x * (1.0 - a);
                let denom = (auto[[i, k]] * auto[[j, k]]).sqrt();
                let gx = if denom > 0.0 { cross[[p, k]] / denom } else { Complex64::new(0.0, 0.0) };
                let f = k as f64 * y.bin_hz;
                let gn = sinc(2.0 * PI * f * d / geom.speed_of_sound());
                cdr_sum[[t, k]] += cdr_estimate(gx, gn);
            }
        }
    }
    let n_pairs = pairs.len() as f64;
    Ok(cdr_sum.mapv(|s| {
        let cdr = s / n_pairs;
        (cdr / (cdr + 1.0)).clamp(0.0, 1.0)
    }))
}

pub fn cdr_mask(y: &ComplexSpectrogram, geom: &ArrayGeometry) -> Result<Array2<f64>> {
    cdr_mask_with(y, geom, CDR_FORGETTING)
}

/// Beamformer output with the per-bin weights and steering vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MvdrOutput {
    pub combined: CombinedSpectrogram,
    /// `h` per bin, `K × C`.
    pub weights: Array2<Complex64>,
    /// Steering vector per bin, normalised to a unit first entry, `K × C`.
    pub steering: Array2<Complex64>,
}

/// `Φ⁻¹d / (dᴴΦ⁻¹d)`; fails if `Φ` is not positive definite.
pub fn mvdr_weights(phi_n: &Array2<Complex64>, d: &[Complex64]) -> Result<Vec<Complex64>> {
    let c = d.len();
    ensure!(phi_n.dim() == (c, c), Argument, "covariance must be {c}×{c}");
    let phi = DMatrix::from_fn(c, c, |i, j| phi_n[[i, j]]);
    let chol = Cholesky::new(phi).ok_or_else(|| Error::Numeric("noise covariance is not positive definite".into()))?;
    let dv = DVector::from_column_slice(d);
    let x = chol.solve(&dv);
    let denom = dv.dotc(&x);
    ensure!(denom.norm() > 1e-300 && denom.is_finite(), Numeric, "degenerate MVDR normalisation");
    let h: Vec<Complex64> = x.iter().map(|v| v / denom).collect();
    ensure!(h.iter().all(|v| v.is_finite()), Numeric, "non-finite MVDR weights");
    Ok(h)
}

fn weighted_covariance(y: &ComplexSpectrogram, k: usize, weight: impl Fn(usize) -> f64) -> (DMatrix<Complex64>, f64) {
    let (c_len, t_len, _) = y.bins.dim();
    let mut phi = DMatrix::zeros(c_len, c_len);
    let mut total = 0.0;
    for t in 0..t_len {
        let m = weight(t);
        if m == 0.0 {
            continue;
        }
        total += m;
        for i in 0..c_len {
            for j in 0..c_len {
                phi[(i, j)] += y.bins[[i, t, k]] * y.bins[[j, t, k]].conj() * m;
            }
        }
    }
    if total > 0.0 {
        phi /= Complex64::new(total, 0.0);
    }
    (phi, total)
}

/// MVDR with noise statistics from `(1 − mask)`-weighted frames and the
/// steering vector taken as the principal eigenvector of the
/// `mask`-weighted covariance.
pub fn mvdr(y: &ComplexSpectrogram, mask: &Array2<f64>) -> Result<MvdrOutput> {
    let (c_len, t_len, k_len) = y.bins.dim();
    ensure!(c_len >= 2, Argument, "MVDR needs at least two channels");
    ensure!(mask.dim() == (t_len, k_len), Argument, "mask shape {:?} != ({t_len}, {k_len})", mask.dim());
    let mut weights = Array2::zeros((k_len, c_len));
    let mut steering = Array2::zeros((k_len, c_len));
    let mut out = Array2::zeros((t_len, k_len));
    for k in 0..k_len {
        let (mut phi_n, wn) = weighted_covariance(y, k, |t| 1.0 - mask[[t, k]]);
        let (mut phi_s, ws) = weighted_covariance(y, k, |t| mask[[t, k]]);
        if ws == 0.0 {
            phi_s = weighted_covariance(y, k, |_| 1.0).0;
        }
        if wn == 0.0 {
            phi_n = weighted_covariance(y, k, |_| 1.0).0;
        }
        let trace: f64 = (0..c_len).map(|i| phi_n[(i, i)].re).sum();
        let delta = if trace > 0.0 { 1e-6 * trace / c_len as f64 } else { 1e-12 };
        for i in 0..c_len {
            phi_n[(i, i)] += Complex64::new(delta, 0.0);
        }
        // Symmetrise against rounding before the Hermitian eigensolver.
        let phi_s = (&phi_s + phi_s.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(phi_s);
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let d: Vec<Complex64> = if v[0].norm() > 1e-12 {
            v.iter().map(|z| z / v[0]).collect()
        } else {
            vec![Complex64::new(1.0, 0.0); c_len]
        };
        let phi_arr = Array2::from_shape_fn((c_len, c_len), |(i, j)| phi_n[(i, j)]);
        let h = mvdr_weights(&phi_arr, &d)?;
        for t in 0..t_len {
            out[[t, k]] = (0..c_len).map(|c| h[c].conj() * y.bins[[c, t, k]]).sum();
        }
        weights.row_mut(k).assign(&Array1::from(h));
        steering.row_mut(k).assign(&Array1::from(d));
    }
    Ok(MvdrOutput {
        combined: CombinedSpectrogram {
            values: out,
            provenance: Combinator::Mvdr,
            weights: vec![],
        },
        weights,
        steering,
    })
}

/// Applies per-bin weights `K × C` (as `hᴴ y`) to every frame.
pub fn apply_weights(y: &ComplexSpectrogram, h: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (c_len, t_len, k_len) = y.bins.dim();
    ensure!(h.dim() == (k_len, c_len), Argument, "weights must be {k_len}×{c_len}");
    Ok(Array2::from_shape_fn((t_len, k_len), |(t, k)| {
        (0..c_len).map(|c| h[[k, c]].conj() * y.bins[[c, t, k]]).sum()
    }))
}

/// Search settings for [`srp_phat`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrpConfig {
    pub f_min: f64,
    /// Upper band edge; the aliasing limit when absent.
    pub f_max: Option<f64>,
    pub n_candidates: usize,
    pub radius: f64,
}

impl Default for SrpConfig {
    fn default() -> Self {
        SrpConfig {
            f_min: 300.0,
            f_max: None,
            n_candidates: 360,
            radius: 2.0,
        }
    }
}

/// Steered response power at each candidate azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct SrpMap {
    pub azimuths: Vec<f64>,
    pub energy: Vec<f64>,
    pub argmax: usize,
}

impl SrpMap {
    /// Indices of strict local maxima on the circular grid, strongest first.
    pub fn peaks(&self) -> Vec<usize> {
        let n = self.energy.len();
        let mut idx: Vec<usize> = (0..n)
            .filter(|&i| {
                let e = self.energy[i];
                e > self.energy[(i + n - 1) % n] && e >= self.energy[(i + 1) % n]
            })
            .collect();
        idx.sort_by(|&a, &b| self.energy[b].total_cmp(&self.energy[a]));
        idx
    }
}

/// SRP-PHAT energy over candidates on a circle around the array centre, in
/// the array plane, with PHAT-weighted cross-spectra summed over frames,
/// microphone pairs and the band `[f_min, f_max]`. Self-pairs are included,
/// so the energy is the power of the steered PHAT sum and never negative.
pub fn srp_phat(y: &ComplexSpectrogram, geom: &ArrayGeometry, cfg: &SrpConfig) -> Result<SrpMap> {
    let (c_len, t_len, k_len) = y.bins.dim();
    ensure!(c_len >= 2, Argument, "SRP-PHAT needs at least two channels");
    ensure!(geom.num_mics() == c_len, Argument, "geometry has {} mics for {c_len} channels", geom.num_mics());
    ensure!(cfg.n_candidates >= 1 && cfg.radius > 0.0, Argument, "invalid candidate grid");
    let f_max = cfg.f_max.unwrap_or_else(|| geom.f_sup());
    let bins: Vec<usize> = (0..k_len)
        .filter(|&k| {
            let f = k as f64 * y.bin_hz;
            f >= cfg.f_min && f <= f_max
        })
        .collect();
    ensure!(!bins.is_empty(), Argument, "no STFT bin in the band [{}, {f_max}] Hz", cfg.f_min);
    let pairs: Vec<(usize, usize)> = (0..c_len).flat_map(|i| (i + 1..c_len).map(move |j| (i, j))).collect();
    // PHAT-weighted cross-spectra accumulated over frames: pairs × bins.
    let mut g = Array2::<Complex64>::zeros((pairs.len(), bins.len()));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for (b, &k) in bins.iter().enumerate() {
            for t in 0..t_len {
                let x = y.bins[[i, t, k]] * y.bins[[j, t, k]].conj();
                let n = x.norm();
                if n > 0.0 {
                    g[[p, b]] += x / n;
                }
            }
        }
    }
    // Self-pair terms: one per non-silent (channel, frame, bin).
    let diag = bins
        .iter()
        .map(|&k| (0..c_len).flat_map(|c| (0..t_len).map(move |t| (c, t))).filter(|&(c, t)| y.bins[[c, t, k]].norm() > 0.0).count())
        .sum::<usize>() as f64;
    let azimuths = BeampatternGrid::degree_grid(cfg.n_candidates);
    let v = geom.speed_of_sound();
    let energy: Vec<f64> = azimuths
        .iter()
        .map(|&az| {
            let pos = [cfg.radius * az.cos(), cfg.radius * az.sin(), 0.0];
            let tof: Vec<f64> = geom.positions().iter().map(|m| distance(&pos, m) / v).collect();
            pairs
                .iter()
                .enumerate()
                .map(|(p, &(i, j))| {
                    let tau = tof[i] - tof[j];
                    bins.iter()
                        .enumerate()
                        .map(|(b, &k)| {
                            let w = 2.0 * PI * k as f64 * y.bin_hz;
                            (g[[p, b]] * Complex64::from_polar(1.0, w * tau)).re
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                * 2.0
                + diag
        })
        .collect();
    let argmax = (0..energy.len())
        .max_by(|&a, &b| energy[a].total_cmp(&energy[b]).then(b.cmp(&a)))
        .unwrap();
    Ok(SrpMap {
        azimuths,
        energy,
        argmax,
    })
}

/// Magnitudes as CSV: a header of angles in degrees, one row per frequency.
pub fn beampattern_csv(bp: &Beampattern, grid: &BeampatternGrid) -> String {
    let mut s = String::from("freq_hz");
    for th in &grid.thetas {
        let _ = write!(s, ",{:.4}", th.to_degrees());
    }
    s.push('\n');
    for (f, row) in grid.freqs.iter().zip(bp.values.rows()) {
        let _ = write!(s, "{f:.4}");
        for v in row {
            let _ = write!(s, ",{:.9}", v.norm());
        }
        s.push('\n');
    }
    s
}

/// Time-averaged pattern as CSV rows `theta_deg,magnitude,normalized`.
pub fn averaged_beampattern_csv(bp: &AveragedBeampattern, thetas: &[f64]) -> String {
    let mut s = String::from("theta_deg,magnitude,normalized\n");
    for ((th, v), n) in thetas.iter().zip(&bp.values).zip(&bp.normalized) {
        let _ = writeln!(s, "{:.4},{:.9},{:.9}", th.to_degrees(), v.norm(), n);
    }
    s
}

pub fn srp_csv(map: &SrpMap) -> String {
    let mut s = String::from("azimuth_deg,energy\n");
    for (a, e) in map.azimuths.iter().zip(&map.energy) {
        let _ = writeln!(s, "{:.4},{:.9}", a.to_degrees(), e);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn f_sup_closed_form() {
        let g = ArrayGeometry::uca(8, 0.1).unwrap();
        let direct = 8.0 * 343.0 / (4.0 * PI * 0.1);
        assert!((g.f_sup() - direct).abs() < 1e-9);
        assert!((g.f_sup() - 2183.606).abs() < 1e-3);
    }

    #[test]
    fn delay_and_sum_steers() {
        let g = ArrayGeometry::uca(8, 0.1).unwrap();
        let thetas = BeampatternGrid::degree_grid(360);
        let theta0 = thetas[77];
        let w = delay_and_sum_weights(&g, theta0, 1500.0);
        let b = narrowband_beampattern(&w, &g, 1500.0, &thetas, false).unwrap();
        assert!((b[77].norm() - 1.0).abs() < 1e-12);
        let best = (0..360).max_by(|&a, &b2| b[a].norm().total_cmp(&b[b2].norm())).unwrap();
        assert_eq!(best, 77);
    }

    #[test]
    fn omnidirectional_and_low_frequency_limits() {
        let g = ArrayGeometry::uca(4, 0.05).unwrap();
        let thetas = BeampatternGrid::degree_grid(36);
        let mut w = vec![c(0.0, 0.0); 4];
        w[0] = c(1.0, 0.0);
        let b = narrowband_beampattern(&w, &g, 1000.0, &thetas, false).unwrap();
        assert!(b.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let uni = vec![c(0.25, 0.0); 4];
        let b = narrowband_beampattern(&uni, &g, 1e-6, &thetas, false).unwrap();
        assert!(b.iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-9));
    }

    #[test]
    fn aliasing_is_rejected_unless_allowed() {
        let g = ArrayGeometry::uca(8, 0.1).unwrap();
        let w = vec![c(0.125, 0.0); 8];
        let r = narrowband_beampattern(&w, &g, 3000.0, &[0.0], false);
        assert!(matches!(r, Err(Error::Aliasing { .. })));
        assert!(narrowband_beampattern(&w, &g, 3000.0, &[0.0], true).is_ok());
        assert!(BeampatternGrid::new(vec![0.0], vec![100.0, 2500.0], &g).is_err());
    }

    #[test]
    fn beampattern_is_linear_and_rotation_symmetric() {
        let g = ArrayGeometry::uca(6, 0.08).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rw = || (0..6).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect::<Vec<_>>();
        let (w1, w2) = (rw(), rw());
        let thetas = BeampatternGrid::degree_grid(72);
        let (a, b) = (c(0.3, -1.2), c(-2.0, 0.5));
        let mix: Vec<_> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let f = 1200.0;
        let bm = narrowband_beampattern(&mix, &g, f, &thetas, false).unwrap();
        let b1 = narrowband_beampattern(&w1, &g, f, &thetas, false).unwrap();
        let b2 = narrowband_beampattern(&w2, &g, f, &thetas, false).unwrap();
        for i in 0..72 {
            assert!((bm[i] - (a * b1[i] + b * b2[i])).norm() < 1e-12);
        }
        // Rotating weights by one microphone and the grid by one spacing.
        let rotated: Vec<_> = (0..6).map(|i| w1[(i + 5) % 6]).collect();
        let shifted: Vec<f64> = thetas.iter().map(|t| t + 2.0 * PI / 6.0).collect();
        let br = narrowband_beampattern(&rotated, &g, f, &shifted, false).unwrap();
        for i in 0..72 {
            assert!((br[i].norm() - b1[i].norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn broadband_and_time_average() {
        let g = ArrayGeometry::uca(8, 0.1).unwrap();
        let thetas = BeampatternGrid::degree_grid(360);
        let grid = BeampatternGrid::new(thetas.clone(), vec![500.0, 1000.0, 2000.0], &g).unwrap();
        let w = delay_and_sum_weights(&g, thetas[200], 1000.0);
        let bp = broadband_beampattern(&w, &g, &grid).unwrap();
        let nb = narrowband_beampattern(&w, &g, 1000.0, &thetas, false).unwrap();
        assert_eq!(bp.values.row(1).to_vec(), nb);
        let wt = Array2::from_shape_fn((8, 5), |(ch, _)| w[ch]);
        let avg = time_avg_beampattern(&wt, &g, 1000.0, &thetas, false).unwrap();
        for (a, b) in avg.values.iter().zip(&nb) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((avg.normalized.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        let alt = Array2::from_shape_fn((8, 4), |(ch, t)| if t % 2 == 0 { w[ch] } else { -w[ch] });
        let avg = time_avg_beampattern(&alt, &g, 1000.0, &thetas, false).unwrap();
        assert!(avg.values.iter().all(|v| v.norm() < 1e-12));
        assert!(beampattern_csv(&bp, &grid).lines().count() == 4);
    }

    #[test]
    fn cdr_estimator_limits() {
        // Fully coherent observation: large CDR.
        assert!(cdr_estimate(c(0.999999, 0.0), 0.2) > 1e3);
        // Observation equal to the diffuse coherence: zero CDR.
        assert!(cdr_estimate(c(0.3, 0.0), 0.3) < 1e-9);
        assert!(cdr_estimate(c(0.0, 0.0), 0.0) < 1e-12);
    }

    #[test]
    fn cdr_single_frame_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = ComplexSpectrogram {
            bins: Array3::from_shape_fn((3, 1, 9), |_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            rate: 16000,
            hop_s: 0.01,
            win_s: 0.025,
            bin_hz: 1000.0,
        };
        let g = ArrayGeometry::uca(3, 0.1).unwrap();
        let m = cdr_mask(&y, &g).unwrap();
        assert!(m.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(cdr_mask(&y.select_channels(&[0]), &g.subset(&[0]).unwrap()).is_err());
    }

    #[test]
    fn mvdr_uniform_for_identical_channels_and_identity_noise() {
        let eye = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) });
        let h = mvdr_weights(&eye, &[c(1.0, 0.0); 4]).unwrap();
        assert!(h.iter().all(|v| (v - c(0.25, 0.0)).norm() < 1e-12));
        let zero = Array2::zeros((4, 4));
        assert!(matches!(mvdr_weights(&zero, &[c(1.0, 0.0); 4]), Err(Error::Numeric(_))));
    }

    #[test]
    fn mvdr_is_distortionless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = ComplexSpectrogram {
            bins: Array3::from_shape_fn((4, 30, 17), |_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            rate: 16000,
            hop_s: 0.01,
            win_s: 0.025,
            bin_hz: 31.25,
        };
        let mask = Array2::from_shape_fn((30, 17), |_| rng.gen_range(0.0..1.0));
        let out = mvdr(&y, &mask).unwrap();
        for k in 0..17 {
            let hd: Complex64 = (0..4).map(|ch| out.weights[[k, ch]].conj() * out.steering[[k, ch]]).sum();
            assert!((hd - c(1.0, 0.0)).norm() < 1e-6);
        }
        let again = apply_weights(&y, &out.weights).unwrap();
        assert_eq!(again, out.combined.values);
    }

    #[test]
    fn geometry_json_round_trip() {
        let g = ArrayGeometry::uca(8, 0.1).unwrap();
        let js = serde_json::to_string(&g).unwrap();
        assert!(js.contains("\"uca\""));
        let back: ArrayGeometry = serde_json::from_str(&js).unwrap();
        assert_eq!(back, g);
        let sub = g.subset(&[0, 3]).unwrap();
        let back: ArrayGeometry = serde_json::from_str(&serde_json::to_string(&sub).unwrap()).unwrap();
        assert_eq!(back.positions(), sub.positions());
        assert!(serde_json::from_str::<ArrayGeometry>(r#"{"kind":"uca","radius":0.1,"num_mics":2,"bogus":1}"#).is_err());
        assert!(ArrayGeometry::from_positions(vec![[0.0; 3], [0.0; 3]], 343.0).is_err());
    }
}
