//! Spectral and statistical instrumentation: 2D power spectra, residual
//! spectra, gradient histograms and the stiffness probe.
//!
//! The forward transform is unnormalized and the inverse carries `1/n` with
//! `n` the number of grid nodes. Energies divide `|ũ|²` by `n²`, so that the
//! sum over all modes equals the mean square of the field.

use std::f64::consts::TAU;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::balancing::ObjectiveGradients;
use crate::network::{init_mlp, JetForward, JetLayout, MlpConfig, MlpParams, NetworkError, NormStats};
use crate::problems::{Batch, GradientRequest, Problem, ProblemError, SobolevConfig, SobolevProblem};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("grid side {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("field of length {len} is not a {side}×{side} grid")]
    Shape { len: usize, side: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("stiffness probe: {0}")]
    Probe(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

fn check_grid(len: usize, side: usize) -> Result<()> {
    if !side.is_power_of_two() {
        return Err(DiagnosticsError::NotPowerOfTwo(side));
    }
    if len != side * side {
        return Err(DiagnosticsError::Shape { len, side });
    }
    Ok(())
}

fn transform(data: &mut [Complex64], side: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(side)
    } else {
        planner.plan_fft_forward(side)
    };
    // rows, then columns through a transpose
    fft.process(data);
    let mut t = vec![Complex64::default(); side * side];
    for r in 0..side {
        for c in 0..side {
            t[c * side + r] = data[r * side + c];
        }
    }
    fft.process(&mut t);
    for r in 0..side {
        for c in 0..side {
            data[c * side + r] = t[r * side + c];
        }
    }
}

/// Unnormalized 2D DFT of a row-major `side × side` real field.
pub fn fft2(field: &[f64], side: usize) -> Result<Vec<Complex64>> {
    check_grid(field.len(), side)?;
    let mut data: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, side, false);
    Ok(data)
}

/// Inverse of [`fft2`], including the `1/n` factor.
pub fn ifft2(modes: &[Complex64], side: usize) -> Result<Vec<Complex64>> {
    check_grid(modes.len(), side)?;
    let mut data = modes.to_vec();
    transform(&mut data, side, true);
    let scale = 1.0 / modes.len() as f64;
    data.iter_mut().for_each(|v| *v *= scale);
    Ok(data)
}

/// Signed integer wavenumber of DFT index `i`.
fn wavenumber(i: usize, side: usize) -> f64 {
    if i <= side / 2 {
        i as f64
    } else {
        i as f64 - side as f64
    }
}

/// Radially binned energy with bins `0..=side/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumResult {
    pub k: Vec<usize>,
    pub energy: Vec<f64>,
    pub side: usize,
}

impl SpectrumResult {
    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }
}

/// `Σ |ũ|² / n²` over every mode; equals the mean square of the field.
pub fn mode_energy(modes: &[Complex64]) -> f64 {
    let n = modes.len() as f64;
    modes.iter().map(|m| m.norm_sqr()).sum::<f64>() / (n * n)
}

/// Power spectrum binned by `round(|k|)`. Modes beyond the Nyquist ring
/// are dropped.
pub fn power_spectrum(field: &[f64], side: usize) -> Result<SpectrumResult> {
    if field.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let modes = fft2(field, side)?;
    let nyquist = side / 2;
    let norm = (modes.len() as f64).powi(2);
    let mut energy = vec![0.0; nyquist + 1];
    for r in 0..side {
        for c in 0..side {
            let k = wavenumber(r, side).hypot(wavenumber(c, side)).round() as usize;
            if k <= nyquist {
                energy[k] += modes[r * side + c].norm_sqr() / norm;
            }
        }
    }
    Ok(SpectrumResult {
        k: (0..=nyquist).collect(),
        energy,
        side,
    })
}

/// `|FFT(u_θ − u)|` on the grid at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualSpectrum {
    pub epoch: usize,
    pub side: usize,
    /// Row-major magnitudes, DFT index order.
    pub magnitude: Vec<f64>,
}

pub fn residual_spectrum(model: &[f64], target: &[f64], side: usize, epoch: usize) -> Result<ResidualSpectrum> {
    if model.len() != target.len() {
        return Err(DiagnosticsError::Shape { len: model.len(), side });
    }
    let r: Vec<f64> = model.iter().zip(target).map(|(a, b)| a - b).collect();
    let modes = fft2(&r, side)?;
    Ok(ResidualSpectrum {
        epoch,
        side,
        magnitude: modes.iter().map(|m| m.norm()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max_abs: f64,
}

impl GradientStats {
    pub fn of(g: &[f64]) -> Self {
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            max_abs: g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

/// Histograms of several objectives' gradients over shared bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientHistogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    /// Counts per objective, then per bin.
    pub counts: Vec<Vec<usize>>,
    pub stats: Vec<GradientStats>,
}

/// Equal-width bins spanning all objectives' entries. A range of zero
/// width is widened to one unit around the value.
pub fn gradient_histogram(grads: &ObjectiveGradients, bins: usize) -> Result<GradientHistogram> {
    if bins == 0 {
        return Err(DiagnosticsError::NoBins);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for g in grads.iter() {
        for &v in g {
            if !v.is_finite() {
                return Err(DiagnosticsError::NonFinite);
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi - lo <= 0.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let counts = grads
        .iter()
        .map(|g| {
            let mut c = vec![0usize; bins];
            for &v in g {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        })
        .collect();
    Ok(GradientHistogram {
        edges,
        counts,
        stats: grads.iter().map(GradientStats::of).collect(),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Gradient-norm ratios of the order-`m` objective against the value fit at
/// initialization, for pure-tone residuals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StiffnessProbe {
    pub m: usize,
    pub k0: Vec<usize>,
    /// Seed-averaged `‖∇L_m‖ / ‖∇L_0‖` per wavenumber.
    pub ratios: Vec<f64>,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub net: MlpConfig,
    pub grid: usize,
    pub length: f64,
    pub seeds: Vec<u64>,
    /// Reseeds allowed when the value-fit gradient vanishes.
    pub retries: usize,
    /// Taper the tone with `sin⁴(x/2) sin⁴(y/2)` (in units of the period) so
    /// that it and its first three derivatives vanish on the boundary. This
    /// removes the boundary terms of the non-periodic network, but the
    /// network's projection onto a tapered tone decays so fast with `k₀` that
    /// it reaches rounding level near `k₀ = 8` on a 64² grid.
    pub window: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            net: MlpConfig::new(2, 4, 32, crate::network::Activation::Sin),
            grid: 64,
            length: TAU,
            seeds: (0..5).collect(),
            retries: 3,
            window: false,
        }
    }
}

/// `d^n/dt^n` of `cos` and `sin` by quarter-turn shifts.
fn cos_partial(t: f64, n: usize) -> f64 {
    let (s, c) = t.sin_cos();
    [c, -s, -c, s][n % 4]
}

fn sin_partial(t: f64, n: usize) -> f64 {
    let (s, c) = t.sin_cos();
    [s, c, -s, -c][n % 4]
}

/// `n`-th derivative of `sin⁴(s t / 2) = (3 − 4 cos(st) + cos(2st)) / 8`,
/// which vanishes to fourth order at both ends of the period.
fn window_partial(s: f64, t: f64, n: usize) -> f64 {
    let constant = if n == 0 { 3.0 } else { 0.0 };
    (constant - 4.0 * s.powi(n as i32) * cos_partial(s * t, n) + (2.0 * s).powi(n as i32) * cos_partial(2.0 * s * t, n)) / 8.0
}

fn binomial(n: usize, j: usize) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `n`-th derivative of one factor of the probe residual: `sin(k t)`,
/// optionally tapered by the window.
fn tone_factor(k: f64, s: f64, t: f64, n: usize, window: bool) -> f64 {
    let tone = |j: usize| k.powi(j as i32) * sin_partial(k * t, j);
    if !window {
        return tone(n);
    }
    (0..=n).map(|j| binomial(n, j) * window_partial(s, t, j) * tone(n - j)).sum()
}

/// Ratio for one wavenumber and seed. The target is the network at
/// initialization plus the tone, so at those parameters the residual is the
/// tone itself. Every grid node enters, so sums over the grid approximate
/// domain integrals.
fn probe_ratio(m: usize, k0: usize, net: &MlpParams, config: &ProbeConfig, seed: u64) -> Result<f64> {
    let s = TAU / config.length;
    let k = k0 as f64 * s;
    let sobolev = SobolevConfig {
        modes: 0,
        length: config.length,
        grid: config.grid,
        max_order: m,
        train_fraction: 1.0,
        xi_init: 1.0,
        ..Default::default()
    };
    let w = config.window;
    let tone = move |x: f64, y: f64, b: [usize; 2]| tone_factor(k, s, x, b[0], w) * tone_factor(k, s, y, b[1], w);
    let mut problem = SobolevProblem::with_target(sobolev, seed, &tone)?;
    problem.shift_target_by(net);
    let batch = Batch {
        primary: (0..problem.pool_size()).collect(),
        secondary: Vec::new(),
    };
    let task = problem.initial_task_params();
    let ev = problem.evaluate(net, &task, &batch, GradientRequest::PerObjective(&[0, m]));
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(norm(&ev.grads[1]) / norm(&ev.grads[0]))
}

pub fn stiffness_probe(m: usize, k0s: &[usize], config: &ProbeConfig) -> Result<StiffnessProbe> {
    if k0s.is_empty() || k0s[0] == 0 || k0s.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiagnosticsError::Probe("wavenumbers must be increasing positive integers".into()));
    }
    if config.seeds.is_empty() {
        return Err(DiagnosticsError::Probe("at least one seed is needed".into()));
    }
    if 2 * k0s[k0s.len() - 1] >= config.grid {
        return Err(DiagnosticsError::Probe("wavenumbers must stay below the grid's Nyquist limit".into()));
    }
    let mut ratios = Vec::with_capacity(k0s.len());
    for &k0 in k0s {
        let mut sum = 0.0;
        for &seed in &config.seeds {
            let mut ratio = None;
            for attempt in 0..=config.retries as u64 {
                let s = seed + attempt * 1_000_003;
                let net = init_mlp(&config.net.clone().with_seed(s))?;
                let r = probe_ratio(m, k0, &net, config, s)?;
                if r.is_finite() && r > 0.0 {
                    ratio = Some(r);
                    break;
                }
            }
            sum += ratio.ok_or_else(|| DiagnosticsError::Probe(format!("degenerate gradients for seed {seed}")))?;
        }
        ratios.push(sum / config.seeds.len() as f64);
    }
    let x: Vec<f64> = k0s.iter().map(|&k| k as f64).collect();
    let slope = if k0s.len() > 1 { log_log_slope(&x, &ratios) } else { 0.0 };
    Ok(StiffnessProbe {
        m,
        k0: k0s.to_vec(),
        ratios,
        slope,
    })
}

/// `‖∂ũ_θ(k)/∂θ‖` for the axis modes `(k, 0)` and `(0, k)`, averaged, on a
/// periodic `side²` grid of `[0, length)²`.
pub fn spectral_sensitivity(net: &MlpParams, side: usize, length: f64, ks: &[usize]) -> Vec<f64> {
    let h = length / side as f64;
    let mut points = Vec::with_capacity(2 * side * side);
    for iy in 0..side {
        for ix in 0..side {
            points.extend_from_slice(&[ix as f64 * h, iy as f64 * h]);
        }
    }
    let norm = NormStats::fit(&points, 2).expect("grid has spread");
    let layout = JetLayout::value_only(2);
    let mut fwd = JetForward::new(net, &norm, &points, &layout);
    let mut g = vec![0.0; net.len()];
    ks.iter()
        .map(|&k| {
            let w = TAU * k as f64 / length;
            let mut total = 0.0;
            for axis in 0..2 {
                for part in [f64::cos, f64::sin] {
                    let seed: Vec<f64> = points.chunks_exact(2).map(|p| part(w * p[axis])).collect();
                    g.iter_mut().for_each(|v| *v = 0.0);
                    fwd.backward(net, &seed, &mut g);
                    total += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
            (total / 2.0).sqrt()
        })
        .collect()
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
