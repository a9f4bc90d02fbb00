//! Browser bindings: a Sobolev target with its power spectrum, a weighting
//! playground and a small stiffness probe.
//!
//! Every export takes and returns plain numbers or `Float64Array`s so the
//! page needs no glue beyond the generated module.

use std::f64::consts::TAU;

use pinnweights::balancing::{
    inverse_dirichlet_hat, max_avg_hat, mgda_min_norm, uniform_weights, ObjectiveGradients, Statistic, FW_MAX_ITERS,
};
use pinnweights::diagnostics::{power_spectrum, stiffness_probe, ProbeConfig};
use pinnweights::network::{Activation, MlpConfig};
use pinnweights::problems::sobolev::SobolevTarget;
use pinnweights::rng::{self, Gaussian};
use wasm_bindgen::prelude::*;

/// Largest grid side the page may request.
pub const MAX_SIDE: usize = 256;

/// Strategies shown by [`playground_weights`], in output order.
pub const PLAYGROUND_STRATEGIES: [&str; 4] = ["uniform", "inverse-dirichlet", "max-avg", "mgda"];

fn check_side(side: usize) -> Result<(), String> {
    if !(4..=MAX_SIDE).contains(&side) || side % 2 != 0 {
        return Err(format!("grid side must be even and between 4 and {MAX_SIDE}"));
    }
    Ok(())
}

/// Row-major samples of a random `modes`-term target on a periodic
/// `side × side` grid over `[0, 2π)²`.
#[wasm_bindgen]
pub fn target_field(modes: usize, seed: u32, side: usize) -> Result<Vec<f64>, String> {
    check_side(side)?;
    if modes == 0 || modes > 64 {
        return Err("modes must be between 1 and 64".into());
    }
    let target = SobolevTarget::random(modes, TAU, seed as u64);
    let h = TAU / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            out.push(target.eval(c as f64 * h, r as f64 * h, [0, 0]));
        }
    }
    Ok(out)
}

/// Radially binned energy of a row-major square field, bins `0..=side/2`.
#[wasm_bindgen]
pub fn field_spectrum(field: &[f64], side: usize) -> Result<Vec<f64>, String> {
    check_side(side)?;
    power_spectrum(field, side).map(|s| s.energy).map_err(|e| e.to_string())
}

/// Weights each strategy assigns to synthetic objective gradients.
///
/// Objective `k` gets `scales[k] · (ρ z₀ + √(1−ρ²) z_k)` over `params`
/// entries, where the `z` are shared-seed standard normal vectors. Returns
/// one row of `scales.len()` weights per entry of [`PLAYGROUND_STRATEGIES`],
/// each row normalized to sum to one.
#[wasm_bindgen]
pub fn playground_weights(scales: &[f64], correlation: f64, params: usize, seed: u32) -> Result<Vec<f64>, String> {
    if scales.len() < 2 || scales.len() > 8 {
        return Err("between 2 and 8 objectives are supported".into());
    }
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err("gradient scales must be positive".into());
    }
    if !(-1.0..=1.0).contains(&correlation) {
        return Err("correlation must lie in [-1, 1]".into());
    }
    if !(2..=100_000).contains(&params) {
        return Err("parameter count must be between 2 and 100000".into());
    }
    let mut g = Gaussian::new(rng::stream(seed as u64, "playground"));
    let shared: Vec<f64> = (0..params).map(|_| g.sample()).collect();
    let own = (1.0 - correlation * correlation).sqrt();
    let grads: Vec<Vec<f64>> = scales
        .iter()
        .map(|s| shared.iter().map(|z| s * (correlation * z + own * g.sample())).collect())
        .collect();
    let grads = ObjectiveGradients::new(grads).map_err(|e| e.to_string())?;
    let k = scales.len();
    let err = |e: pinnweights::balancing::BalancingError| e.to_string();
    let rows = [
        uniform_weights(k).map_err(err)?,
        inverse_dirichlet_hat(&grads, Statistic::MeanSquare).map_err(err)?,
        max_avg_hat(&grads, &vec![1.0; k]).map_err(err)?,
        mgda_min_norm(&grads, 1e-9, FW_MAX_ITERS).map_err(err)?.lambda,
    ];
    Ok(rows
        .iter()
        .flat_map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(move |v| v / total)
        })
        .collect())
}

/// Ratios `‖∇L_m‖ / ‖∇L_0‖` for pure-tone residuals at `k0 = 1, 2, 4, …`
/// below the Nyquist limit of a `side²` grid, for a 2×16 sine network.
/// The log-log slope is appended as the last element.
#[wasm_bindgen]
pub fn probe_ratios(order: usize, side: usize, seed: u32) -> Result<Vec<f64>, String> {
    check_side(side)?;
    if side > 64 {
        return Err("the probe grid is limited to 64".into());
    }
    if !(1..=4).contains(&order) {
        return Err("derivative order must be between 1 and 4".into());
    }
    let k0s: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|k| 2 * k < side).collect();
    let config = ProbeConfig {
        net: MlpConfig::new(2, 2, 16, Activation::Sin),
        grid: side,
        seeds: vec![seed as u64],
        ..Default::default()
    };
    let probe = stiffness_probe(order, &k0s, &config).map_err(|e| e.to_string())?;
    let mut out = probe.ratios;
    out.push(probe.slope);
    Ok(out)
}
