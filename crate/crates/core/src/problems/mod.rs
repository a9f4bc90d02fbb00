//! Benchmark problems with analytic ground truth.
//!
//! A problem owns its point sets, target values and evaluation buffers. It
//! reports per-objective losses over a batch together with gradients over
//! the shared network parameters and over its own task parameters (such as
//! learned coefficients).

pub mod poisson;
pub mod sobolev;
pub mod toy;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::balancing::EnergyIntegrals;
use crate::network::{MlpParams, NormStats};

pub use poisson::{PoissonConfig, PoissonProblem};
pub use sobolev::{Mode, SobolevConfig, SobolevProblem, SobolevTarget};
pub use toy::QuadraticToy;

/// Points per jet sweep. Small chunks keep every buffer of a sweep in cache.
pub const CHUNK: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem configuration: {0}")]
    Config(String),
    #[error("norm of the reference is zero")]
    ZeroNorm,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// Indices drawn for one optimizer step. `primary` indexes the batched
/// point pool; `secondary` is used by problems with a second point set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
}

/// What gradients to return from [`Problem::evaluate`].
#[derive(Clone, Copy, Debug)]
pub enum GradientRequest<'a> {
    /// Only losses.
    None,
    /// One gradient of `Σ_k λ_k L_k`; inactive objectives carry weight 0.
    Weighted(&'a [f64]),
    /// Separate gradients of the listed objectives.
    PerObjective(&'a [usize]),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    /// Mean loss of every objective over the batch.
    pub losses: Vec<f64>,
    /// Shared-parameter gradients, one per requested objective (a single
    /// entry for a weighted request).
    pub grads: Vec<Vec<f64>>,
    /// Task-parameter gradients aligned with `grads`.
    pub task_grads: Vec<Vec<f64>>,
}

/// Test-set error norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestMetrics {
    pub rel_l2: f64,
    pub rel_l1: Option<f64>,
}

/// Model and reference on a square periodic grid, row-major with `y` as the
/// row index.
pub struct GridFields {
    pub side: usize,
    pub model: Vec<f64>,
    pub target: Vec<f64>,
}

pub trait Problem: Send {
    fn name(&self) -> &'static str;

    fn objective_names(&self) -> Vec<String>;

    fn num_objectives(&self) -> usize {
        self.objective_names().len()
    }

    fn input_dim(&self) -> usize {
        2
    }

    /// Normalization fitted on the training inputs.
    fn norm_stats(&self) -> &NormStats;

    /// Size of the pool that mini-batches partition.
    fn pool_size(&self) -> usize;

    /// Disjoint batches covering the pool for one epoch.
    fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
        crate::training::make_batches(self.pool_size(), batch_size, rng)
            .into_iter()
            .map(|primary| Batch {
                primary,
                secondary: Vec::new(),
            })
            .collect()
    }

    fn task_param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn initial_task_params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn evaluate(&mut self, net: &MlpParams, task: &[f64], batch: &Batch, request: GradientRequest<'_>) -> Evaluation;

    fn test_metrics(&mut self, net: &MlpParams, task: &[f64]) -> Result<TestMetrics>;

    /// Energy integrals of the target terms, for problems that have them.
    fn energy_integrals(&self) -> Option<EnergyIntegrals> {
        None
    }

    /// Model and target on the full periodic grid, when there is one.
    fn grid_fields(&mut self, _net: &MlpParams) -> Option<GridFields> {
        None
    }
}

/// `‖pred − truth‖₂ / ‖truth‖₂`.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(ProblemError::Length(pred.len(), truth.len()));
    }
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(ProblemError::ZeroNorm);
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((num / den).sqrt())
}

/// `‖est − truth‖₁ / ‖truth‖₁`.
pub fn relative_l1(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(ProblemError::Length(est.len(), truth.len()));
    }
    let den: f64 = truth.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(ProblemError::ZeroNorm);
    }
    Ok(est.iter().zip(truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / den)
}

/// Writes `x,y,<columns...>` rows for externally checking point sets and
/// ground-truth fields.
pub fn write_points_csv(path: &Path, points: &[f64], columns: &[(&str, &[f64])]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["x", "y"];
    header.extend(columns.iter().map(|c| c.0));
    w.write_record(&header)?;
    for (i, p) in points.chunks_exact(2).enumerate() {
        let mut row = vec![fmt_f64(p[0]), fmt_f64(p[1])];
        row.extend(columns.iter().map(|c| fmt_f64(c.1[i])));
        w.write_record(&row)?;
    }
    w.flush()
}

/// Shortest round-trip decimal form, independent of locale.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Gathers the coordinates of `idx` from a flat `n × 2` array.
pub(crate) fn gather_points(points: &[f64], idx: &[usize], out: &mut Vec<f64>) {
    out.clear();
    for &i in idx {
        out.extend_from_slice(&points[2 * i..2 * i + 2]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_norm_examples() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        let doubled: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((relative_l2(&doubled, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relative_l1(&[1.0, 1.0, 1.0, 0.0], &[1.0; 4]).unwrap(), 0.25);
        assert_eq!(relative_l2(&[1.0], &[0.0]), Err(ProblemError::ZeroNorm));
        assert_eq!(relative_l1(&[1.0], &[0.0]), Err(ProblemError::ZeroNorm));
    }

    #[test]
    fn points_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_points_csv(&path, &[0.0, 0.5, 1.0, 0.25], &[("u", &[0.1, 1.0 / 3.0])]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,u"));
        assert_eq!(lines.next(), Some("0.0,0.5,0.1"));
        let last: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(last, vec![1.0, 0.25, 1.0 / 3.0]);
    }
}
