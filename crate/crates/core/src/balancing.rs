//! Loss-weighting strategies over per-objective gradient vectors.
//!
//! Every strategy turns the gradients `∇L_k` of `K` objectives (taken over
//! the shared parameters at one parameter state and batch) into weights
//! `λ_k`. Dynamic strategies produce a proposal `λ̂` that is blended into the
//! running weights with a moving average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds applied to every dynamic proposal `λ̂`.
pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e8;

pub const FW_TOLERANCE: f64 = 1e-6;
pub const FW_MAX_ITERS: usize = 250;

#[derive(Debug, Error, PartialEq)]
pub enum BalancingError {
    #[error("the objective set is empty")]
    Empty,
    #[error("objective {objective} has {got} gradient entries, expected {expected}")]
    Shape {
        objective: usize,
        expected: usize,
        got: usize,
    },
    #[error("objective {objective} needs at least two gradient entries")]
    TooShort { objective: usize },
    #[error("objective {objective} has a non-finite gradient entry")]
    NonFinite { objective: usize },
    #[error("objective {objective} has zero gradient {statistic}; it no longer trains")]
    DeadObjective { objective: usize, statistic: &'static str },
    #[error("weight of objective {objective} must be positive, got {value}")]
    NonPositiveWeight { objective: usize, value: f64 },
    #[error("energy integral of objective {objective} must be positive and finite, got {value}")]
    BadEnergy { objective: usize, value: f64 },
    #[error("moving-average rate must lie in [0, 1), got {0}")]
    Rate(f64),
    #[error("min-norm problem needs at least two objectives")]
    TooFewObjectives,
    #[error("Gram matrix has non-finite entries")]
    NonFiniteGram,
}

pub type Result<T> = std::result::Result<T, BalancingError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Uniform,
    InverseDirichlet,
    MaxAvg,
    Mgda,
    EpsilonOptimal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uniform,
        Strategy::InverseDirichlet,
        Strategy::MaxAvg,
        Strategy::Mgda,
        Strategy::EpsilonOptimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::InverseDirichlet => "inverse-dirichlet",
            Strategy::MaxAvg => "max-avg",
            Strategy::Mgda => "mgda",
            Strategy::EpsilonOptimal => "epsilon-optimal",
        }
    }

    /// Whether the weights change during training.
    pub fn is_dynamic(self) -> bool {
        matches!(self, Strategy::InverseDirichlet | Strategy::MaxAvg | Strategy::Mgda)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Gradient statistic used by inverse-Dirichlet weighting. Mean square is
/// the default: under Adam the second-moment estimate is what matters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    #[default]
    MeanSquare,
    /// Population (1/N) variance.
    Variance,
    /// Square root of the mean square. The weights then scale with the
    /// inverse gradient magnitude rather than its square, so the weighted
    /// gradients have equal scale instead of the weak objectives dominating.
    RootMeanSquare,
}

impl Statistic {
    fn name(self) -> &'static str {
        match self {
            Statistic::MeanSquare => "mean square",
            Statistic::Variance => "variance",
            Statistic::RootMeanSquare => "root mean square",
        }
    }

    pub fn of(self, g: &[f64]) -> f64 {
        let n = g.len() as f64;
        match self {
            Statistic::MeanSquare => g.iter().map(|v| v * v).sum::<f64>() / n,
            Statistic::Variance => {
                let mean = g.iter().sum::<f64>() / n;
                g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
            }
            Statistic::RootMeanSquare => Statistic::MeanSquare.of(g).sqrt(),
        }
    }
}

/// Per-objective gradients over the shared parameters, all of equal length
/// and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradients {
    grads: Vec<Vec<f64>>,
}

impl ObjectiveGradients {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        let first = grads.first().ok_or(BalancingError::Empty)?;
        let expected = first.len();
        for (k, g) in grads.iter().enumerate() {
            if g.len() != expected {
                return Err(BalancingError::Shape {
                    objective: k,
                    expected,
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(BalancingError::NonFinite { objective: k });
            }
        }
        Ok(Self { grads })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.grads[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(|g| g.as_slice())
    }

    /// `Q = UᵀU` where the columns of `U` are the gradients.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let k = self.len();
        let mut q = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = dot(&self.grads[i], &self.grads[j]);
                q[i][j] = v;
                q[j][i] = v;
            }
        }
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn uniform_weights(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(BalancingError::Empty);
    }
    Ok(vec![1.0; k])
}

/// `λ̂_k = max_t stat_t / stat_k`. The objective with the largest statistic
/// gets exactly 1.
pub fn inverse_dirichlet_hat(grads: &ObjectiveGradients, mode: Statistic) -> Result<Vec<f64>> {
    let mut stats = Vec::with_capacity(grads.len());
    for (k, g) in grads.iter().enumerate() {
        if g.len() < 2 {
            return Err(BalancingError::TooShort { objective: k });
        }
        let s = mode.of(g);
        if s <= 0.0 {
            return Err(BalancingError::DeadObjective {
                objective: k,
                statistic: mode.name(),
            });
        }
        stats.push(s);
    }
    let max = stats.iter().copied().fold(f64::MIN, f64::max);
    Ok(stats.iter().map(|s| max / s).collect())
}

/// `λ̂_k = max|∇L_0| / (λ_k · mean|∇L_k|)` with objective 0 as the anchor;
/// its entry is always 1.
pub fn max_avg_hat(grads: &ObjectiveGradients, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != grads.len() {
        return Err(BalancingError::Shape {
            objective: 0,
            expected: grads.len(),
            got: lambda.len(),
        });
    }
    let anchor = grads.get(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut hat = vec![1.0; grads.len()];
    for k in 1..grads.len() {
        let g = grads.get(k);
        let mean_abs = g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
        if mean_abs <= 0.0 {
            return Err(BalancingError::DeadObjective {
                objective: k,
                statistic: "mean absolute value",
            });
        }
        if !(lambda[k] > 0.0) {
            return Err(BalancingError::NonPositiveWeight {
                objective: k,
                value: lambda[k],
            });
        }
        hat[k] = anchor / (lambda[k] * mean_abs);
    }
    Ok(hat)
}

/// `λ' = α λ + (1 − α) λ̂`, componentwise.
pub fn moving_average_update(lambda: &[f64], hat: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(BalancingError::Rate(alpha));
    }
    Ok(lambda
        .iter()
        .zip(hat)
        .map(|(l, h)| alpha * l + (1.0 - alpha) * h)
        .collect())
}

/// Clamps a proposal to `[LAMBDA_MIN, LAMBDA_MAX]`; reports whether any
/// entry moved.
pub fn clip_weights(hat: &mut [f64]) -> bool {
    let mut clipped = false;
    for h in hat.iter_mut() {
        let c = h.clamp(LAMBDA_MIN, LAMBDA_MAX);
        clipped |= c != *h;
        *h = c;
    }
    clipped
}

/// Integrals `I_k = ∫ (ξ_k D^k u)²` by midpoint quadrature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyIntegrals {
    pub values: Vec<f64>,
    pub cell_area: f64,
}

/// `I_k = cell_area · Σ_i field_k[i]²` for fields sampled at cell centres
/// (or nodes of a periodic grid).
pub fn compute_energy_integrals(fields: &[Vec<f64>], cell_area: f64) -> Result<EnergyIntegrals> {
    let mut values = Vec::with_capacity(fields.len());
    for (k, f) in fields.iter().enumerate() {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(BalancingError::NonFinite { objective: k });
        }
        values.push(cell_area * f.iter().map(|v| v * v).sum::<f64>());
    }
    Ok(EnergyIntegrals { values, cell_area })
}

/// Static weights `λ*_k ∝ Π_{j≠k} I_j`, normalized to sum to one.
///
/// Dividing every product by `Π_j I_j / min_j I_j` leaves `min_j I_j / I_k`,
/// which is the log-space difference `log I_min − log I_k` evaluated
/// without forming any product, so no `K` or `I` range can overflow.
pub fn epsilon_optimal_weights(energies: &EnergyIntegrals) -> Result<Vec<f64>> {
    let i = &energies.values;
    if i.is_empty() {
        return Err(BalancingError::Empty);
    }
    for (k, &v) in i.iter().enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(BalancingError::BadEnergy { objective: k, value: v });
        }
    }
    let min = i.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = i.iter().map(|v| min / v).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinNormSolution {
    /// Weights on the simplex.
    pub lambda: Vec<f64>,
    /// `λᵀQλ = ‖Σ λ_k g_k‖²`.
    pub norm_sq: f64,
    /// Duality gap `λᵀQλ − min_i (Qλ)_i` at the returned point.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Min-norm point of the convex hull of the gradients.
pub fn mgda_min_norm(grads: &ObjectiveGradients, tol: f64, max_iters: usize) -> Result<MinNormSolution> {
    frank_wolfe(&grads.gram(), tol, max_iters)
}

/// Frank-Wolfe with away steps and exact line search for `min ½ λᵀQλ`
/// over the simplex, started from the uniform point. Ties in the vertex
/// choice go to the lowest index, so identical gradients return the uniform
/// point.
pub fn frank_wolfe(q: &[Vec<f64>], tol: f64, max_iters: usize) -> Result<MinNormSolution> {
    let k = q.len();
    if k < 2 {
        return Err(BalancingError::TooFewObjectives);
    }
    if q.iter().any(|row| row.len() != k || row.iter().any(|v| !v.is_finite())) {
        return Err(BalancingError::NonFiniteGram);
    }
    let matvec = |l: &[f64]| -> Vec<f64> { q.iter().map(|row| dot(row, l)).collect() };
    let mut lambda = vec![1.0 / k as f64; k];
    let mut best: Option<MinNormSolution> = None;
    for it in 0..=max_iters {
        let ql = matvec(&lambda);
        let norm_sq = dot(&lambda, &ql);
        let (i, min) = ql
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (j, &v)| if v < bv { (j, v) } else { (bi, bv) });
        let gap = norm_sq - min;
        let current = MinNormSolution {
            lambda: lambda.clone(),
            norm_sq,
            gap,
            iterations: it,
            converged: gap <= tol,
        };
        if current.converged {
            return Ok(current);
        }
        if best.as_ref().map_or(true, |b| norm_sq < b.norm_sq) {
            best = Some(current);
        }
        if it == max_iters {
            break;
        }
        // Away vertex: the active vertex with the largest (Qλ)_j. Stepping
        // away from it is what lets the method converge linearly when the
        // optimum lies on a face of the simplex.
        let (a, max) = ql
            .iter()
            .enumerate()
            .filter(|&(j, _)| lambda[j] > 0.0)
            .fold((i, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
        let toward = gap >= max - norm_sq || a == i;
        // direction d = e_i − λ (toward) or λ − e_a (away)
        let mut d: Vec<f64> = lambda.iter().map(|l| if toward { -l } else { *l }).collect();
        let (vertex, limit) = if toward {
            (i, 1.0)
        } else if lambda[a] < 1.0 {
            (a, lambda[a] / (1.0 - lambda[a]))
        } else {
            (a, f64::INFINITY)
        };
        d[vertex] += if toward { 1.0 } else { -1.0 };
        let slope = dot(&d, &ql);
        let curvature = dot(&d, &matvec(&d));
        let gamma = if curvature <= 0.0 { limit } else { (-slope / curvature).clamp(0.0, limit) };
        if !gamma.is_finite() || gamma == 0.0 {
            break;
        }
        for (l, dj) in lambda.iter_mut().zip(&d) {
            *l = (*l + gamma * dj).max(0.0);
        }
        if !toward && gamma == limit {
            lambda[a] = 0.0;
        }
        let total: f64 = lambda.iter().sum();
        lambda.iter_mut().for_each(|l| *l /= total);
    }
    let mut best = best.expect("at least one iterate");
    best.iterations = max_iters;
    Ok(best)
}

/// What a weight update did, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Proposal before the moving average (empty for static strategies).
    pub hat: Vec<f64>,
    pub clipped: bool,
    /// Only set for MGDA.
    pub unconverged: bool,
}

/// Current weights of a training run and the rule that updates them.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightState {
    pub strategy: Strategy,
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub statistic: Statistic,
    /// Epoch period of dynamic updates.
    pub cadence: usize,
    pub tol: f64,
    pub max_iters: usize,
    initial: Vec<f64>,
}

impl WeightState {
    /// Starting weights: ones, except MGDA which starts at the simplex
    /// centre. Use [`WeightState::with_static`] for ε-optimal weights.
    pub fn new(strategy: Strategy, k: usize, alpha: f64, cadence: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(BalancingError::Rate(alpha));
        }
        let lambda = match strategy {
            Strategy::Mgda => vec![1.0 / k as f64; k],
            _ => uniform_weights(k)?,
        };
        Ok(Self {
            strategy,
            initial: lambda.clone(),
            lambda,
            alpha,
            statistic: Statistic::default(),
            cadence: cadence.max(1),
            tol: FW_TOLERANCE,
            max_iters: FW_MAX_ITERS,
        })
    }

    /// Fixed weights that never change.
    pub fn with_static(strategy: Strategy, lambda: Vec<f64>) -> Result<Self> {
        for (k, &v) in lambda.iter().enumerate() {
            if !(v > 0.0) {
                return Err(BalancingError::NonPositiveWeight { objective: k, value: v });
            }
        }
        let mut s = Self::new(Strategy::Uniform, lambda.len(), 0.5, 1)?;
        s.strategy = strategy;
        s.initial = lambda.clone();
        s.lambda = lambda;
        Ok(s)
    }

    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        self.strategy.is_dynamic() && epoch % self.cadence == 0
    }

    /// Restores the starting weights.
    pub fn reset(&mut self) {
        self.lambda = self.initial.clone();
    }

    /// Updates the weights of the objectives in `active` from their
    /// gradients (`grads.get(j)` belongs to objective `active[j]`). The
    /// anchor of max/avg is the first active objective.
    pub fn update(&mut self, active: &[usize], grads: &ObjectiveGradients) -> Result<UpdateReport> {
        assert_eq!(active.len(), grads.len());
        let current: Vec<f64> = active.iter().map(|&k| self.lambda[k]).collect();
        let (next, report) = match self.strategy {
            Strategy::Uniform | Strategy::EpsilonOptimal => return Ok(UpdateReport::default()),
            Strategy::InverseDirichlet | Strategy::MaxAvg => {
                let mut hat = if self.strategy == Strategy::MaxAvg {
                    max_avg_hat(grads, &current)
                } else {
                    inverse_dirichlet_hat(grads, self.statistic)
                }
                .map_err(|e| remap(e, active))?;
                let clipped = clip_weights(&mut hat);
                if clipped {
                    log::debug!("weight proposal clipped to [{LAMBDA_MIN}, {LAMBDA_MAX}]");
                }
                let mut next = moving_average_update(&current, &hat, self.alpha)?;
                if self.strategy == Strategy::MaxAvg {
                    next[0] = current[0];
                }
                (
                    next,
                    UpdateReport {
                        hat,
                        clipped,
                        unconverged: false,
                    },
                )
            }
            Strategy::Mgda => {
                if grads.len() < 2 {
                    // a single active objective is its own min-norm point
                    (vec![1.0], UpdateReport::default())
                } else {
                    let sol = mgda_min_norm(grads, self.tol, self.max_iters)?;
                    if !sol.converged {
                        log::debug!("Frank-Wolfe stopped with gap {:.3e}", sol.gap);
                    }
                    (
                        sol.lambda.clone(),
                        UpdateReport {
                            hat: sol.lambda,
                            clipped: false,
                            unconverged: !sol.converged,
                        },
                    )
                }
            }
        };
        for (&k, v) in active.iter().zip(next) {
            self.lambda[k] = v;
        }
        Ok(report)
    }
}

/// Maps objective indices of a subset back to the full objective set.
fn remap(e: BalancingError, active: &[usize]) -> BalancingError {
    match e {
        BalancingError::DeadObjective { objective, statistic } => BalancingError::DeadObjective {
            objective: active[objective],
            statistic,
        },
        BalancingError::TooShort { objective } => BalancingError::TooShort {
            objective: active[objective],
        },
        BalancingError::NonPositiveWeight { objective, value } => BalancingError::NonPositiveWeight {
            objective: active[objective],
            value,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn grads(g: Vec<Vec<f64>>) -> ObjectiveGradients {
        ObjectiveGradients::new(g).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn inverse_dirichlet_examples() {
        // variances [4, 1]
        let g = grads(vec![vec![2.0, -2.0], vec![1.0, -1.0]]);
        assert_eq!(inverse_dirichlet_hat(&g, Statistic::Variance).unwrap(), vec![1.0, 4.0]);
        let g = grads(vec![vec![1.0, 2.0, 3.0]; 3]);
        assert_eq!(inverse_dirichlet_hat(&g, Statistic::Variance).unwrap(), vec![1.0; 3]);
        let g = grads(vec![vec![1.0, -1.0], vec![3.0, -3.0]]);
        assert_eq!(inverse_dirichlet_hat(&g, Statistic::Variance).unwrap(), vec![9.0, 1.0]);
        assert_eq!(inverse_dirichlet_hat(&g, Statistic::MeanSquare).unwrap(), vec![9.0, 1.0]);
        assert_eq!(inverse_dirichlet_hat(&g, Statistic::RootMeanSquare).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn dead_objective_is_named() {
        let g = grads(vec![vec![1.0, -1.0], vec![2.0, 2.0]]);
        assert_eq!(
            inverse_dirichlet_hat(&g, Statistic::Variance),
            Err(BalancingError::DeadObjective {
                objective: 1,
                statistic: "variance"
            })
        );
        let g = grads(vec![vec![1.0, -1.0], vec![0.0, 0.0]]);
        assert!(matches!(
            max_avg_hat(&g, &[1.0, 1.0]),
            Err(BalancingError::DeadObjective { objective: 1, .. })
        ));
    }

    #[test]
    fn max_avg_examples() {
        let g = grads(vec![vec![3.0, -1.0], vec![1.0, 1.0]]);
        assert_eq!(max_avg_hat(&g, &[1.0, 1.0]).unwrap(), vec![1.0, 3.0]);
        let c = 2.5;
        let g = grads(vec![vec![c, c], vec![c, c]]);
        assert_eq!(max_avg_hat(&g, &[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        let g = grads(vec![vec![2.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(max_avg_hat(&g, &[1.0, 4.0]).unwrap(), vec![1.0, 0.5]);
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average_update(&[1.0], &[3.0], 0.5).unwrap(), vec![2.0]);
        assert_eq!(moving_average_update(&[1.5, 2.0], &[1.5, 2.0], 0.5).unwrap(), vec![1.5, 2.0]);
        assert_eq!(moving_average_update(&[1.5, 2.0], &[7.0, 3.0], 0.0).unwrap(), vec![7.0, 3.0]);
        assert_eq!(moving_average_update(&[1.0], &[1.0], 1.0), Err(BalancingError::Rate(1.0)));
    }

    #[test]
    fn epsilon_optimal_examples() {
        let w = |i: Vec<f64>| {
            epsilon_optimal_weights(&EnergyIntegrals {
                values: i,
                cell_area: 1.0,
            })
        };
        assert_eq!(w(vec![1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(close(&w(vec![2.0, 1.0, 1.0]).unwrap(), &[0.2, 0.4, 0.4], 1e-15));
        assert!(matches!(w(vec![1.0, 0.0]), Err(BalancingError::BadEnergy { objective: 1, .. })));
        // extreme ranges stay finite
        let big = w(vec![1e300, 1e-300, 1.0, 1e200, 1e-200]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn energy_integral_examples() {
        // constant 1 on the unit square
        let n = 10;
        let e = compute_energy_integrals(&[vec![1.0; n * n]], 1.0 / (n * n) as f64).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        let m = 4096;
        let h = std::f64::consts::TAU / m as f64;
        let f: Vec<f64> = (0..m).map(|i| (i as f64 * h).sin()).collect();
        let e = compute_energy_integrals(&[f.clone()], h).unwrap();
        assert!((e.values[0] - std::f64::consts::PI).abs() < 1e-3);
        let doubled: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        let e2 = compute_energy_integrals(&[doubled], h).unwrap();
        assert!((e2.values[0] - 4.0 * e.values[0]).abs() < 1e-12);
        assert!(compute_energy_integrals(&[vec![f64::NAN]], 1.0).is_err());
    }

    #[test]
    fn min_norm_examples() {
        let s = mgda_min_norm(&grads(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), 1e-6, 250).unwrap();
        assert!(close(&s.lambda, &[0.5, 0.5], 1e-12));
        let s = mgda_min_norm(&grads(vec![vec![1.0, 2.0]; 3]), 1e-6, 250).unwrap();
        assert_eq!(s.lambda, vec![1.0 / 3.0; 3]);
        let s = mgda_min_norm(&grads(vec![vec![2.0, 0.0], vec![0.0, 1.0]]), 1e-6, 250).unwrap();
        assert!(close(&s.lambda, &[0.2, 0.8], 1e-12));
        // brute-force oracle for the last case: minimize 4γ² + (1 − γ)²
        let best = (0..=10_000)
            .map(|i| i as f64 / 10_000.0)
            .min_by(|a, b| {
                let f = |g: f64| 4.0 * g * g + (1.0 - g) * (1.0 - g);
                f(*a).partial_cmp(&f(*b)).unwrap()
            })
            .unwrap();
        assert!((s.lambda[0] - best).abs() < 1e-4);
    }

    #[test]
    fn frank_wolfe_rejects_bad_input() {
        assert_eq!(frank_wolfe(&[vec![1.0]], 1e-6, 10), Err(BalancingError::TooFewObjectives));
        assert_eq!(
            frank_wolfe(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]], 1e-6, 10),
            Err(BalancingError::NonFiniteGram)
        );
    }

    #[test]
    fn unconverged_solution_is_flagged() {
        let g = grads(vec![vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.1], vec![0.2, 0.0, 2.0]]);
        let s = mgda_min_norm(&g, 0.0, 3).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 3);
        assert!((s.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_weights(2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(uniform_weights(5).unwrap(), vec![1.0; 5]);
        assert_eq!(uniform_weights(0), Err(BalancingError::Empty));
    }

    #[test]
    fn gradients_are_validated() {
        assert_eq!(ObjectiveGradients::new(vec![]), Err(BalancingError::Empty));
        assert!(matches!(
            ObjectiveGradients::new(vec![vec![1.0, 2.0], vec![1.0]]),
            Err(BalancingError::Shape { objective: 1, .. })
        ));
        assert_eq!(
            ObjectiveGradients::new(vec![vec![1.0, f64::INFINITY]]),
            Err(BalancingError::NonFinite { objective: 0 })
        );
    }

    #[test]
    fn weight_state_updates() {
        let g = grads(vec![vec![1.0, -1.0], vec![3.0, -3.0]]);
        let mut s = WeightState::new(Strategy::InverseDirichlet, 2, 0.5, 5).unwrap();
        let r = s.update(&[0, 1], &g).unwrap();
        assert_eq!(r.hat, vec![9.0, 1.0]);
        assert_eq!(s.lambda, vec![5.0, 1.0]);
        assert!(s.is_update_epoch(10) && !s.is_update_epoch(11));

        let mut s = WeightState::new(Strategy::MaxAvg, 2, 0.5, 5).unwrap();
        let g = grads(vec![vec![3.0, -1.0], vec![1.0, 1.0]]);
        s.update(&[0, 1], &g).unwrap();
        assert_eq!(s.lambda, vec![1.0, 2.0]);
        s.reset();
        assert_eq!(s.lambda, vec![1.0, 1.0]);

        let mut s = WeightState::new(Strategy::Mgda, 3, 0.5, 5).unwrap();
        assert_eq!(s.lambda, vec![1.0 / 3.0; 3]);
        let g = grads(vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        s.update(&[0, 2], &g).unwrap();
        assert!(close(&s.lambda, &[0.2, 1.0 / 3.0, 0.8], 1e-12));

        let mut s = WeightState::with_static(Strategy::EpsilonOptimal, vec![0.2, 0.8]).unwrap();
        assert!(!s.is_update_epoch(0));
        s.update(&[0, 1], &g).unwrap();
        assert_eq!(s.lambda, vec![0.2, 0.8]);
    }

    #[test]
    fn subset_errors_name_the_full_index() {
        let mut s = WeightState::new(Strategy::InverseDirichlet, 3, 0.5, 5).unwrap();
        let g = grads(vec![vec![1.0, -1.0], vec![0.0, 0.0]]);
        assert!(matches!(
            s.update(&[0, 2], &g),
            Err(BalancingError::DeadObjective { objective: 2, .. })
        ));
    }

    #[test]
    fn clipping_bounds_proposals() {
        let mut h = vec![1e-12, 1.0, 1e12];
        assert!(clip_weights(&mut h));
        assert_eq!(h, vec![LAMBDA_MIN, 1.0, LAMBDA_MAX]);
        assert!(!clip_weights(&mut h));
    }

    fn gradient_sets(k: std::ops::Range<usize>) -> impl PropStrategy<Value = Vec<Vec<f64>>> {
        (k, 2usize..40).prop_flat_map(|(k, n)| {
            proptest::collection::vec(
                (0.01f64..100.0).prop_flat_map(move |scale| {
                    proptest::collection::vec(-1.0f64..1.0, n)
                        .prop_map(move |v| v.into_iter().map(|x| x * scale).collect::<Vec<_>>())
                }),
                k,
            )
        })
    }


    proptest! {
        #[test]
        fn inverse_dirichlet_equalizes(g in gradient_sets(1..7)) {
            let g = grads(g);
            for mode in [Statistic::Variance, Statistic::MeanSquare, Statistic::RootMeanSquare] {
                let Ok(hat) = inverse_dirichlet_hat(&g, mode) else { continue };
                let stats: Vec<f64> = g.iter().map(|v| mode.of(v)).collect();
                let max = stats.iter().copied().fold(f64::MIN, f64::max);
                for (h, s) in hat.iter().zip(&stats) {
                    prop_assert!((h * s - max).abs() <= 1e-12 * max);
                }
            }
        }

        #[test]
        fn inverse_dirichlet_scale_covariance(g in gradient_sets(2..5), c in 0.1f64..10.0) {
            let base = inverse_dirichlet_hat(&grads(g.clone()), Statistic::Variance);
            let mut scaled = g;
            for v in scaled[1].iter_mut() { *v *= c; }
            let moved = inverse_dirichlet_hat(&grads(scaled), Statistic::Variance);
            if let (Ok(a), Ok(b)) = (base, moved) {
                // relative to the others, objective 1 loses a factor c²
                let ra = a[1] / a[0];
                let rb = b[1] / b[0];
                prop_assert!((rb * c * c - ra).abs() <= 1e-10 * ra);
            }
        }

        #[test]
        fn epsilon_optimal_equalizes(i in proptest::collection::vec(1e-6f64..1e6, 1..8)) {
            let w = epsilon_optimal_weights(&EnergyIntegrals { values: i.clone(), cell_area: 1.0 }).unwrap();
            let p: Vec<f64> = w.iter().zip(&i).map(|(a, b)| a * b).collect();
            for v in &p {
                prop_assert!((v - p[0]).abs() <= 1e-12 * p[0]);
            }
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }

        #[test]
        fn min_norm_descent_and_monotonicity(g in gradient_sets(2..6)) {
            let g = grads(g);
            let q = g.gram();
            let sol = mgda_min_norm(&g, 1e-6, 250).unwrap();
            prop_assert!(sol.lambda.iter().all(|&l| l >= 0.0));
            prop_assert!((sol.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if sol.converged {
                let d: Vec<f64> = (0..g.get(0).len())
                    .map(|j| sol.lambda.iter().zip(g.iter()).map(|(l, v)| l * v[j]).sum())
                    .collect();
                let dd = dot(&d, &d);
                for v in g.iter() {
                    prop_assert!(dot(&d, v) >= dd - 1e-6 - 1e-9 * dd);
                }
            }
            // objective never increases along the iterates
            // rounding floor of λᵀQλ near a zero optimum
            let floor = 1e-14 * q.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut prev = f64::INFINITY;
            for it in 0..30 {
                let s = frank_wolfe(&q, 0.0, it).unwrap();
                let l = &s.lambda;
                let val: f64 = (0..l.len()).map(|a| (0..l.len()).map(|b| l[a] * q[a][b] * l[b]).sum::<f64>()).sum();
                prop_assert!(val <= prev * (1.0 + 1e-12) + floor);
                prev = val;
            }
        }
    }
}
