//! Sobolev training with coefficient inference.
//!
//! The target is a sum of separable sinusoids on the periodic square
//! `[0, L)²`. Objective 0 fits the values; objective `k ≥ 1` fits the pure
//! `k`-th partials along each axis, scaled by a learned coefficient `ξ̂_k`
//! whose true value is 1:
//!
//! `L_k = mean_i Σ_axes (ξ̂_k ∂^k u_θ(x_i) − ξ_k ∂^k u(x_i))²`.
//!
//! With `x_only` set, only the x-partials enter.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    gather_points, relative_l1, relative_l2, Batch, Evaluation, GradientRequest, GridFields, Problem, ProblemError,
    Result, TestMetrics, CHUNK,
};
use crate::autodiff::{Expr, Graph, VarId};
use crate::balancing::{compute_energy_integrals, EnergyIntegrals};
use crate::network::{evaluate_values, input_derivative_expr, JetForward, JetLayout, MlpParams, NormStats};
use crate::rng::{self, streams};

pub const MAX_AMPLITUDE: f64 = 5.0;
pub const MAX_LENGTH_SCALE: u32 = 5;

/// One term `A_x cos(2π l_x x/L + φ_x) · A_y sin(2π l_y y/L + φ_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub ax: f64,
    pub ay: f64,
    pub phase_x: f64,
    pub phase_y: f64,
    pub lx: u32,
    pub ly: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevTarget {
    pub modes: Vec<Mode>,
    pub length: f64,
}

/// `d^n/dt^n cos(t)` and `d^n/dt^n sin(t)` by quarter-turn shifts.
fn shifted_cos(t: f64, n: usize) -> f64 {
    let (s, c) = t.sin_cos();
    [c, -s, -c, s][n % 4]
}

fn shifted_sin(t: f64, n: usize) -> f64 {
    let (s, c) = t.sin_cos();
    [s, c, -s, -c][n % 4]
}

impl SobolevTarget {
    /// Draws `m` modes from the target stream of `seed`: amplitudes in
    /// `[−5, 5]`, phases in `[0, 2π]`, length scales in `{1, …, 5}`.
    pub fn random(m: usize, length: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut r = rng::stream(seed, streams::TARGET);
        let modes = (0..m)
            .map(|_| Mode {
                ax: rng::uniform(&mut r, -MAX_AMPLITUDE, MAX_AMPLITUDE),
                ay: rng::uniform(&mut r, -MAX_AMPLITUDE, MAX_AMPLITUDE),
                phase_x: rng::uniform(&mut r, 0.0, TAU),
                phase_y: rng::uniform(&mut r, 0.0, TAU),
                lx: r.gen_range(1..=MAX_LENGTH_SCALE),
                ly: r.gen_range(1..=MAX_LENGTH_SCALE),
            })
            .collect();
        Self { modes, length }
    }

    pub fn from_modes(modes: Vec<Mode>, length: f64) -> Result<Self> {
        if !(length > 0.0) {
            return Err(ProblemError::Config("domain length must be positive".into()));
        }
        for (i, m) in modes.iter().enumerate() {
            let amp_ok = m.ax.abs() <= MAX_AMPLITUDE && m.ay.abs() <= MAX_AMPLITUDE;
            let phase_ok = (0.0..=TAU).contains(&m.phase_x) && (0.0..=TAU).contains(&m.phase_y);
            let l_ok = (1..=MAX_LENGTH_SCALE).contains(&m.lx) && (1..=MAX_LENGTH_SCALE).contains(&m.ly);
            if !(amp_ok && phase_ok && l_ok) {
                return Err(ProblemError::Config(format!("mode {i} is outside the allowed ranges")));
            }
        }
        Ok(Self { modes, length })
    }

    /// `∂^{bx+by} u / ∂x^bx ∂y^by` at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64, beta: [usize; 2]) -> f64 {
        let w = TAU / self.length;
        self.modes
            .iter()
            .map(|m| {
                let (kx, ky) = (w * m.lx as f64, w * m.ly as f64);
                m.ax * kx.powi(beta[0] as i32)
                    * shifted_cos(kx * x + m.phase_x, beta[0])
                    * m.ay
                    * ky.powi(beta[1] as i32)
                    * shifted_sin(ky * y + m.phase_y, beta[1])
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobolevConfig {
    /// Number of target modes `M`.
    pub modes: usize,
    pub length: f64,
    /// Grid nodes per axis.
    pub grid: usize,
    /// Highest derivative order `K`.
    pub max_order: usize,
    /// Fit x-partials only instead of both axes.
    pub x_only: bool,
    pub train_fraction: f64,
    /// Starting value of every learned coefficient.
    pub xi_init: f64,
    /// Seed of the target; the run seed when unset.
    pub target_seed: Option<u64>,
}

impl Default for SobolevConfig {
    fn default() -> Self {
        Self {
            modes: 20,
            length: TAU,
            grid: 128,
            max_order: 4,
            x_only: false,
            train_fraction: 0.5,
            xi_init: 0.5,
            target_seed: None,
        }
    }
}

impl SobolevConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProblemError::Config(m.into()));
        if self.grid < 2 {
            return bad("grid needs at least 2 nodes per axis");
        }
        if self.max_order > crate::network::jet::MAX_ORDER {
            return bad("derivative orders above 4 are not supported");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train fraction must lie in (0, 1]");
        }
        if !(self.length > 0.0) {
            return bad("domain length must be positive");
        }
        if !self.xi_init.is_finite() {
            return bad("initial coefficient must be finite");
        }
        Ok(())
    }
}

pub struct SobolevProblem {
    config: SobolevConfig,
    layout: JetLayout,
    /// Grid nodes, `n² × 2`, index `iy·n + ix`.
    points: Vec<f64>,
    train: Vec<usize>,
    test: Vec<usize>,
    /// Target jets per grid node in slot order (`n² × slots`).
    targets: Vec<f64>,
    xi: Vec<f64>,
    norm: NormStats,
    fwd: JetForward,
    buf: Vec<f64>,
}

impl SobolevProblem {
    /// Problem for the random target drawn from `config.target_seed` (or
    /// `seed`); the split is drawn from the sampling stream of `seed`.
    pub fn new(config: SobolevConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let target = SobolevTarget::random(config.modes, config.length, config.target_seed.unwrap_or(seed));
        Self::with_target(config, seed, &|x, y, b| target.eval(x, y, b))
    }

    /// Problem for an arbitrary target given by its partials.
    pub fn with_target(config: SobolevConfig, seed: u64, target: &dyn Fn(f64, f64, [usize; 2]) -> f64) -> Result<Self> {
        config.validate()?;
        let n = config.grid;
        let k = config.max_order;
        let layout = JetLayout::new(&[k, if config.x_only { 0 } else { k }]);
        let h = config.length / n as f64;
        let mut points = Vec::with_capacity(2 * n * n);
        for iy in 0..n {
            for ix in 0..n {
                points.extend_from_slice(&[ix as f64 * h, iy as f64 * h]);
            }
        }
        let slots = layout.num_slots();
        let mut targets = vec![0.0; n * n * slots];
        for (p, xy) in points.chunks_exact(2).enumerate() {
            targets[p * slots] = target(xy[0], xy[1], [0, 0]);
            for axis in 0..2 {
                for j in 1..=layout.order(axis) {
                    let mut beta = [0, 0];
                    beta[axis] = j;
                    targets[p * slots + layout.slot(axis, j)] = target(xy[0], xy[1], beta);
                }
            }
        }
        let mut perm: Vec<usize> = (0..n * n).collect();
        rng::shuffle(&mut perm, &mut rng::stream(seed, streams::SAMPLING));
        let n_train = ((n * n) as f64 * config.train_fraction).round() as usize;
        if n_train == 0 {
            return Err(ProblemError::Config("split leaves an empty train set".into()));
        }
        let test = perm.split_off(n_train);
        let train = perm;
        let mut train_points = Vec::new();
        gather_points(&points, &train, &mut train_points);
        let norm = NormStats::fit(&train_points, 2)?;
        Ok(Self {
            xi: vec![1.0; k],
            fwd: JetForward::with_layout(&layout),
            config,
            layout,
            points,
            train,
            test,
            targets,
            norm,
            buf: Vec::new(),
        })
    }

    pub fn config(&self) -> &SobolevConfig {
        &self.config
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    pub fn grid_points(&self) -> &[f64] {
        &self.points
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    /// Target jet of grid node `p` in `slot`.
    pub fn target(&self, p: usize, slot: usize) -> f64 {
        self.targets[p * self.layout.num_slots() + slot]
    }

    /// Adds the jets of `net` to the target, so that at those parameters
    /// the residual is exactly the original target.
    pub fn shift_target_by(&mut self, net: &MlpParams) {
        let slots = self.layout.num_slots();
        let n_all = self.points.len() / 2;
        for start in (0..n_all).step_by(CHUNK) {
            let end = (start + CHUNK).min(n_all);
            self.fwd.run(net, &self.norm, &self.points[2 * start..2 * end]);
            for s in 0..slots {
                for (i, v) in self.fwd.output_slot(s).iter().enumerate() {
                    self.targets[(start + i) * slots + s] += v;
                }
            }
        }
    }

    /// Slots that enter objective `k`.
    fn objective_slots(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let axes: Vec<usize> = if k == 0 {
            vec![0]
        } else {
            (0..2).filter(|&a| self.layout.order(a) >= k).collect()
        };
        axes.into_iter().map(move |a| self.layout.slot(a, k))
    }

    fn coefficient(task: &[f64], k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            task[k - 1]
        }
    }

    fn truth(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.xi[k - 1]
        }
    }
}

impl Problem for SobolevProblem {
    fn name(&self) -> &'static str {
        "sobolev"
    }

    fn objective_names(&self) -> Vec<String> {
        (0..=self.config.max_order).map(|k| format!("L{k}")).collect()
    }

    fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    fn pool_size(&self) -> usize {
        self.train.len()
    }

    fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
        crate::training::make_batches(self.train.len(), batch_size, rng)
            .into_iter()
            .map(|primary| Batch {
                primary,
                secondary: Vec::new(),
            })
            .collect()
    }

    fn task_param_names(&self) -> Vec<String> {
        (1..=self.config.max_order).map(|k| format!("xi{k}")).collect()
    }

    fn initial_task_params(&self) -> Vec<f64> {
        vec![self.config.xi_init; self.config.max_order]
    }

    fn evaluate(&mut self, net: &MlpParams, task: &[f64], batch: &Batch, request: GradientRequest<'_>) -> Evaluation {
        let n_obj = self.config.max_order + 1;
        let slots = self.layout.num_slots();
        let nb = batch.primary.len();
        let scale = 2.0 / nb as f64;
        let (n_grads, max_order) = match request {
            GradientRequest::None => (0, 0),
            GradientRequest::Weighted(l) => {
                let top = (0..n_obj).filter(|&k| l[k] != 0.0).max().unwrap_or(0);
                (1, top)
            }
            GradientRequest::PerObjective(list) => (list.len(), 0),
        };
        let mut out = Evaluation {
            losses: vec![0.0; n_obj],
            grads: vec![vec![0.0; net.len()]; n_grads],
            task_grads: vec![vec![0.0; task.len()]; n_grads],
        };
        let mut pts = std::mem::take(&mut self.buf);
        let mut seed = Vec::new();
        for chunk in batch.primary.chunks(CHUNK) {
            let grid_idx: Vec<usize> = chunk.iter().map(|&i| self.train[i]).collect();
            gather_points(&self.points, &grid_idx, &mut pts);
            self.fwd.run(net, &self.norm, &pts);
            let c = chunk.len();
            // residual r = ξ̂ m − ξ t of objective k on one slot
            let residuals = |this: &Self, k: usize, s: usize| -> Vec<(f64, f64)> {
                let coef = Self::coefficient(task, k);
                let truth = this.truth(k);
                this.fwd
                    .output_slot(s)
                    .iter()
                    .zip(&grid_idx)
                    .map(|(&m, &g)| (coef * m - truth * this.targets[g * slots + s], m))
                    .collect()
            };
            for k in 0..n_obj {
                for s in self.objective_slots(k).collect::<Vec<_>>() {
                    out.losses[k] += residuals(self, k, s).iter().map(|(r, _)| r * r).sum::<f64>();
                }
            }
            let fill = |this: &Self, k: usize, w: f64, seed: &mut [f64], tg: &mut [f64]| {
                let coef = Self::coefficient(task, k);
                for s in this.objective_slots(k) {
                    let res = residuals(this, k, s);
                    for (p, (r, m)) in res.iter().enumerate() {
                        seed[s * c + p] += scale * w * coef * r;
                        if k > 0 {
                            tg[k - 1] += scale * w * r * m;
                        }
                    }
                }
            };
            match request {
                GradientRequest::None => {}
                GradientRequest::Weighted(lambda) => {
                    seed.clear();
                    seed.resize(slots * c, 0.0);
                    for (k, &w) in lambda.iter().enumerate() {
                        if w != 0.0 {
                            fill(self, k, w, &mut seed, &mut out.task_grads[0]);
                        }
                    }
                    self.fwd.backward_truncated(net, &seed, &mut out.grads[0], max_order);
                }
                GradientRequest::PerObjective(list) => {
                    for (j, &k) in list.iter().enumerate() {
                        seed.clear();
                        seed.resize(slots * c, 0.0);
                        fill(self, k, 1.0, &mut seed, &mut out.task_grads[j]);
                        self.fwd.backward_truncated(net, &seed, &mut out.grads[j], k);
                    }
                }
            }
        }
        self.buf = pts;
        for l in out.losses.iter_mut() {
            *l /= nb as f64;
        }
        out
    }

    fn test_metrics(&mut self, net: &MlpParams, task: &[f64]) -> Result<TestMetrics> {
        if self.test.is_empty() {
            return Err(ProblemError::Config("no held-out grid nodes to test on".into()));
        }
        let mut pts = Vec::new();
        gather_points(&self.points, &self.test, &mut pts);
        let pred = evaluate_values(net, &self.norm, &pts);
        let truth: Vec<f64> = self.test.iter().map(|&g| self.target(g, 0)).collect();
        Ok(TestMetrics {
            rel_l2: relative_l2(&pred, &truth)?,
            rel_l1: Some(relative_l1(task, &self.xi)?),
        })
    }

    /// `I_0 = ∫ u²` and `I_k = ∫ Σ_axes (ξ_k ∂^k u)²` on the full grid.
    fn energy_integrals(&self) -> Option<EnergyIntegrals> {
        let h = self.config.length / self.config.grid as f64;
        let n_all = self.points.len() / 2;
        let fields: Vec<Vec<f64>> = (0..=self.config.max_order)
            .map(|k| {
                let slots: Vec<usize> = self.objective_slots(k).collect();
                let truth = self.truth(k);
                let mut f = Vec::with_capacity(n_all * slots.len());
                for &s in &slots {
                    f.extend((0..n_all).map(|p| truth * self.target(p, s)));
                }
                f
            })
            .collect();
        compute_energy_integrals(&fields, h * h).ok()
    }

    fn grid_fields(&mut self, net: &MlpParams) -> Option<GridFields> {
        let model = evaluate_values(net, &self.norm, &self.points);
        let n_all = self.points.len() / 2;
        Some(GridFields {
            side: self.config.grid,
            model,
            target: (0..n_all).map(|p| self.target(p, 0)).collect(),
        })
    }
}

/// Per-point objective expressions over the expression engine.
pub struct SobolevExprs {
    /// `Σ_axes (ξ̂_k ∂^k u − ξ_k t_k)²` for `k = 0..=K` at one point.
    pub objectives: Vec<Expr>,
    /// Input variables holding the target jets, in slot order.
    pub targets: Vec<VarId>,
}

/// Builds the Sobolev objectives of one point for the network output `u`
/// over `inputs = [x, y]`, with `xi_hat[k − 1]` as the learned coefficient
/// of order `k`.
pub fn build_sobolev_objectives(
    graph: &mut Graph,
    u: Expr,
    inputs: [VarId; 2],
    xi_hat: &[VarId],
    layout: &JetLayout,
) -> SobolevExprs {
    let targets: Vec<VarId> = (0..layout.num_slots())
        .map(|s| graph.input(&format!("target[{s}]")))
        .collect();
    let k_max = xi_hat.len();
    let mut objectives = Vec::with_capacity(k_max + 1);
    let t0 = graph.var(targets[0]);
    let r0 = graph.sub(u, t0);
    objectives.push(graph.square(r0));
    for k in 1..=k_max {
        let coef = graph.var(xi_hat[k - 1]);
        let mut terms = Vec::new();
        for axis in 0..2 {
            if layout.order(axis) < k {
                continue;
            }
            let mut beta = [0, 0];
            beta[axis] = k;
            let d = input_derivative_expr(graph, u, &inputs, &beta);
            let scaled = graph.mul(coef, d);
            let t = graph.var(targets[layout.slot(axis, k)]);
            let r = graph.sub(scaled, t);
            terms.push(graph.square(r));
        }
        objectives.push(graph.sum(&terms));
    }
    SobolevExprs { objectives, targets }
}
