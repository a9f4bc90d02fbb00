//! Adam, learning-rate schedule, mini-batching, staged objectives and the
//! training loop.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancing::{epsilon_optimal_weights, BalancingError, ObjectiveGradients, Statistic, Strategy, WeightState};
use crate::network::{init_mlp, MlpConfig, MlpParams, NetworkError};
use crate::problems::{GradientRequest, Problem, ProblemError};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch {epoch}, batch {batch}: loss of objective {objective} is not finite")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        objective: usize,
    },
    #[error("epoch {epoch}, batch {batch}: non-finite gradient (losses {losses:?})")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        losses: Vec<f64>,
    },
    #[error("epoch {epoch}: weight update failed: {source}")]
    Strategy {
        epoch: usize,
        #[source]
        source: BalancingError,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Error, PartialEq)]
#[error("gradient entry {index} is not finite")]
pub struct NonFiniteGradient {
    pub index: usize,
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `params` along `grad`. A non-finite gradient leaves
    /// both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> std::result::Result<(), NonFiniteGradient> {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NonFiniteGradient { index });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Piecewise-constant rate: `η₀ · factor^(milestones passed)`.
pub fn lr_schedule(epoch: usize, eta0: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    eta0 * factor.powi(passed as i32)
}

/// Random partition of `0..n` into batches of `batch_size`; the last batch
/// keeps the remainder.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut idx, rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Objectives switched on from `start` onwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub start: usize,
    pub active: Vec<usize>,
    /// Reset the weights when this stage begins. Unset means: only for
    /// max/avg.
    #[serde(default)]
    pub reset_lambda: Option<bool>,
}

/// Index of the stage in effect at `epoch`.
pub fn current_stage(epoch: usize, stages: &[Stage]) -> Option<usize> {
    stages.iter().rposition(|s| s.start <= epoch)
}

/// Objectives active at `epoch`; all of them without a schedule.
pub fn active_objectives(epoch: usize, stages: &[Stage], k: usize) -> Vec<usize> {
    match current_stage(epoch, stages) {
        Some(i) => stages[i].active.clone(),
        None => (0..k).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Epoch period of dynamic weight updates.
    pub cadence: usize,
    pub alpha: f64,
    pub strategy: Strategy,
    pub statistic: Statistic,
    pub seed: u64,
    pub stages: Vec<Stage>,
    /// Clear the Adam moments at stage boundaries.
    pub reset_adam: bool,
    /// Epoch period of test-set evaluation; the last epoch of the run and
    /// of every stage is always evaluated.
    pub test_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20000,
            batch_size: 4096,
            lr: 1e-3,
            milestones: vec![10000, 15000],
            decay: 0.1,
            cadence: 5,
            alpha: 0.5,
            strategy: Strategy::Uniform,
            statistic: Statistic::MeanSquare,
            seed: 0,
            stages: Vec::new(),
            reset_adam: false,
            test_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, n_objectives: usize, pool: usize) -> Result<()> {
        let bad = |m: String| Err(TrainingError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > pool {
            return bad(format!("batch size {} must lie in 1..={pool}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.cadence == 0 || self.test_every == 0 {
            return bad("cadence and test period must be positive".into());
        }
        if self.stages.windows(2).any(|w| w[0].start >= w[1].start) {
            return bad("stage starts must be increasing".into());
        }
        if let Some(first) = self.stages.first() {
            if first.start != 0 {
                return bad("the first stage must start at epoch 0".into());
            }
        }
        if self.stages.last().is_some_and(|s| s.start >= self.epochs) {
            return bad("every stage must start before the last epoch".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.active.is_empty() || s.active.iter().any(|&k| k >= n_objectives) {
                return bad(format!("stage {i} must activate objectives in 0..{n_objectives}"));
            }
            if s.active.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("stage {i} must list objectives in increasing order"));
            }
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    /// Mean loss of every objective over the epoch's batches, taken before
    /// each step.
    pub losses: Vec<f64>,
    /// Weights at the end of the epoch.
    pub lambda: Vec<f64>,
    pub rel_l2: Option<f64>,
    pub rel_l1: Option<f64>,
    pub task: Vec<f64>,
    pub lr: f64,
    /// Seconds since training started.
    pub wall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub objectives: Vec<String>,
    pub task_names: Vec<String>,
    pub records: Vec<EpochRecord>,
    /// Weight updates whose proposal hit the clipping bounds.
    pub clipped_updates: usize,
    /// MGDA updates that stopped at the iteration limit.
    pub unconverged_updates: usize,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

pub struct TrainOutcome {
    pub trace: TrainingTrace,
    pub net: MlpParams,
    pub task: Vec<f64>,
}

/// Starting weights for a strategy; ε-optimal weights come from the
/// problem's energy integrals.
pub fn initial_weights(problem: &dyn Problem, config: &TrainingConfig) -> Result<WeightState> {
    let k = problem.num_objectives();
    let strategy_err = |source| TrainingError::Strategy { epoch: 0, source };
    let mut state = match config.strategy {
        Strategy::EpsilonOptimal => {
            let energies = problem.energy_integrals().ok_or_else(|| {
                TrainingError::Config(format!("{} has no energy integrals for ε-optimal weights", problem.name()))
            })?;
            let lambda = epsilon_optimal_weights(&energies).map_err(strategy_err)?;
            WeightState::with_static(Strategy::EpsilonOptimal, lambda).map_err(strategy_err)?
        }
        s => WeightState::new(s, k, config.alpha, config.cadence).map_err(strategy_err)?,
    };
    state.statistic = config.statistic;
    Ok(state)
}

/// Trains a fresh network on `problem`. `on_epoch` sees the parameters after
/// every epoch.
pub fn train(
    problem: &mut dyn Problem,
    net_config: &MlpConfig,
    config: &TrainingConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &MlpParams, &[f64]),
) -> Result<TrainOutcome> {
    let n_obj = problem.num_objectives();
    config.validate(n_obj, problem.pool_size())?;
    let mut net = init_mlp(&net_config.clone().with_seed(config.seed))?;
    let mut task = problem.initial_task_params();
    let n_shared = net.len();
    let mut state = initial_weights(problem, config)?;
    let mut adam = AdamState::new(n_shared + task.len());
    let mut batch_rng = rng::stream(config.seed, streams::BATCHING);
    let mut trace = TrainingTrace {
        objectives: problem.objective_names(),
        task_names: problem.task_param_names(),
        ..Default::default()
    };
    let start = Instant::now();
    let mut stage = current_stage(0, &config.stages);
    let mut flat = vec![0.0; n_shared + task.len()];
    let mut grad = vec![0.0; n_shared + task.len()];

    for epoch in 0..config.epochs {
        let now = current_stage(epoch, &config.stages);
        if now != stage {
            let s = &config.stages[now.expect("stages only advance")];
            if s.reset_lambda.unwrap_or(config.strategy == Strategy::MaxAvg) {
                state.reset();
            }
            if config.reset_adam {
                adam = AdamState::new(adam.m.len());
            }
            stage = now;
        }
        let active = active_objectives(epoch, &config.stages, n_obj);
        let lr = lr_schedule(epoch, config.lr, &config.milestones, config.decay);
        let batches = problem.epoch_batches(config.batch_size, &mut batch_rng);
        let mut loss_sum = vec![0.0; n_obj];
        let mut count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let losses = if b == 0 && state.is_update_epoch(epoch) {
                let ev = problem.evaluate(&net, &task, batch, GradientRequest::PerObjective(&active));
                check_losses(&ev.losses, &active, epoch, b)?;
                let grads =
                    ObjectiveGradients::new(ev.grads.clone()).map_err(|source| TrainingError::Strategy { epoch, source })?;
                let report = state
                    .update(&active, &grads)
                    .map_err(|source| TrainingError::Strategy { epoch, source })?;
                trace.clipped_updates += report.clipped as usize;
                trace.unconverged_updates += report.unconverged as usize;
                for (j, &k) in active.iter().enumerate() {
                    let l = state.lambda[k];
                    for (g, v) in grad[..n_shared].iter_mut().zip(&ev.grads[j]) {
                        *g += l * v;
                    }
                    for (g, v) in grad[n_shared..].iter_mut().zip(&ev.task_grads[j]) {
                        *g += l * v;
                    }
                }
                ev.losses
            } else {
                let mut lambda = vec![0.0; n_obj];
                for &k in &active {
                    lambda[k] = state.lambda[k];
                }
                let ev = problem.evaluate(&net, &task, batch, GradientRequest::Weighted(&lambda));
                check_losses(&ev.losses, &active, epoch, b)?;
                grad[..n_shared].copy_from_slice(&ev.grads[0]);
                grad[n_shared..].copy_from_slice(&ev.task_grads[0]);
                ev.losses
            };
            let weight = batch.primary.len();
            for (s, l) in loss_sum.iter_mut().zip(&losses) {
                *s += l * weight as f64;
            }
            count += weight;
            flat[..n_shared].copy_from_slice(&net.values);
            flat[n_shared..].copy_from_slice(&task);
            adam.step(&mut flat, &grad, lr)
                .map_err(|_| TrainingError::NonFiniteGradient {
                    epoch,
                    batch: b,
                    losses: losses.clone(),
                })?;
            net.values.copy_from_slice(&flat[..n_shared]);
            task.copy_from_slice(&flat[n_shared..]);
        }
        let stage_ends = config.stages.iter().any(|s| s.start == epoch + 1);
        let (rel_l2, rel_l1) = if epoch % config.test_every == 0 || epoch + 1 == config.epochs || stage_ends {
            let m = problem.test_metrics(&net, &task)?;
            (Some(m.rel_l2), m.rel_l1)
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            stage: stage.unwrap_or(0),
            losses: loss_sum.iter().map(|s| s / count as f64).collect(),
            lambda: state.lambda.clone(),
            rel_l2,
            rel_l1,
            task: task.clone(),
            lr,
            wall: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &net, &task);
        trace.records.push(record);
    }
    Ok(TrainOutcome { trace, net, task })
}

fn check_losses(losses: &[f64], active: &[usize], epoch: usize, batch: usize) -> Result<()> {
    for &k in active {
        if !losses[k].is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                epoch,
                batch,
                objective: k,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, NormStats};
    use crate::problems::{Batch, Evaluation, QuadraticToy, SobolevConfig, SobolevProblem, TestMetrics};

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut a = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        a.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(a.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign_descent() {
        let mut a = AdamState::new(3);
        let mut p = vec![0.0; 3];
        a.step(&mut p, &[3.0, -0.2, 1e-3], 0.01).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.01 * s).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let g = [0.3, -1.2, 0.05];
        let run = |c: f64| {
            let mut a = AdamState::new(3);
            let mut p = vec![0.0; 3];
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            a.step(&mut p, &scaled, 1e-3).unwrap();
            p
        };
        let base = run(1.0);
        for c in [10.0, 100.0] {
            for (a, b) in run(c).iter().zip(&base) {
                assert!((a - b).abs() <= 1e-6 * b.abs());
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut a = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        assert_eq!(a.step(&mut p, &[0.0, f64::NAN], 1e-3), Err(NonFiniteGradient { index: 1 }));
        assert_eq!(a.t, 0);
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn schedule_examples() {
        let m = [10000, 15000];
        assert_eq!(lr_schedule(0, 1e-3, &m, 0.1), 1e-3);
        assert!((lr_schedule(12000, 1e-3, &m, 0.1) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(16000, 1e-3, &m, 0.1) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn batch_examples() {
        let mut r = rng::stream(1, streams::BATCHING);
        let b = make_batches(8, 4, &mut r);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        let sizes: Vec<usize> = make_batches(5, 2, &mut r).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let a: Vec<_> = (0..3).map(|_| make_batches(10, 3, &mut rng::stream(4, "b"))).collect();
        assert_eq!(a[0], a[1]);
        let mut r = rng::stream(4, "b");
        let e1 = make_batches(10, 3, &mut r);
        let e2 = make_batches(10, 3, &mut r);
        assert_ne!(e1, e2, "batches are reshuffled every epoch");
    }

    #[test]
    fn stage_controller_examples() {
        let stages = vec![
            Stage {
                start: 0,
                active: vec![0],
                reset_lambda: None,
            },
            Stage {
                start: 1000,
                active: vec![0, 1],
                reset_lambda: None,
            },
            Stage {
                start: 2000,
                active: vec![0, 1, 2],
                reset_lambda: None,
            },
        ];
        assert_eq!(active_objectives(999, &stages, 3), vec![0]);
        assert_eq!(active_objectives(1000, &stages, 3), vec![0, 1]);
        assert_eq!(active_objectives(5000, &stages, 3), vec![0, 1, 2]);
        assert_eq!(active_objectives(7, &[], 3), vec![0, 1, 2]);
    }

    fn toy_config(strategy: Strategy) -> TrainingConfig {
        TrainingConfig {
            epochs: 200,
            batch_size: 1,
            lr: 0.05,
            milestones: vec![],
            strategy,
            ..Default::default()
        }
    }

    #[test]
    fn quadratic_toy_converges() {
        let mut p = QuadraticToy::new(3.0);
        let net = MlpConfig::new(2, 1, 2, Activation::Sin);
        let out = train(&mut p, &net, &toy_config(Strategy::Uniform), &mut |_, _, _| {}).unwrap();
        let v = out.net.values[QuadraticToy::parameter_index(&out.net)];
        assert!((v - 3.0).abs() < 1e-3, "{v}");
    }

    fn desk_sobolev(epochs: usize, strategy: Strategy) -> (SobolevProblem, MlpConfig, TrainingConfig) {
        let p = SobolevProblem::new(
            SobolevConfig {
                modes: 2,
                grid: 16,
                max_order: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let net = MlpConfig::new(2, 2, 8, Activation::Sin);
        let cfg = TrainingConfig {
            epochs,
            batch_size: 64,
            lr: 1e-3,
            milestones: vec![],
            strategy,
            seed: 3,
            ..Default::default()
        };
        (p, net, cfg)
    }

    #[test]
    fn epsilon_optimal_weights_are_static() {
        let (mut p, net, cfg) = desk_sobolev(12, Strategy::EpsilonOptimal);
        let out = train(&mut p, &net, &cfg, &mut |_, _, _| {}).unwrap();
        let first = &out.trace.records[0].lambda;
        assert!((first.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.trace.records.iter().all(|r| &r.lambda == first));
    }

    #[test]
    fn training_is_deterministic() {
        for s in [Strategy::InverseDirichlet, Strategy::Mgda, Strategy::MaxAvg] {
            let (mut p, net, cfg) = desk_sobolev(11, s);
            let a = train(&mut p, &net, &cfg, &mut |_, _, _| {}).unwrap();
            let (mut p, net, cfg) = desk_sobolev(11, s);
            let b = train(&mut p, &net, &cfg, &mut |_, _, _| {}).unwrap();
            assert_eq!(a.net.values, b.net.values);
            let strip = |t: &TrainingTrace| -> Vec<EpochRecord> {
                t.records.iter().map(|r| EpochRecord { wall: 0.0, ..r.clone() }).collect()
            };
            assert_eq!(strip(&a.trace), strip(&b.trace));
            // weights moved away from their start
            assert_ne!(a.trace.records[0].lambda, a.trace.records[10].lambda);
        }
    }

    /// Scales every loss of the wrapped problem, as if the weights were
    /// folded into the loss constants.
    struct Folded<P> {
        inner: P,
        lambda: Vec<f64>,
    }

    impl<P: Problem> Problem for Folded<P> {
        fn name(&self) -> &'static str {
            "folded"
        }
        fn objective_names(&self) -> Vec<String> {
            self.inner.objective_names()
        }
        fn norm_stats(&self) -> &NormStats {
            self.inner.norm_stats()
        }
        fn pool_size(&self) -> usize {
            self.inner.pool_size()
        }
        fn initial_task_params(&self) -> Vec<f64> {
            self.inner.initial_task_params()
        }
        fn evaluate(&mut self, net: &MlpParams, task: &[f64], batch: &Batch, request: GradientRequest<'_>) -> Evaluation {
            let GradientRequest::Weighted(l) = request else {
                unreachable!("static weights only")
            };
            let folded: Vec<f64> = l.iter().zip(&self.lambda).map(|(a, b)| a * b).collect();
            let mut e = self.inner.evaluate(net, task, batch, GradientRequest::Weighted(&folded));
            for (v, w) in e.losses.iter_mut().zip(&self.lambda) {
                *v *= w;
            }
            e
        }
        fn test_metrics(&mut self, net: &MlpParams, task: &[f64]) -> crate::problems::Result<TestMetrics> {
            self.inner.test_metrics(net, task)
        }
    }

    #[test]
    fn static_weights_equal_folded_losses() {
        let lambda = vec![0.5, 2.0, 0.25];
        let (mut p, net, cfg) = desk_sobolev(6, Strategy::Uniform);
        // static weights through the weight state
        let mut weighted = {
            let mut state_cfg = cfg.clone();
            state_cfg.strategy = Strategy::Uniform;
            state_cfg
        };
        weighted.epochs = 6;
        let out_folded = {
            let (inner, _, _) = desk_sobolev(6, Strategy::Uniform);
            let mut f = Folded {
                inner,
                lambda: lambda.clone(),
            };
            train(&mut f, &net, &weighted, &mut |_, _, _| {}).unwrap()
        };
        // the same run with λ applied by the trainer
        let mut net0 = init_mlp(&net.clone().with_seed(cfg.seed)).unwrap();
        let mut task = p.initial_task_params();
        let mut adam = AdamState::new(net0.len() + task.len());
        let mut r = rng::stream(cfg.seed, streams::BATCHING);
        for _ in 0..6 {
            for batch in p.epoch_batches(cfg.batch_size, &mut r) {
                let e = p.evaluate(&net0, &task, &batch, GradientRequest::Weighted(&lambda));
                let mut flat: Vec<f64> = net0.values.iter().chain(&task).copied().collect();
                let g: Vec<f64> = e.grads[0].iter().chain(&e.task_grads[0]).copied().collect();
                adam.step(&mut flat, &g, cfg.lr).unwrap();
                let n = net0.len();
                net0.values.copy_from_slice(&flat[..n]);
                task.copy_from_slice(&flat[n..]);
            }
        }
        for (a, b) in out_folded.net.values.iter().zip(&net0.values) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn stage_boundaries_reset_max_avg_weights() {
        let (mut p, net, mut cfg) = desk_sobolev(16, Strategy::MaxAvg);
        cfg.stages = vec![
            Stage {
                start: 0,
                active: vec![0, 1],
                reset_lambda: None,
            },
            Stage {
                start: 8,
                active: vec![0, 1, 2],
                reset_lambda: None,
            },
        ];
        let mut seen = Vec::new();
        let out = train(&mut p, &net, &cfg, &mut |r, _, _| seen.push(r.stage)).unwrap();
        assert_eq!(seen[7], 0);
        assert_eq!(seen[8], 1);
        // epoch 7 carried updated weights; objective 2 was untouched
        let r7 = &out.trace.records[7].lambda;
        assert_ne!(r7[1], 1.0);
        assert_eq!(r7[2], 1.0);
        assert_eq!(r7[0], 1.0);

        // with the reset flag off the weights carry over
        cfg.stages[1].reset_lambda = Some(false);
        cfg.epochs = 9;
        cfg.cadence = 7;
        let (mut p, _, _) = desk_sobolev(9, Strategy::MaxAvg);
        let out = train(&mut p, &net, &cfg, &mut |_, _, _| {}).unwrap();
        assert_eq!(out.trace.records[7].lambda, out.trace.records[8].lambda);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (mut p, net, mut cfg) = desk_sobolev(1, Strategy::Uniform);
        cfg.milestones = vec![5, 5];
        assert!(matches!(train(&mut p, &net, &cfg, &mut |_, _, _| {}), Err(TrainingError::Config(_))));
        cfg.milestones = vec![];
        cfg.batch_size = 100_000;
        assert!(matches!(train(&mut p, &net, &cfg, &mut |_, _, _| {}), Err(TrainingError::Config(_))));
        cfg.batch_size = 8;
        cfg.stages = vec![Stage {
            start: 0,
            active: vec![7],
            reset_lambda: None,
        }];
        assert!(matches!(train(&mut p, &net, &cfg, &mut |_, _, _| {}), Err(TrainingError::Config(_))));
    }
}
