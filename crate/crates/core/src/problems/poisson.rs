//! Poisson equation `Δu = f` on the unit square with the manufactured
//! solution `u = cos(ωx) sin(ωy)`, so `f = −2ω² cos(ωx) sin(ωy)`.
//!
//! Objective 0 is the mean squared PDE residual over interior points and
//! objective 1 the mean squared Dirichlet mismatch over boundary points.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gather_points, relative_l2, Batch, Evaluation, GradientRequest, Problem, ProblemError, Result, TestMetrics, CHUNK};
use crate::network::{evaluate_values, JetForward, JetLayout, MlpParams, NormStats};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonConfig {
    pub omega: f64,
    /// Interior collocation points, uniform in the open square.
    pub interior: usize,
    /// Equidistant boundary points per edge.
    pub per_edge: usize,
    /// Test grid nodes per axis.
    pub test_grid: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            omega: std::f64::consts::PI,
            interior: 2500,
            per_edge: 100,
            test_grid: 100,
        }
    }
}

impl PoissonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega != 0.0) {
            return Err(ProblemError::Config("omega must be finite and nonzero".into()));
        }
        if self.interior < 2 || self.per_edge < 1 || self.test_grid < 2 {
            return Err(ProblemError::Config("point counts are too small".into()));
        }
        Ok(())
    }
}

pub fn exact_solution(omega: f64, x: f64, y: f64) -> f64 {
    (omega * x).cos() * (omega * y).sin()
}

pub fn forcing(omega: f64, x: f64, y: f64) -> f64 {
    -2.0 * omega * omega * exact_solution(omega, x, y)
}

/// `per_edge` equidistant points on each edge, traversed counter-clockwise
/// from the origin; each corner belongs to the edge that starts there.
pub fn boundary_points(per_edge: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(8 * per_edge);
    for e in 0..4 {
        for i in 0..per_edge {
            let t = i as f64 / per_edge as f64;
            let (x, y) = match e {
                0 => (t, 0.0),
                1 => (1.0, t),
                2 => (1.0 - t, 1.0),
                _ => (0.0, 1.0 - t),
            };
            pts.extend_from_slice(&[x, y]);
        }
    }
    pts
}

pub struct PoissonProblem {
    config: PoissonConfig,
    interior: Vec<f64>,
    boundary: Vec<f64>,
    forcing: Vec<f64>,
    boundary_values: Vec<f64>,
    test_points: Vec<f64>,
    test_truth: Vec<f64>,
    norm: NormStats,
    lap: JetForward,
    val: JetForward,
    layout: JetLayout,
    buf: Vec<f64>,
}

impl PoissonProblem {
    pub fn new(config: PoissonConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, streams::SAMPLING);
        let mut interior = Vec::with_capacity(2 * config.interior);
        while interior.len() < 2 * config.interior {
            let (x, y) = (rng::uniform01(&mut r), rng::uniform01(&mut r));
            // open square: reject the (measure-zero) edge draws
            if x > 0.0 && y > 0.0 {
                interior.extend_from_slice(&[x, y]);
            }
        }
        let boundary = boundary_points(config.per_edge);
        let w = config.omega;
        let forcing = interior.chunks_exact(2).map(|p| forcing(w, p[0], p[1])).collect();
        let boundary_values = boundary.chunks_exact(2).map(|p| exact_solution(w, p[0], p[1])).collect();
        let n = config.test_grid;
        let mut test_points = Vec::with_capacity(2 * n * n);
        for iy in 0..n {
            for ix in 0..n {
                test_points.extend_from_slice(&[ix as f64 / (n - 1) as f64, iy as f64 / (n - 1) as f64]);
            }
        }
        let test_truth = test_points.chunks_exact(2).map(|p| exact_solution(w, p[0], p[1])).collect();
        let all: Vec<f64> = interior.iter().chain(&boundary).copied().collect();
        let norm = NormStats::fit(&all, 2)?;
        let layout = JetLayout::new(&[2, 2]);
        Ok(Self {
            config,
            interior,
            boundary,
            forcing,
            boundary_values,
            test_points,
            test_truth,
            norm,
            lap: JetForward::with_layout(&layout),
            val: JetForward::with_layout(&JetLayout::value_only(2)),
            layout,
            buf: Vec::new(),
        })
    }

    pub fn config(&self) -> &PoissonConfig {
        &self.config
    }

    pub fn interior_points(&self) -> &[f64] {
        &self.interior
    }

    pub fn boundary_points(&self) -> &[f64] {
        &self.boundary
    }

    pub fn test_points(&self) -> &[f64] {
        &self.test_points
    }

    pub fn test_truth(&self) -> &[f64] {
        &self.test_truth
    }
}

impl Problem for PoissonProblem {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn objective_names(&self) -> Vec<String> {
        vec!["residual".into(), "boundary".into()]
    }

    fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    fn pool_size(&self) -> usize {
        self.forcing.len()
    }

    /// Interior batches of the requested size; the boundary set is split
    /// into the same number of disjoint parts.
    /// Batches split the interior points only; every batch carries the full,
    /// fixed boundary set.
    fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
        let boundary: Vec<usize> = (0..self.boundary_values.len()).collect();
        crate::training::make_batches(self.forcing.len(), batch_size, rng)
            .into_iter()
            .map(|primary| Batch {
                primary,
                secondary: boundary.clone(),
            })
            .collect()
    }

    fn evaluate(&mut self, net: &MlpParams, _task: &[f64], batch: &Batch, request: GradientRequest<'_>) -> Evaluation {
        let n_grads = match request {
            GradientRequest::None => 0,
            GradientRequest::Weighted(_) => 1,
            GradientRequest::PerObjective(list) => list.len(),
        };
        let mut out = Evaluation {
            losses: vec![0.0; 2],
            grads: vec![vec![0.0; net.len()]; n_grads],
            task_grads: vec![Vec::new(); n_grads],
        };
        // (target slot of the gradient, weight) for each objective
        let weight = |k: usize| -> Vec<(usize, f64)> {
            match request {
                GradientRequest::None => vec![],
                GradientRequest::Weighted(l) => {
                    if l[k] != 0.0 {
                        vec![(0, l[k])]
                    } else {
                        vec![]
                    }
                }
                GradientRequest::PerObjective(list) => {
                    list.iter().enumerate().filter(|(_, &o)| o == k).map(|(j, _)| (j, 1.0)).collect()
                }
            }
        };
        let mut pts = std::mem::take(&mut self.buf);
        let mut seed = Vec::new();

        let ni = batch.primary.len();
        let targets = weight(0);
        let (sx, sy) = (self.layout.slot(0, 2), self.layout.slot(1, 2));
        for chunk in batch.primary.chunks(CHUNK) {
            gather_points(&self.interior, chunk, &mut pts);
            self.lap.run(net, &self.norm, &pts);
            let c = chunk.len();
            let res: Vec<f64> = (0..c)
                .map(|p| self.lap.output_slot(sx)[p] + self.lap.output_slot(sy)[p] - self.forcing[chunk[p]])
                .collect();
            out.losses[0] += res.iter().map(|r| r * r).sum::<f64>();
            for &(j, w) in &targets {
                seed.clear();
                seed.resize(self.layout.num_slots() * c, 0.0);
                for (p, r) in res.iter().enumerate() {
                    let v = 2.0 * w * r / ni as f64;
                    seed[sx * c + p] = v;
                    seed[sy * c + p] = v;
                }
                self.lap.backward(net, &seed, &mut out.grads[j]);
            }
        }

        let nbd = batch.secondary.len();
        let targets = weight(1);
        for chunk in batch.secondary.chunks(CHUNK) {
            gather_points(&self.boundary, chunk, &mut pts);
            self.val.run(net, &self.norm, &pts);
            let res: Vec<f64> = (0..chunk.len())
                .map(|p| self.val.output_slot(0)[p] - self.boundary_values[chunk[p]])
                .collect();
            out.losses[1] += res.iter().map(|r| r * r).sum::<f64>();
            for &(j, w) in &targets {
                seed.clear();
                seed.extend(res.iter().map(|r| 2.0 * w * r / nbd as f64));
                self.val.backward(net, &seed, &mut out.grads[j]);
            }
        }
        self.buf = pts;
        out.losses[0] /= ni.max(1) as f64;
        out.losses[1] /= nbd.max(1) as f64;
        out
    }

    fn test_metrics(&mut self, net: &MlpParams, _task: &[f64]) -> Result<TestMetrics> {
        let pred = evaluate_values(net, &self.norm, &self.test_points);
        Ok(TestMetrics {
            rel_l2: relative_l2(&pred, &self.test_truth)?,
            rel_l1: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, MlpConfig};
    use std::f64::consts::PI;

    fn full_batch(p: &PoissonProblem) -> Batch {
        Batch {
            primary: (0..p.interior_points().len() / 2).collect(),
            secondary: (0..p.boundary_points().len() / 2).collect(),
        }
    }

    #[test]
    fn full_scale_point_counts() {
        let p = PoissonProblem::new(PoissonConfig::default(), 1).unwrap();
        assert_eq!(p.interior_points().len() / 2, 2500);
        assert_eq!(p.boundary_points().len() / 2, 400);
        assert!(p.interior_points().iter().all(|&v| v > 0.0 && v < 1.0));
        let q = PoissonProblem::new(PoissonConfig::default(), 1).unwrap();
        assert_eq!(p.interior_points(), q.interior_points());
        // every edge carries 100 points
        let b = p.boundary_points();
        let on = |f: &dyn Fn(f64, f64) -> bool| b.chunks(2).filter(|c| f(c[0], c[1])).count();
        assert_eq!(on(&|_, y| y == 0.0), 101);
        assert_eq!(on(&|x, _| x == 1.0), 101);
    }

    #[test]
    fn forcing_matches_laplacian_of_solution() {
        let w = 6.0;
        let h = 1e-4;
        for &(x, y) in &[(0.2, 0.7), (0.55, 0.1)] {
            let u = |x, y| exact_solution(w, x, y);
            let lap = (u(x + h, y) + u(x - h, y) + u(x, y + h) + u(x, y - h) - 4.0 * u(x, y)) / (h * h);
            assert!((lap - forcing(w, x, y)).abs() < 1e-4 * forcing(w, x, y).abs().max(1.0));
        }
    }

    #[test]
    fn zero_network_losses() {
        let cfg = PoissonConfig {
            omega: PI,
            interior: 300,
            per_edge: 20,
            ..Default::default()
        };
        let mut p = PoissonProblem::new(cfg, 4).unwrap();
        let net = MlpParams::zeros(&MlpConfig::new(2, 2, 5, Activation::Tanh));
        let batch = full_batch(&p);
        let e = p.evaluate(&net, &[], &batch, GradientRequest::None);
        // direct quadrature oracles
        let b = p.boundary_points();
        let bl: f64 = b
            .chunks(2)
            .map(|c| ((PI * c[0]).cos() * (PI * c[1]).sin()).powi(2))
            .sum::<f64>()
            / (b.len() / 2) as f64;
        let i = p.interior_points();
        let rl: f64 = i.chunks(2).map(|c| forcing(PI, c[0], c[1]).powi(2)).sum::<f64>() / (i.len() / 2) as f64;
        assert!((e.losses[1] - bl).abs() < 1e-14);
        assert!((e.losses[0] - rl).abs() < 1e-10 * rl);
    }

    #[test]
    fn gradients_are_consistent() {
        let cfg = PoissonConfig {
            omega: 6.0,
            interior: 300,
            per_edge: 20,
            ..Default::default()
        };
        let mut p = PoissonProblem::new(cfg, 2).unwrap();
        let net = crate::network::init_mlp(&MlpConfig::new(2, 2, 6, Activation::Tanh).with_seed(1)).unwrap();
        let batch = full_batch(&p);
        let lambda = [0.3, 7.0];
        let w = p.evaluate(&net, &[], &batch, GradientRequest::Weighted(&lambda));
        let per = p.evaluate(&net, &[], &batch, GradientRequest::PerObjective(&[0, 1]));
        // finite differences on two coordinates of the weighted loss
        for &i in &[3usize, net.len() - 2] {
            let h = 1e-6;
            let mut plus = net.clone();
            plus.values[i] += h;
            let mut minus = net.clone();
            minus.values[i] -= h;
            let lp = p.evaluate(&plus, &[], &batch, GradientRequest::None).losses;
            let lm = p.evaluate(&minus, &[], &batch, GradientRequest::None).losses;
            let fd = (lambda[0] * (lp[0] - lm[0]) + lambda[1] * (lp[1] - lm[1])) / (2.0 * h);
            assert!((fd - w.grads[0][i]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", w.grads[0][i]);
            let s = lambda[0] * per.grads[0][i] + lambda[1] * per.grads[1][i];
            assert!((s - w.grads[0][i]).abs() < 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn batches_split_interior_and_keep_the_boundary() {
        let p = PoissonProblem::new(
            PoissonConfig {
                interior: 100,
                per_edge: 10,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut r = rng::stream(0, streams::BATCHING);
        let b = p.epoch_batches(30, &mut r);
        assert_eq!(b.len(), 4);
        let mut prim: Vec<usize> = b.iter().flat_map(|x| x.primary.clone()).collect();
        prim.sort_unstable();
        assert_eq!(prim, (0..100).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.secondary == (0..40).collect::<Vec<_>>()));
    }
}
