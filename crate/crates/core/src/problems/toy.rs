//! Quadratic sanity problem: the first output bias `b` of the network is
//! driven to `c` by the single objective `(b − c)²`.

use super::{Batch, Evaluation, GradientRequest, Problem, Result, TestMetrics};
use crate::network::{MlpParams, NormStats};

pub struct QuadraticToy {
    pub target: f64,
    norm: NormStats,
}

impl QuadraticToy {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            norm: NormStats::identity(2),
        }
    }

    /// Index of the parameter being fitted: the bias of the output layer.
    pub fn parameter_index(net: &MlpParams) -> usize {
        net.len() - 1
    }
}

impl Problem for QuadraticToy {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn objective_names(&self) -> Vec<String> {
        vec!["L0".into()]
    }

    fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    fn pool_size(&self) -> usize {
        1
    }

    fn evaluate(&mut self, net: &MlpParams, _task: &[f64], _batch: &Batch, request: GradientRequest<'_>) -> Evaluation {
        let i = Self::parameter_index(net);
        let r = net.values[i] - self.target;
        let mut g = vec![0.0; net.len()];
        g[i] = 2.0 * r;
        let grads = match request {
            GradientRequest::None => vec![],
            GradientRequest::Weighted(l) => {
                g[i] *= l[0];
                vec![g]
            }
            GradientRequest::PerObjective(list) => vec![g; list.len()],
        };
        Evaluation {
            losses: vec![r * r],
            task_grads: vec![Vec::new(); grads.len()],
            grads,
        }
    }

    fn test_metrics(&mut self, net: &MlpParams, _task: &[f64]) -> Result<TestMetrics> {
        let v = net.values[Self::parameter_index(net)];
        Ok(TestMetrics {
            rel_l2: super::relative_l2(&[v], &[self.target])?,
            rel_l1: None,
        })
    }
}
