//! Aggregates finished runs and checks strategy orderings.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use super::run::{Manifest, RunError};
use super::ProblemKind;
use crate::problems::fmt_f64;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    RelL2,
    RelL1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RelL2 => "rel_l2",
            Metric::RelL1 => "rel_l1",
        }
    }
}

/// Mean and sample standard deviation of the final test errors of one
/// strategy, pooled over every directory that ran it.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyRow {
    pub strategy: String,
    pub repetitions: usize,
    pub rel_l2: (f64, f64),
    pub rel_l1: Option<(f64, f64)>,
}

impl StrategyRow {
    pub fn metric(&self, m: Metric) -> Option<(f64, f64)> {
        match m {
            Metric::RelL2 => Some(self.rel_l2),
            Metric::RelL1 => self.rel_l1,
        }
    }
}

/// `metric:lhs <= factor*rhs` on strategy means, e.g.
/// `rel_l1:inverse-dirichlet <= 0.3*uniform`. `<` is also accepted and the
/// factor defaults to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub metric: Metric,
    pub lhs: String,
    pub strict: bool,
    pub factor: f64,
    pub rhs: String,
}

impl FromStr for OrderingCheck {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("ordering `{s}` is not of the form metric:a <= [factor*]b");
        let (metric, rest) = s.split_once(':').ok_or_else(bad)?;
        let metric = match metric.trim() {
            "rel_l2" => Metric::RelL2,
            "rel_l1" => Metric::RelL1,
            other => return Err(format!("unknown metric `{other}`")),
        };
        let (lhs, strict, rhs) = if let Some((a, b)) = rest.split_once("<=") {
            (a, false, b)
        } else if let Some((a, b)) = rest.split_once('<') {
            (a, true, b)
        } else {
            return Err(bad());
        };
        let (factor, rhs) = match rhs.split_once('*') {
            Some((f, r)) => (f.trim().parse::<f64>().map_err(|_| bad())?, r),
            None => (1.0, rhs),
        };
        let (lhs, rhs) = (lhs.trim().to_string(), rhs.trim().to_string());
        if lhs.is_empty() || rhs.is_empty() || !(factor.is_finite() && factor > 0.0) {
            return Err(bad());
        }
        Ok(OrderingCheck {
            metric,
            lhs,
            strict,
            factor,
            rhs,
        })
    }
}

impl std::fmt::Display for OrderingCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = if self.strict { "<" } else { "<=" };
        write!(f, "{}:{} {op} {}*{}", self.metric.name(), self.lhs, self.factor, self.rhs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingResult {
    pub check: OrderingCheck,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub problem: ProblemKind,
    pub rows: Vec<StrategyRow>,
    pub orderings: Vec<OrderingResult>,
}

impl CompareReport {
    pub fn all_passed(&self) -> bool {
        self.orderings.iter().all(|o| o.passed)
    }

    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// `strategy, repetitions, rel_l2_mean, rel_l2_std, rel_l1_mean, rel_l1_std`.
    pub fn write_csv(&self, path: &Path) -> Result<(), CompareError> {
        let err = |source| CompareError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["strategy", "repetitions", "rel_l2_mean", "rel_l2_std", "rel_l1_mean", "rel_l1_std"])
            .map_err(err)?;
        for r in &self.rows {
            let (l1m, l1s) = r
                .rel_l1
                .map_or((String::new(), String::new()), |(m, s)| (fmt_f64(m), fmt_f64(s)));
            w.write_record([
                r.strategy.clone(),
                r.repetitions.to_string(),
                fmt_f64(r.rel_l2.0),
                fmt_f64(r.rel_l2.1),
                l1m,
                l1s,
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn read_summary(dir: &Path) -> Result<(Vec<f64>, Vec<f64>), CompareError> {
    let path = dir.join("summary.csv");
    let err = |source| CompareError::Csv {
        path: path.clone(),
        source,
    };
    let mut r = csv::Reader::from_path(&path).map_err(err)?;
    let headers = r.headers().map_err(err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (l2, l1) = match (col("rel_l2"), col("rel_l1")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(CompareError::Input(format!("{}: missing error columns", path.display()))),
    };
    let (mut v2, mut v1) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        let parse = |i: usize| rec.get(i).filter(|s| !s.is_empty()).map(str::parse::<f64>);
        match parse(l2) {
            Some(Ok(x)) => v2.push(x),
            _ => return Err(CompareError::Input(format!("{}: bad rel_l2 cell", path.display()))),
        }
        if let Some(Ok(x)) = parse(l1) {
            v1.push(x);
        }
    }
    Ok((v2, v1))
}

/// Pools the final errors of `dirs` per strategy and evaluates `checks`.
/// Every directory must hold a finished run of the same problem.
pub fn compare(dirs: &[PathBuf], checks: &[OrderingCheck]) -> Result<CompareReport, CompareError> {
    if dirs.len() < 2 {
        return Err(CompareError::Input("compare needs at least two run directories".into()));
    }
    let mut problem = None;
    let mut pooled: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for dir in dirs {
        let m = Manifest::read(dir)?;
        if m.problem == ProblemKind::StiffnessProbe {
            return Err(CompareError::Input(format!("{}: probe runs have no test errors", dir.display())));
        }
        match problem {
            None => problem = Some(m.problem),
            Some(p) if p != m.problem => {
                return Err(CompareError::Input(format!(
                    "{}: problem {} does not match {}",
                    dir.display(),
                    m.problem,
                    p
                )))
            }
            _ => {}
        }
        let (l2, l1) = read_summary(dir)?;
        if l2.is_empty() {
            return Err(CompareError::Input(format!("{}: no finished repetitions", dir.display())));
        }
        match pooled.iter_mut().find(|(s, _, _)| *s == m.strategy) {
            Some((_, a, b)) => {
                a.extend(l2);
                b.extend(l1);
            }
            None => pooled.push((m.strategy, l2, l1)),
        }
    }
    let rows: Vec<StrategyRow> = pooled
        .into_iter()
        .map(|(strategy, l2, l1)| StrategyRow {
            strategy,
            repetitions: l2.len(),
            rel_l2: mean_std(&l2),
            rel_l1: (l1.len() == l2.len()).then(|| mean_std(&l1)),
        })
        .collect();
    let mut orderings = Vec::new();
    for c in checks {
        let value = |name: &str| -> Result<f64, CompareError> {
            let row = rows
                .iter()
                .find(|r| r.strategy == name)
                .ok_or_else(|| CompareError::Input(format!("no run of strategy `{name}`")))?;
            row.metric(c.metric)
                .map(|(m, _)| m)
                .ok_or_else(|| CompareError::Input(format!("`{name}` has no {} values", c.metric.name())))
        };
        let (lhs, rhs) = (value(&c.lhs)?, value(&c.rhs)?);
        let bound = c.factor * rhs;
        let passed = if c.strict { lhs < bound } else { lhs <= bound };
        orderings.push(OrderingResult {
            check: c.clone(),
            lhs,
            rhs,
            passed,
        });
    }
    Ok(CompareReport {
        problem: problem.expect("at least two directories"),
        rows,
        orderings,
    })
}
