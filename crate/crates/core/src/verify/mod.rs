//! Verification suites for the operator's structural claims: natural
//! sparsity under uniform coupling, realizability of cluster attention
//! patterns, the sign of the frequency-gradient bias, closed form vs ODE
//! steady state, and the initialization-structure characterization.
//!
//! Every suite produces a [`SuiteReport`] that serializes as
//! `{"suite": name, "pass": bool, "metrics": {...}, "seed": int}`.

pub mod gradbias;
pub mod initstructure;
pub mod oracle_suite;
pub mod sparsity;
pub mod toytrain;
pub mod universality;

use serde::Serialize;
use serde_json::{Map, Value};

/// Outcome of one verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub metrics: Map<String, Value>,
    pub seed: u64,
}

impl SuiteReport {
    pub fn new(suite: &str, seed: u64) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            pass: true,
            metrics: Map::new(),
            seed,
        }
    }

    /// Record a metric value.
    pub fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    /// Record a named check, folding it into the overall pass flag.
    pub fn check(&mut self, key: &str, ok: bool) {
        self.metrics.insert(format!("{key}_pass"), Value::Bool(ok));
        self.pass &= ok;
    }
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && values[order[end + 1]] == values[order[pos]] {
            end += 1;
        }
        // average rank for the tie group, 1-based
        let avg = (pos + end) as f64 / 2.0 + 1.0;
        for &idx in &order[pos..=end] {
            ranks[idx] = avg;
        }
        pos = end + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_monotone() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        // b has ties; the correlation should still be well-defined and positive
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let rho = spearman(&a, &b);
        assert!(rho > 0.9, "got {rho}");
    }

    #[test]
    fn spearman_invariant_to_monotone_transform() {
        let a = [0.3f64, -1.0, 2.5, 0.7, 1.1];
        let b: Vec<f64> = a.iter().map(|&v| v.exp()).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let mut r = SuiteReport::new("demo", 42);
        r.metric("value", 1.5);
        r.check("bound", true);
        let js = serde_json::to_value(&r).unwrap();
        assert_eq!(js["suite"], "demo");
        assert_eq!(js["pass"], true);
        assert_eq!(js["seed"], 42);
        assert_eq!(js["metrics"]["value"], 1.5);
    }

    #[test]
    fn failing_check_flips_pass() {
        let mut r = SuiteReport::new("demo", 1);
        r.check("good", true);
        r.check("bad", false);
        assert!(!r.pass);
    }
}
