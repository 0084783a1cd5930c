//! Cluster-pattern realizability.
//!
//! The constructive argument assigns one frequency vector per token:
//! tokens that should attend to each other share a frequency, and distinct
//! clusters sit far apart, so the Gaussian coupling collapses to a block
//! structure and the lock condition reproduces the target pattern exactly.
//! Because each token carries a single frequency, the patterns realizable
//! this way are exactly equivalence relations (unions of cliques);
//! anything non-transitive is rejected rather than approximated.
//!
//! A full-system ODE run on a clustered frequency assignment confirms the
//! construction is dynamically self-consistent: within-cluster phases
//! collapse while clusters drift apart.

use crate::engine::{SeededRng, Tape, Tensor};
use crate::oracle::{integrate_full, FullSystem};
use crate::ssa::{coupling_matrix, order_parameter, sync_matrix, CouplingMode};
use crate::verify::SuiteReport;
use crate::{Error, Result};

/// Target binary attention pattern.
#[derive(Debug, Clone)]
pub struct PatternSpec {
    /// Row-major N×N adjacency.
    pub adjacency: Vec<bool>,
    pub n: usize,
}

impl PatternSpec {
    /// Build the (always valid) pattern induced by a cluster assignment.
    pub fn from_clusters(assignment: &[usize]) -> Self {
        let n = assignment.len();
        let adjacency = (0..n * n)
            .map(|idx| assignment[idx / n] == assignment[idx % n])
            .collect();
        PatternSpec { adjacency, n }
    }

    fn at(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    /// Check reflexivity, symmetry and transitivity; returns the cluster
    /// assignment on success and a specific explanation on failure.
    pub fn validate_equivalence(&self) -> Result<Vec<usize>> {
        let n = self.n;
        if self.adjacency.len() != n * n {
            return Err(Error::Verify(format!(
                "pattern for {} tokens needs {} entries, got {}",
                n,
                n * n,
                self.adjacency.len()
            )));
        }
        for i in 0..n {
            if !self.at(i, i) {
                return Err(Error::Verify(format!(
                    "pattern is not reflexive: token {i} does not attend to itself"
                )));
            }
            for j in 0..n {
                if self.at(i, j) != self.at(j, i) {
                    return Err(Error::Verify(format!(
                        "pattern is not symmetric at pair ({i}, {j})"
                    )));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if !self.at(i, j) {
                    continue;
                }
                for k in 0..n {
                    if self.at(j, k) && !self.at(i, k) {
                        return Err(Error::Verify(format!(
                            "pattern is not transitive: ({i},{j}) and ({j},{k}) \
                             attend but ({i},{k}) does not"
                        )));
                    }
                }
            }
        }
        // connected components = equivalence classes
        let mut assignment = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            if assignment[i] == usize::MAX {
                for j in 0..n {
                    if self.at(i, j) {
                        assignment[j] = next;
                    }
                }
                next += 1;
            }
        }
        Ok(assignment)
    }
}

/// Pre-softplus value giving a Gaussian bandwidth of 2; with centroid
/// separation ≥ 5 the nearest cross-cluster coupling is exp(-50).
const ALPHA_HAT_BANDWIDTH_2: f64 = 1.8545865421312544;

/// Outcome of realizing one pattern.
#[derive(Debug, Clone)]
pub struct RealizeOutcome {
    /// Scalar frequency per token (cluster centroid).
    pub frequencies: Vec<f64>,
    /// The synchronization matrix the assignment produces.
    pub s: Tensor<f64>,
    /// `s` thresholded at 0.5.
    pub thresholded: Vec<bool>,
    pub exact_match: bool,
}

/// Assign clustered frequencies and check that the thresholded
/// synchronization matrix reproduces the pattern exactly.
pub fn realize_pattern(
    spec: &PatternSpec,
    coupling_strength: f64,
    separation: f64,
) -> Result<RealizeOutcome> {
    let assignment = spec.validate_equivalence()?;
    let n = spec.n;
    let frequencies: Vec<f64> = assignment.iter().map(|&c| c as f64 * separation).collect();

    let mut tape = Tape::<f64>::new();
    let omega = tape.constant(Tensor::from_vec(&[n, 1], frequencies.clone())?);
    // identical phases: the empirical order parameter is exactly 1
    let theta = tape.constant(Tensor::zeros(&[n, 1]));
    let alpha_hat = tape.constant(Tensor::scalar(ALPHA_HAT_BANDWIDTH_2));
    let (j, delta_omega) =
        coupling_matrix(&mut tape, omega, &CouplingMode::FrequencyDependent, Some(alpha_hat))?;
    let r = order_parameter(&mut tape, theta)?;
    let k = tape.constant(Tensor::scalar(coupling_strength));
    let sync = sync_matrix(&mut tape, j, delta_omega, r, k, 1e-8)?;

    let s = tape.value(sync.s).clone();
    let thresholded: Vec<bool> = s.data().iter().map(|&v| v > 0.5).collect();
    let exact_match = thresholded == spec.adjacency;
    Ok(RealizeOutcome {
        frequencies,
        s,
        thresholded,
        exact_match,
    })
}

/// Within-cluster spread and cross-cluster drift from a full-system ODE run
/// on a clustered assignment.
#[derive(Debug, Clone, Copy)]
pub struct ClusterOdeOutcome {
    /// Largest end-time phase spread inside any cluster (rad).
    pub max_within_spread: f64,
    /// Smallest end-time separation between cluster mean phases (rad,
    /// unwrapped).
    pub min_cross_separation: f64,
    /// Final order parameter of the full population.
    pub r_end: f64,
}

/// Integrate a three-cluster assignment and measure coherence structure.
pub fn cluster_ode_check(
    cluster_sizes: &[usize],
    coupling_strength: f64,
    separation: f64,
    seed: u64,
) -> Result<ClusterOdeOutcome> {
    let n: usize = cluster_sizes.iter().sum();
    let mut assignment = Vec::with_capacity(n);
    for (c, &size) in cluster_sizes.iter().enumerate() {
        assignment.extend(std::iter::repeat(c).take(size));
    }
    let omega: Vec<f64> = assignment.iter().map(|&c| c as f64 * separation).collect();
    let bandwidth = 2.0;
    let coupling = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i == j {
            return 0.0;
        }
        let gap = omega[i] - omega[j];
        coupling_strength / n as f64 * (-bandwidth * gap * gap).exp()
    });
    let mut rng = SeededRng::new(seed);
    let theta0: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let sys = FullSystem {
        omega,
        coupling,
        theta0,
    };
    let traj = integrate_full(&sys, 0.01, 200.0)?;

    let mut max_within_spread = 0.0f64;
    let mut means = Vec::with_capacity(cluster_sizes.len());
    let mut offset = 0;
    for &size in cluster_sizes {
        let phases = &traj.theta_end[offset..offset + size];
        let lo = phases.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = phases.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max_within_spread = max_within_spread.max(hi - lo);
        means.push(phases.iter().sum::<f64>() / size as f64);
        offset += size;
    }
    let mut min_cross_separation = f64::INFINITY;
    for a in 0..means.len() {
        for b in (a + 1)..means.len() {
            min_cross_separation = min_cross_separation.min((means[a] - means[b]).abs());
        }
    }
    Ok(ClusterOdeOutcome {
        max_within_spread,
        min_cross_separation,
        r_end: *traj.r.last().expect("trajectory non-empty"),
    })
}

/// Random equivalence-class pattern on up to `max_tokens` tokens.
pub fn random_pattern(rng: &mut SeededRng, max_tokens: usize) -> PatternSpec {
    let n = 2 + rng.below(max_tokens - 1);
    let clusters = 1 + rng.below(n);
    let assignment: Vec<usize> = (0..n).map(|_| rng.below(clusters)).collect();
    PatternSpec::from_clusters(&assignment)
}

/// 100 random patterns must realize exactly, and one three-cluster ODE run
/// must show within-cluster coherence with cross-cluster drift.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("universality", seed);
    let mut rng = SeededRng::new(seed);
    let mut matches = 0;
    let trials = 100;
    for _ in 0..trials {
        let spec = random_pattern(&mut rng, 16);
        let outcome = realize_pattern(&spec, 10.0, 5.0)?;
        if outcome.exact_match {
            matches += 1;
        }
    }
    report.metric("patterns_tested", trials);
    report.metric("patterns_matched", matches);
    report.check("all_patterns_exact", matches == trials);

    let ode = cluster_ode_check(&[4, 4, 4], 10.0, 5.0, seed)?;
    report.metric("ode_max_within_spread_rad", ode.max_within_spread);
    report.metric("ode_min_cross_separation_rad", ode.min_cross_separation);
    report.metric("ode_r_end", ode.r_end);
    report.check("within_cluster_spread_below_0.01", ode.max_within_spread < 0.01);
    report.check(
        "cross_cluster_drifts",
        ode.min_cross_separation > 2.0 * std::f64::consts::PI,
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pattern_realizes_as_identity() {
        // all singleton clusters: thresholded S must be the identity
        let assignment: Vec<usize> = (0..6).collect();
        let spec = PatternSpec::from_clusters(&assignment);
        let outcome = realize_pattern(&spec, 10.0, 5.0).unwrap();
        assert!(outcome.exact_match);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(outcome.thresholded[i * 6 + j], i == j);
            }
        }
    }

    #[test]
    fn all_ones_pattern_realizes_as_all_ones() {
        let spec = PatternSpec::from_clusters(&[0; 5]);
        let outcome = realize_pattern(&spec, 10.0, 5.0).unwrap();
        assert!(outcome.exact_match);
        assert!(outcome.thresholded.iter().all(|&b| b));
        // single cluster means every frequency coincides and S is exactly 1
        assert!(outcome.s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn three_blocks_match_exactly() {
        let assignment = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let spec = PatternSpec::from_clusters(&assignment);
        let outcome = realize_pattern(&spec, 10.0, 5.0).unwrap();
        assert!(outcome.exact_match);
    }

    #[test]
    fn non_reflexive_pattern_rejected_with_explanation() {
        let mut spec = PatternSpec::from_clusters(&[0, 0, 1]);
        spec.adjacency[0] = false; // break A_00
        let err = spec.validate_equivalence().unwrap_err();
        assert!(err.to_string().contains("reflexive"));
    }

    #[test]
    fn non_symmetric_pattern_rejected() {
        let mut spec = PatternSpec::from_clusters(&[0, 1]);
        spec.adjacency[1] = true; // (0,1) without (1,0)
        let err = spec.validate_equivalence().unwrap_err();
        assert!(err.to_string().contains("symmetric"));
    }

    #[test]
    fn non_transitive_pattern_rejected() {
        // chain 0-1, 1-2 without 0-2
        let n = 3;
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            adjacency[i * n + i] = true;
        }
        adjacency[1] = true;
        adjacency[n] = true;
        adjacency[n + 2] = true;
        adjacency[2 * n + 1] = true;
        let spec = PatternSpec { adjacency, n };
        let err = spec.validate_equivalence().unwrap_err();
        assert!(err.to_string().contains("transitive"));
    }

    #[test]
    fn hundred_random_patterns_realize_exactly() {
        let mut rng = SeededRng::new(1234);
        for _ in 0..100 {
            let spec = random_pattern(&mut rng, 16);
            let outcome = realize_pattern(&spec, 10.0, 5.0).unwrap();
            assert!(outcome.exact_match, "pattern failed to realize");
        }
    }

    #[test]
    fn any_threshold_in_unit_interval_works() {
        // with large bandwidth and separation, S values sit at ~1 or exactly 0
        let spec = PatternSpec::from_clusters(&[0, 0, 1, 1, 2]);
        let outcome = realize_pattern(&spec, 10.0, 5.0).unwrap();
        for (&v, &want) in outcome.s.data().iter().zip(&spec.adjacency) {
            if want {
                assert!(v > 0.99, "within-cluster entries near 1, got {v}");
            } else {
                assert_eq!(v, 0.0, "cross-cluster entries exactly 0");
            }
        }
    }

    #[test]
    fn cluster_ode_shows_within_coherence_and_cross_drift() {
        let outcome = cluster_ode_check(&[4, 4, 4], 10.0, 5.0, 42).unwrap();
        assert!(
            outcome.max_within_spread < 0.01,
            "within-cluster spread {} rad",
            outcome.max_within_spread
        );
        assert!(
            outcome.min_cross_separation > 2.0 * std::f64::consts::PI,
            "clusters must drift apart, got {}",
            outcome.min_cross_separation
        );
    }
}
