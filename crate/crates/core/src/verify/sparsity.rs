//! Natural-sparsity verification under uniform coupling.
//!
//! With scalar frequencies drawn i.i.d. uniform on [-Ω, Ω] and a uniform
//! coupling threshold δ = K·r·J, the exact probability that a pair locks is
//! the triangular-difference mass
//!
//! ```text
//! p = δ/Ω − δ²/(4Ω²)          (δ ≤ 2Ω, else 1)
//! ```
//!
//! Monte Carlo sampling checks that closed form to within binomial standard
//! errors. The commonly quoted leading-order expansion `2δ/Ω − (δ/Ω)²`
//! roughly doubles the exact value at small δ/Ω (19% vs 9.75% at δ/Ω = 0.1);
//! the suite reports both so the discrepancy is visible.

use crate::engine::SeededRng;
use crate::verify::SuiteReport;
use crate::{Error, Result};

/// Monte Carlo experiment: pairs of uniform frequencies against a lock width.
#[derive(Debug, Clone)]
pub struct SparsityExperiment {
    /// Frequency half-range Ω.
    pub omega_range: f64,
    /// Lock width δ = K·r·J.
    pub delta: f64,
    /// Number of sampled pairs (at least 10⁴).
    pub n_pairs: usize,
    pub seed: u64,
}

/// Empirical vs closed-form lock fraction.
#[derive(Debug, Clone, Copy)]
pub struct SparsityResult {
    pub empirical: f64,
    pub formula: f64,
    pub std_err: f64,
}

/// Exact expected fraction of locked pairs.
pub fn lock_fraction_formula(delta: f64, omega_range: f64) -> f64 {
    if delta >= 2.0 * omega_range {
        return 1.0;
    }
    let x = delta / omega_range;
    x - x * x / 4.0
}

/// Leading-order expansion that overstates the exact value; reported for
/// comparison, never asserted.
pub fn lock_fraction_leading_term(delta: f64, omega_range: f64) -> f64 {
    let x = delta / omega_range;
    2.0 * x - x * x
}

/// Sample pairs and compare against the closed form.
pub fn sparsity_mc(exp: &SparsityExperiment) -> Result<SparsityResult> {
    if exp.omega_range <= 0.0 {
        return Err(Error::Config("frequency half-range must be positive".into()));
    }
    if exp.delta < 0.0 {
        return Err(Error::Config("lock width must be non-negative".into()));
    }
    if exp.n_pairs < 10_000 {
        return Err(Error::Config(format!(
            "Monte Carlo needs at least 10^4 pairs, got {}",
            exp.n_pairs
        )));
    }
    let mut rng = SeededRng::new(exp.seed);
    let mut locked = 0usize;
    for _ in 0..exp.n_pairs {
        let a = rng.uniform_in(-exp.omega_range, exp.omega_range);
        let b = rng.uniform_in(-exp.omega_range, exp.omega_range);
        if (a - b).abs() <= exp.delta {
            locked += 1;
        }
    }
    let empirical = locked as f64 / exp.n_pairs as f64;
    let formula = lock_fraction_formula(exp.delta, exp.omega_range);
    let std_err = (formula * (1.0 - formula) / exp.n_pairs as f64).sqrt();
    Ok(SparsityResult {
        empirical,
        formula,
        std_err,
    })
}

/// Default verification grid of δ/Ω ratios.
pub const DEFAULT_RATIOS: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

/// Run the Monte Carlo grid at 10⁶ pairs per point.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("sparsity", seed);
    for (idx, &ratio) in DEFAULT_RATIOS.iter().enumerate() {
        let exp = SparsityExperiment {
            omega_range: 1.0,
            delta: ratio,
            n_pairs: 1_000_000,
            seed: seed.wrapping_add(idx as u64),
        };
        let res = sparsity_mc(&exp)?;
        let within = (res.empirical - res.formula).abs() <= 3.0 * res.std_err;
        let key = format!("ratio_{ratio}");
        report.metric(&format!("{key}_formula"), res.formula);
        report.metric(&format!("{key}_empirical"), res.empirical);
        report.metric(&format!("{key}_std_err"), res.std_err);
        report.metric(
            &format!("{key}_leading_term"),
            lock_fraction_leading_term(ratio, 1.0),
        );
        report.check(&key, within);
    }
    report.metric(
        "note",
        "exact lock fraction is δ/Ω − δ²/(4Ω²); the leading-order expression \
         2δ/Ω − (δ/Ω)² overstates it by ~2x at small δ/Ω (0.19 vs 0.0975 at \
         δ/Ω = 0.1) and is reported only for comparison",
    );
    Ok(report)
}
