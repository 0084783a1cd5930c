//! Initialization-structure characterization.
//!
//! At small-variance initialization with unit-normal inputs the operator
//! should show: a tightly concentrated per-head order parameter in the
//! broad-locking regime, head-diverse synchronization matrices, and (for
//! contrast) near-uniform baseline attention rows. Measured quantities:
//!
//! - per-head r mean and cross-sample std over `n_samples` random inputs,
//! - minimum over head pairs of the relative Frobenius distance
//!   `‖S_a − S_b‖_F / (½(‖S_a‖_F + ‖S_b‖_F))` on the first sample,
//! - worst baseline attention row ratio `max_j A_ij / mean_j A_ij`,
//! - mean lock fraction.

use crate::engine::{SeededRng, Tape, Tensor};
use crate::model::{
    init_params, osn_block_forward, transformer_block_forward, BlockConfig, Mode,
};
use crate::ssa::collect_artifacts;
use crate::verify::SuiteReport;
use crate::Result;

/// Measured initialization structure.
#[derive(Debug, Clone)]
pub struct InitStructure {
    pub per_head_r_mean: Vec<f64>,
    pub per_head_r_std: Vec<f64>,
    /// min over head pairs of the relative Frobenius distance between S
    /// matrices (first sample).
    pub min_head_distance: f64,
    /// max over samples, heads and rows of (row max / row mean) of baseline
    /// attention.
    pub attn_max_over_mean: f64,
    pub mean_nonzero_fraction: f64,
}

/// Run both blocks on `n_samples` unit-normal inputs at seeded init.
pub fn init_structure_report(
    dim: usize,
    heads: usize,
    tokens: usize,
    n_samples: usize,
    seed: u64,
) -> Result<InitStructure> {
    let osn_config = BlockConfig::osn(dim, heads);
    let tf_config = BlockConfig::transformer(dim, heads);
    let mut init_rng = SeededRng::new(seed);
    let osn_params = init_params::<f64>(&osn_config, &mut init_rng)?;
    let tf_params = init_params::<f64>(&tf_config, &mut init_rng)?;

    let mut r_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); heads];
    let mut first_sample_s: Vec<Tensor<f64>> = Vec::new();
    let mut attn_worst = 0.0f64;
    let mut lock_fractions = Vec::with_capacity(n_samples * heads);

    let mut data_rng = SeededRng::new(seed ^ 0x5EED_1234);
    for sample in 0..n_samples {
        let x: Tensor<f64> = data_rng.gaussian_matrix(&[tokens, dim], 0.0, 1.0);

        let mut tape = Tape::new();
        let nodes = osn_params.register(&mut tape, false);
        let xn = tape.constant(x.clone());
        let (_, trace) = osn_block_forward(&mut tape, xn, &nodes, &osn_config, &mut Mode::Eval)?;
        let art = collect_artifacts(&tape, &trace)?;
        for h in 0..heads {
            r_samples[h].push(art.r.data()[h]);
            lock_fractions.push(art.nonzero_fraction(h));
        }
        if sample == 0 {
            for h in 0..heads {
                first_sample_s.push(art.s.index_axis0(h)?);
            }
        }

        let mut ttape = Tape::new();
        let tnodes = tf_params.register(&mut ttape, false);
        let txn = ttape.constant(x);
        let (_, ttrace) =
            transformer_block_forward(&mut ttape, txn, &tnodes, &tf_config, &mut Mode::Eval, false)?;
        for &attn in &ttrace.attn {
            let a = ttape.value(attn);
            for i in 0..tokens {
                let mut max = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for c in 0..tokens {
                    let v = a.get2(i, c);
                    max = max.max(v);
                    sum += v;
                }
                attn_worst = attn_worst.max(max / (sum / tokens as f64));
            }
        }
    }

    let per_head_r_mean: Vec<f64> = r_samples
        .iter()
        .map(|rs| rs.iter().sum::<f64>() / rs.len() as f64)
        .collect();
    let per_head_r_std: Vec<f64> = r_samples
        .iter()
        .zip(&per_head_r_mean)
        .map(|(rs, &m)| {
            (rs.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / rs.len() as f64).sqrt()
        })
        .collect();

    let mut min_head_distance = f64::INFINITY;
    for a in 0..heads {
        for b in (a + 1)..heads {
            let (sa, sb) = (&first_sample_s[a], &first_sample_s[b]);
            let mut diff = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (&x, &y) in sa.data().iter().zip(sb.data()) {
                diff += (x - y) * (x - y);
                na += x * x;
                nb += y * y;
            }
            let dist = diff.sqrt() / (0.5 * (na.sqrt() + nb.sqrt()));
            min_head_distance = min_head_distance.min(dist);
        }
    }

    Ok(InitStructure {
        per_head_r_mean,
        per_head_r_std,
        min_head_distance,
        attn_max_over_mean: attn_worst,
        mean_nonzero_fraction: lock_fractions.iter().sum::<f64>() / lock_fractions.len() as f64,
    })
}

/// Acceptance thresholds for the characterization.
pub const R_MEAN_RANGE: (f64, f64) = (0.80, 0.95);
pub const R_STD_BOUND: f64 = 0.01;
pub const HEAD_DISTANCE_BOUND: f64 = 0.01;
pub const ATTN_UNIFORMITY_BOUND: f64 = 1.2;

/// Full-size characterization (N = 256, D = 512, H = 8 over `n_samples`
/// inputs) checked against the published-structure thresholds.
pub fn run_suite(seed: u64, n_samples: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("init-structure", seed);
    let m = init_structure_report(512, 8, 256, n_samples, seed)?;

    let r_means_ok = m
        .per_head_r_mean
        .iter()
        .all(|&r| (R_MEAN_RANGE.0..=R_MEAN_RANGE.1).contains(&r));
    let r_std_ok = m.per_head_r_std.iter().all(|&s| s < R_STD_BOUND);

    report.metric(
        "per_head_r_mean",
        serde_json::to_value(&m.per_head_r_mean).expect("serializable"),
    );
    report.metric(
        "per_head_r_std",
        serde_json::to_value(&m.per_head_r_std).expect("serializable"),
    );
    report.metric("min_head_distance", m.min_head_distance);
    report.metric("attn_max_over_mean", m.attn_max_over_mean);
    report.metric("mean_nonzero_fraction", m.mean_nonzero_fraction);
    report.check("r_mean_in_0.80_0.95", r_means_ok);
    report.check("r_std_below_0.01", r_std_ok);
    report.check(
        "head_distance_above_0.01",
        m.min_head_distance > HEAD_DISTANCE_BOUND,
    );
    report.check(
        "attention_rows_near_uniform_max_over_mean_below_1.2",
        m.attn_max_over_mean < ATTN_UNIFORMITY_BOUND,
    );
    Ok(report)
}
