//! Single-block benchmark harness: latency, throughput, and exact
//! allocation counts for the baseline transformer, dense OSN, and sparse
//! OSN variants across sequence lengths, with log–log power-law fits in
//! place of hardware-specific absolute numbers.
//!
//! Protocol per cell: one untimed instrumented forward captures allocation
//! counts, then `warmup` discarded passes, then `trials` timed passes on a
//! monotonic clock. Cells run strictly sequentially and the finite-value
//! scan is disabled around timed passes so it cannot distort timings.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{alloc, set_strict_finite, SeededRng, Tape, Tensor};
use crate::model::{
    init_params, osn_block_forward, transformer_block_forward, BlockConfig, Mode,
};
use crate::{Error, Result, Scalar};

/// Benchmark variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Transformer,
    OsnDense,
    OsnSparse(usize),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Transformer => "transformer".into(),
            Variant::OsnDense => "osn-dense".into(),
            Variant::OsnSparse(k) => format!("osn-sparse-k{k}"),
        }
    }

    fn block_config(&self, dim: usize, heads: usize, n: usize) -> BlockConfig {
        let mut config = match self {
            Variant::Transformer => BlockConfig::transformer(dim, heads),
            Variant::OsnDense | Variant::OsnSparse(_) => BlockConfig::osn(dim, heads),
        };
        if let Variant::OsnSparse(k) = self {
            config.sparsity_k = Some((*k).min(n));
        }
        config.dropout_p = 0.0;
        config
    }
}

/// Numeric precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Benchmark schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lens: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub variants: Vec<Variant>,
    pub precision: Precision,
    pub dim: usize,
    pub heads: usize,
    pub seed: u64,
    /// Cells whose rough working-set estimate exceeds this many bytes are
    /// skipped with a warning instead of risking the allocator.
    pub memory_cap_bytes: u64,
    /// Fixed batch size for every cell (scaling fits want fixed B); the
    /// halving schedule applies when unset.
    pub batch_override: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lens: vec![128, 256, 512, 1024],
            trials: 50,
            warmup: 10,
            variants: vec![Variant::Transformer, Variant::OsnDense, Variant::OsnSparse(64)],
            precision: Precision::F32,
            dim: 512,
            heads: 8,
            seed: 42,
            memory_cap_bytes: 16 << 30,
            batch_override: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("benchmark needs at least one trial".into()));
        }
        if self.lens.is_empty() {
            return Err(Error::Config("benchmark needs at least one sequence length".into()));
        }
        Ok(())
    }

    /// Batch schedule: 8 up to N = 512, then halving per doubling, unless
    /// overridden to a fixed size.
    pub fn batch_for(&self, n: usize) -> usize {
        if let Some(b) = self.batch_override {
            return b.max(1);
        }
        match n {
            0..=512 => 8,
            513..=1024 => 4,
            1025..=2048 => 2,
            _ => 1,
        }
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: String,
    pub n: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub tokens_per_s: f64,
    pub peak_elements: u64,
    pub total_elements: u64,
}

/// Record plus the labeled allocation breakdown (and skip marker).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCell {
    pub record: BenchRecord,
    pub labels: BTreeMap<String, u64>,
    pub skipped: bool,
}

/// CSV header matching the record layout.
pub const CSV_HEADER: &str = "variant,N,B,mean_ms,std_ms,tokens_per_s,peak_elements,total_elements";

/// Render records (skipped cells excluded) as CSV.
pub fn records_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for cell in cells.iter().filter(|c| !c.skipped) {
        let r = &cell.record;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant, r.n, r.batch, r.mean_ms, r.std_ms, r.tokens_per_s, r.peak_elements, r.total_elements
        ));
    }
    out
}

fn rough_bytes_estimate(variant: &Variant, n: usize, dim: usize, heads: usize, precision: Precision) -> u64 {
    let elem = match precision {
        Precision::F32 => 4u64,
        Precision::F64 => 8u64,
    };
    let nn = (heads * n * n) as u64;
    let nd = (n * dim) as u64;
    let per_head_quadratics = match variant {
        Variant::Transformer => 4,
        Variant::OsnDense | Variant::OsnSparse(_) => 16,
    };
    (nn * per_head_quadratics + nd * 24) * elem * 2
}

fn forward_once<T: Scalar>(
    variant: &Variant,
    config: &BlockConfig,
    params: &crate::model::BlockParams<T>,
    x: &Tensor<T>,
) -> Result<()> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false);
    let xn = tape.constant(x.clone());
    match variant {
        Variant::Transformer => {
            transformer_block_forward(&mut tape, xn, &nodes, config, &mut Mode::Eval, false)?;
        }
        Variant::OsnDense | Variant::OsnSparse(_) => {
            osn_block_forward(&mut tape, xn, &nodes, config, &mut Mode::Eval)?;
        }
    }
    Ok(())
}

fn run_cell<T: Scalar>(config: &BenchConfig, variant: &Variant, n: usize) -> Result<BenchCell> {
    let batch = config.batch_for(n);
    let block_config = variant.block_config(config.dim, config.heads, n);
    let mut init_rng = SeededRng::new(config.seed);
    let params = init_params::<T>(&block_config, &mut init_rng)?;

    let input_stream = |trial: usize| {
        // deterministic inputs keyed by (variant, N, B, trial)
        let key = (n as u64) << 32 | (batch as u64) << 16 | trial as u64;
        let tag = match variant {
            Variant::Transformer => 1u64,
            Variant::OsnDense => 2,
            Variant::OsnSparse(_) => 3,
        };
        SeededRng::new(config.seed ^ key.wrapping_mul(0x9E37_79B9) ^ tag)
    };
    let gen_batch = |trial: usize| -> Vec<Tensor<T>> {
        let mut rng = input_stream(trial);
        (0..batch).map(|_| rng.gaussian_matrix(&[n, config.dim], 0.0, 1.0)).collect()
    };

    // untimed instrumented pass: exact allocation counts, finite scan on
    alloc::enable();
    alloc::reset();
    for x in &gen_batch(0) {
        forward_once(variant, &block_config, &params, x)?;
    }
    let stats = alloc::report()?;
    alloc::disable();

    // timed passes: instrumentation off, finite scan off
    set_strict_finite(false);
    for w in 0..config.warmup {
        for x in &gen_batch(w) {
            forward_once(variant, &block_config, &params, x)?;
        }
    }
    let mut timings_ms = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let inputs = gen_batch(config.warmup + trial);
        let start = Instant::now();
        for x in &inputs {
            forward_once(variant, &block_config, &params, x)?;
        }
        timings_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    set_strict_finite(true);

    let mean_ms = timings_ms.iter().sum::<f64>() / timings_ms.len() as f64;
    let var = timings_ms.iter().map(|t| (t - mean_ms) * (t - mean_ms)).sum::<f64>()
        / timings_ms.len() as f64;
    let mut sorted = timings_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ms = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let tokens_per_s = (batch * n) as f64 / (mean_ms / 1e3);

    Ok(BenchCell {
        record: BenchRecord {
            variant: variant.name(),
            n,
            batch,
            mean_ms,
            std_ms: var.sqrt(),
            median_ms,
            tokens_per_s,
            peak_elements: stats.peak_elements,
            total_elements: stats.total_elements,
        },
        labels: stats.labels,
        skipped: false,
    })
}

/// Run the whole schedule, strictly sequentially.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchCell>> {
    config.validate()?;
    let _session = alloc::exclusive_session();
    let mut cells = Vec::new();
    for variant in &config.variants {
        for &n in &config.lens {
            let estimate = rough_bytes_estimate(variant, n, config.dim, config.heads, config.precision);
            if estimate > config.memory_cap_bytes {
                cells.push(BenchCell {
                    record: BenchRecord {
                        variant: variant.name(),
                        n,
                        batch: config.batch_for(n),
                        mean_ms: 0.0,
                        std_ms: 0.0,
                        median_ms: 0.0,
                        tokens_per_s: 0.0,
                        peak_elements: 0,
                        total_elements: 0,
                    },
                    labels: BTreeMap::new(),
                    skipped: true,
                });
                continue;
            }
            let cell = match config.precision {
                Precision::F32 => run_cell::<f32>(config, variant, n)?,
                Precision::F64 => run_cell::<f64>(config, variant, n)?,
            };
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Power-law fit of one metric against N for one variant.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub variant: String,
    pub metric: String,
    pub exponent: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of `log(metric)` vs `log(N)`.
pub fn fit_scaling(points: &[(usize, f64)], variant: &str, metric: &str) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::Config(format!(
            "scaling fit needs at least 3 sequence lengths, got {}",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let exponent = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit {
        variant: variant.to_string(),
        metric: metric.to_string(),
        exponent,
        r_squared,
        points: points.len(),
    })
}

/// Fit peak-element and per-batch-latency exponents for every variant
/// present in the cells.
pub fn fit_all(cells: &[BenchCell]) -> Result<Vec<ScalingFit>> {
    let mut by_variant: BTreeMap<String, Vec<&BenchCell>> = BTreeMap::new();
    for cell in cells.iter().filter(|c| !c.skipped) {
        by_variant.entry(cell.record.variant.clone()).or_default().push(cell);
    }
    let mut fits = Vec::new();
    for (variant, cells) in by_variant {
        let peak: Vec<(usize, f64)> = cells
            .iter()
            .map(|c| (c.record.n, c.record.peak_elements as f64))
            .collect();
        fits.push(fit_scaling(&peak, &variant, "peak_elements")?);
        let latency: Vec<(usize, f64)> = cells
            .iter()
            .map(|c| (c.record.n, c.record.mean_ms / c.record.batch as f64))
            .collect();
        fits.push(fit_scaling(&latency, &variant, "latency_per_batch_ms")?);
    }
    Ok(fits)
}

/// Memory-model assertions over measured cells.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryModelReport {
    /// Labels with exactly B·H·N² elements in every dense-OSN cell.
    pub dense_quadratic_labels: usize,
    pub dense_labels_ok: bool,
    pub transformer_labels_ok: bool,
    /// Max nonzeros per row observed after top-k in a dedicated forward.
    pub sparse_max_row_nonzeros: usize,
    pub sparse_topk_ok: bool,
    /// OSN-dense peak / transformer peak at the largest common N.
    pub peak_ratio_at_max_n: f64,
    pub peak_ratio_ok: bool,
    pub pass: bool,
}

/// Check labeled materialization counts, the top-k row contract, and the
/// dense-vs-baseline peak ratio.
pub fn memory_model_check(cells: &[BenchCell], config: &BenchConfig) -> Result<MemoryModelReport> {
    let expect_labels = |cell: &BenchCell| -> u64 {
        (cell.record.batch * config.heads * cell.record.n * cell.record.n) as u64
    };

    let mut dense_quadratic_labels = usize::MAX;
    let mut dense_labels_ok = true;
    let mut transformer_labels_ok = true;
    for cell in cells.iter().filter(|c| !c.skipped) {
        if cell.labels.is_empty() {
            return Err(Error::InstrumentationDisabled);
        }
        let want = expect_labels(cell);
        if cell.record.variant == "osn-dense" {
            let quadratic = cell.labels.values().filter(|&&v| v == want).count();
            dense_quadratic_labels = dense_quadratic_labels.min(quadratic);
            dense_labels_ok &= quadratic >= 4;
        }
        if cell.record.variant == "transformer" {
            transformer_labels_ok &= cell.labels.get("scores") == Some(&want)
                && cell.labels.get("attn") == Some(&want);
        }
    }
    if dense_quadratic_labels == usize::MAX {
        dense_quadratic_labels = 0;
        dense_labels_ok = false;
    }

    // dedicated sparse forward: count post-top-k nonzeros per row
    let sparse_k = config
        .variants
        .iter()
        .find_map(|v| match v {
            Variant::OsnSparse(k) => Some(*k),
            _ => None,
        })
        .unwrap_or(64);
    let n_check = *config.lens.iter().min().expect("validated non-empty");
    let k_eff = sparse_k.min(n_check);
    let sparse_config = Variant::OsnSparse(sparse_k).block_config(config.dim, config.heads, n_check);
    let mut rng = SeededRng::new(config.seed);
    let params = init_params::<f64>(&sparse_config, &mut rng)?;
    let x: Tensor<f64> = rng.gaussian_matrix(&[n_check, config.dim], 0.0, 1.0);
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape, false);
    let xn = tape.constant(x);
    let (_, trace) = osn_block_forward(&mut tape, xn, &nodes, &sparse_config, &mut Mode::Eval)?;
    let mut sparse_max_row_nonzeros = 0;
    for head in &trace.heads {
        let s = tape.value(head.s_final);
        for i in 0..n_check {
            let nz = (0..n_check).filter(|&c| s.get2(i, c) != 0.0).count();
            sparse_max_row_nonzeros = sparse_max_row_nonzeros.max(nz);
        }
    }
    let sparse_topk_ok = sparse_max_row_nonzeros <= k_eff;

    let max_common_n = config
        .lens
        .iter()
        .copied()
        .filter(|&n| {
            ["osn-dense", "transformer"].iter().all(|name| {
                cells.iter().any(|c| !c.skipped && c.record.n == n && c.record.variant == *name)
            })
        })
        .max();
    let (peak_ratio_at_max_n, peak_ratio_ok) = match max_common_n {
        Some(n) => {
            let peak = |name: &str| {
                cells
                    .iter()
                    .find(|c| c.record.n == n && c.record.variant == name)
                    .map(|c| c.record.peak_elements as f64)
                    .unwrap_or(f64::NAN)
            };
            let ratio = peak("osn-dense") / peak("transformer");
            (ratio, ratio > 1.5)
        }
        None => (f64::NAN, false),
    };

    let pass = dense_labels_ok && transformer_labels_ok && sparse_topk_ok && peak_ratio_ok;
    Ok(MemoryModelReport {
        dense_quadratic_labels,
        dense_labels_ok,
        transformer_labels_ok,
        sparse_max_row_nonzeros,
        sparse_topk_ok,
        peak_ratio_at_max_n,
        peak_ratio_ok,
        pass,
    })
}
