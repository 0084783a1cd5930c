//! Selective Synchronization Attention.
//!
//! Tokens are oscillators: learned projections assign each token a natural
//! frequency vector ω and a phase vector θ per head. Pairs couple through a
//! Gaussian kernel of frequency distance, the population coherence enters as
//! the empirical order parameter r, and the attention weight is the
//! steady-state phase-locking coherence
//!
//! ```text
//! τ_ij  = K · r · J_ij
//! S_ij  = J_ij · cos(arcsin(clamp(Δω_ij / (τ_ij + ε), -1, 1)))   if Δω_ij ≤ τ_ij
//!       = 0                                                      otherwise
//! ```
//!
//! Everything here builds graphs on an [`Tape`], so the whole operator is
//! differentiable end to end, including the paths through r and the
//! coupling kernel.

use serde_json::json;

use crate::engine::{alloc, NodeId, Tape, Tensor};
use crate::{Error, Result, Scalar};

/// Numerical floor added to lock thresholds and row sums (the ε of the
/// closed form and of the output normalization).
pub const DEFAULT_EPS: f64 = 1e-8;

/// How pairwise coupling is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingMode<T> {
    /// Gaussian kernel of frequency distance, `J_ij = exp(-α‖ω_i-ω_j‖²)`.
    FrequencyDependent,
    /// Constant `J_ij = J` with `J ∈ (0,1]`. Verification-only mode: the
    /// natural-sparsity analysis assumes uniform coupling.
    UniformJ(T),
}

/// Operator configuration shared by every head.
#[derive(Debug, Clone)]
pub struct SsaConfig<T: Scalar> {
    pub heads: usize,
    pub coupling: CouplingMode<T>,
    /// ε of the closed form and the output normalization.
    pub eps: T,
    /// Optional top-k sparsification applied per row after the lock mask.
    pub sparsity_k: Option<usize>,
    /// Zero S_ij for j > i before normalization. Off by default; S is
    /// inherently bidirectional.
    pub causal: bool,
}

impl<T: Scalar> SsaConfig<T> {
    pub fn new(heads: usize) -> Self {
        SsaConfig {
            heads,
            coupling: CouplingMode::FrequencyDependent,
            eps: T::from_f64_lossy(DEFAULT_EPS),
            sparsity_k: None,
            causal: false,
        }
    }
}

/// Per-head frequency and phase stacks, shapes `[H, N, d]`.
#[derive(Debug, Clone)]
pub struct OscillatorState<T: Scalar> {
    pub omega: Tensor<T>,
    pub theta: Tensor<T>,
}

impl<T: Scalar> OscillatorState<T> {
    pub fn heads(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.omega.shape()[1]
    }
}

/// Everything the operator computed on the way to the attention weights,
/// stacked per head for inspection. `s` is the masked closed form;
/// `s_normalized` additionally reflects optional causal masking / top-k and
/// the row normalization actually used for aggregation.
#[derive(Debug, Clone)]
pub struct SyncArtifacts<T: Scalar> {
    /// Coupling matrices, `[H, N, N]`.
    pub j: Tensor<T>,
    /// Empirical order parameter per head, `[H]`.
    pub r: Tensor<T>,
    /// Frequency mismatch ‖ω_i-ω_j‖₂, `[H, N, N]`.
    pub delta_omega: Tensor<T>,
    /// Lock thresholds K·r·J, `[H, N, N]`.
    pub tau: Tensor<T>,
    /// Hard lock mask Δω ≤ τ, row-major over `[H, N, N]`.
    pub lock_mask: Vec<bool>,
    /// Masked closed-form synchronization matrix, `[H, N, N]`.
    pub s: Tensor<T>,
    /// Row-normalized weights used for aggregation, `[H, N, N]`.
    pub s_normalized: Tensor<T>,
}

impl<T: Scalar> SyncArtifacts<T> {
    pub fn heads(&self) -> usize {
        self.j.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.j.shape()[1]
    }

    /// Fraction of entries passing the phase-locking condition in one head.
    /// Counted by the hard mask, which is exactly the set `{S_ij > 0}` of
    /// the closed form.
    pub fn nonzero_fraction(&self, head: usize) -> f64 {
        let n = self.tokens();
        let from = head * n * n;
        let locked = self.lock_mask[from..from + n * n].iter().filter(|&&m| m).count();
        locked as f64 / (n * n) as f64
    }

    /// One head as CSV: `row,col,J,delta_omega,tau,S,S_normalized`.
    pub fn head_csv(&self, head: usize) -> String {
        let n = self.tokens();
        let (j, d) = (
            self.j.index_axis0(head).unwrap(),
            self.delta_omega.index_axis0(head).unwrap(),
        );
        let (tau, s) = (
            self.tau.index_axis0(head).unwrap(),
            self.s.index_axis0(head).unwrap(),
        );
        let sn = self.s_normalized.index_axis0(head).unwrap();
        let mut out = String::from("row,col,J,delta_omega,tau,S,S_normalized\n");
        for i in 0..n {
            for c in 0..n {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    i,
                    c,
                    j.get2(i, c).to_f64_lossy(),
                    d.get2(i, c).to_f64_lossy(),
                    tau.get2(i, c).to_f64_lossy(),
                    s.get2(i, c).to_f64_lossy(),
                    sn.get2(i, c).to_f64_lossy(),
                ));
            }
        }
        out
    }

    /// Per-head summary: `{"head": h, "r": float, "nonzero_fraction": float}`.
    pub fn head_summary(&self, head: usize) -> serde_json::Value {
        json!({
            "head": head,
            "r": self.r.data()[head].to_f64_lossy(),
            "nonzero_fraction": self.nonzero_fraction(head),
        })
    }
}

/// Node ids of the MFSH parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MfshParams {
    pub w_omega: NodeId,
    pub b_omega: NodeId,
    pub w_theta: NodeId,
    pub b_theta: NodeId,
    pub w_value: NodeId,
    pub b_value: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
    /// Pre-softplus per-head coupling bandwidths, `[H]`.
    pub alpha_hat: NodeId,
    /// Pre-softplus global coupling strength, `[1]`.
    pub k_hat: NodeId,
}

/// Per-head nodes recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub omega: NodeId,
    pub theta: NodeId,
    pub j: NodeId,
    pub delta_omega: NodeId,
    pub tau: NodeId,
    pub ratio: NodeId,
    /// Masked closed form (before causal masking / top-k).
    pub s: NodeId,
    /// What actually feeds the row normalization.
    pub s_final: NodeId,
    pub s_norm: NodeId,
    pub r: NodeId,
    pub y: NodeId,
    pub lock_mask: Vec<bool>,
}

/// Forward-pass trace: per-head nodes plus the `[N, D]` output node.
#[derive(Debug, Clone)]
pub struct SsaTrace {
    pub heads: Vec<HeadTrace>,
    pub out: NodeId,
}

/// Project tokens to per-head frequency and phase matrices.
///
/// The frequency projection output is scaled by `1/sqrt(d)` so that pairwise
/// frequency distances stay within the broad-locking regime at small-variance
/// initialization; the phase projection is left unscaled.
pub fn project_oscillators<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    w_omega: NodeId,
    b_omega: NodeId,
    w_theta: NodeId,
    b_theta: NodeId,
    heads: usize,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let dim = tape.shape(x)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide model dim {}",
            heads, dim
        )));
    }
    let d = dim / heads;
    let inv_sqrt_d = T::from_f64_lossy(1.0 / (d as f64).sqrt());

    let omega_full = tape.linear(x, w_omega, b_omega)?;
    let omega_full = tape.scale(omega_full, inv_sqrt_d)?;
    let theta_full = tape.linear(x, w_theta, b_theta)?;

    let mut omegas = Vec::with_capacity(heads);
    let mut thetas = Vec::with_capacity(heads);
    for h in 0..heads {
        omegas.push(tape.slice_cols(omega_full, h * d, (h + 1) * d)?);
        thetas.push(tape.slice_cols(theta_full, h * d, (h + 1) * d)?);
    }
    Ok((omegas, thetas))
}

/// Pairwise coupling and frequency mismatch for one head.
///
/// Both derive from the same pairwise distance computation: `Δω = sqrt(D²)`
/// and `J = exp(-α D²)` (or a constant in uniform mode).
pub fn coupling_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    omega_head: NodeId,
    mode: &CouplingMode<T>,
    alpha_hat_head: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let n = tape.shape(omega_head)[0];
    let dsq = tape.pairwise_sq_dist(omega_head)?;
    alloc::record_label("delta_omega_sq", n * n);
    let delta_omega = tape.sqrt(dsq)?;

    let j = match mode {
        CouplingMode::FrequencyDependent => {
            let alpha_hat = alpha_hat_head.ok_or_else(|| {
                Error::Config("frequency-dependent coupling needs a bandwidth parameter".into())
            })?;
            let alpha = tape.softplus(alpha_hat)?;
            let alpha_b = tape.broadcast_scalar(alpha, &[n, n])?;
            let scaled = tape.mul(alpha_b, dsq)?;
            let neg = tape.scale(scaled, -T::one())?;
            tape.exp(neg)?
        }
        CouplingMode::UniformJ(value) => tape.constant(Tensor::full(&[n, n], *value)),
    };
    alloc::record_label("j", n * n);
    Ok((j, delta_omega))
}

/// Empirical order parameter of one head's phases: mean over the d phase
/// dimensions of the magnitude of the population-mean unit phasor.
pub fn order_parameter<T: Scalar>(tape: &mut Tape<T>, theta_head: NodeId) -> Result<NodeId> {
    let (n, d) = (tape.shape(theta_head)[0], tape.shape(theta_head)[1]);
    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let inv_d = T::from_f64_lossy(1.0 / d as f64);

    let cos = tape.cos(theta_head)?;
    let sin = tape.sin(theta_head)?;
    let mean_cos = tape.sum_cols(cos)?;
    let mean_cos = tape.scale(mean_cos, inv_n)?;
    let mean_sin = tape.sum_cols(sin)?;
    let mean_sin = tape.scale(mean_sin, inv_n)?;
    let cos_sq = tape.square(mean_cos)?;
    let sin_sq = tape.square(mean_sin)?;
    let mag_sq = tape.add(cos_sq, sin_sq)?;
    let mag = tape.sqrt(mag_sq)?;
    let total = tape.sum_all(mag)?;
    tape.scale(total, inv_d)
}

/// Lock threshold, clamped ratio, and masked synchronization matrix.
pub struct SyncNodes {
    pub tau: NodeId,
    pub ratio: NodeId,
    pub s: NodeId,
    pub lock_mask: Vec<bool>,
}

/// Closed-form synchronization matrix for one head.
///
/// `r` and `k` are single-element nodes (post-softplus coupling strength).
/// `r = 0` is a valid degenerate input: every off-diagonal pair unlocks and
/// the diagonal stays at `J_ii`.
pub fn sync_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    j: NodeId,
    delta_omega: NodeId,
    r: NodeId,
    k: NodeId,
    eps: T,
) -> Result<SyncNodes> {
    let n = tape.shape(j)[0];
    let kr = tape.mul(k, r)?;
    let kr_b = tape.broadcast_scalar(kr, &[n, n])?;
    let tau = tape.mul(kr_b, j)?;

    let denom = tape.add_const(tau, eps)?;
    let raw_ratio = tape.div(delta_omega, denom)?;
    let ratio = tape.clamp(raw_ratio, -T::one(), T::one())?;
    alloc::record_label("ratio", n * n);

    let phase = tape.arcsin(ratio)?;
    let coherence = tape.cos(phase)?;
    let s_raw = tape.mul(j, coherence)?;

    let lock_mask: Vec<bool> = tape
        .value(delta_omega)
        .data()
        .iter()
        .zip(tape.value(tau).data())
        .map(|(&d, &t)| d <= t)
        .collect();
    alloc::record_label("lock_mask", n * n);
    let zeros = tape.constant(Tensor::zeros(&[n, n]));
    let s = tape.select(lock_mask.clone(), s_raw, zeros)?;
    alloc::record_label("s", n * n);

    Ok(SyncNodes {
        tau,
        ratio,
        s,
        lock_mask,
    })
}

/// Analytic partial ∂S/∂Δω of the closed form, holding J and τ fixed.
///
/// Defined on strictly locked entries, where it is
/// `-(Δω/τ²)·J/sqrt(1-(Δω/τ)²)` ≤ 0; the ratio is boundary-clamped to
/// magnitude ≤ 1-1e-6 exactly like the tape backward, and entries at or
/// beyond the lock boundary give zero (no gradient flows through the mask).
pub fn ds_d_delta_omega<T: Scalar>(
    delta_omega: &Tensor<T>,
    tau: &Tensor<T>,
    j: &Tensor<T>,
) -> Tensor<T> {
    let lim = T::one() - T::from_f64_lossy(1e-6);
    Tensor::from_fn(delta_omega.shape(), |i| {
        let (d, t, jj) = (delta_omega.data()[i], tau.data()[i], j.data()[i]);
        if d >= t || t <= T::zero() {
            return T::zero();
        }
        let x = (d / t).min(lim);
        -(x / t) * jj / (T::one() - x * x).sqrt()
    })
}

/// Row-normalize and aggregate values: `y_i = Σ_j S_ij v_j / (Σ_j S_ij + ε)`.
///
/// Returns the aggregated output and the normalized weight node.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    s: NodeId,
    v: NodeId,
    eps: T,
) -> Result<(NodeId, NodeId)> {
    let n = tape.shape(s)[0];
    let row_sum = tape.sum_rows(s)?;
    let denom = tape.add_const(row_sum, eps)?;
    let denom_b = tape.broadcast_col(denom, n)?;
    let s_norm = tape.div(s, denom_b)?;
    alloc::record_label("s_normalized", n * n);
    let y = tape.matmul(s_norm, v)?;
    Ok((y, s_norm))
}

/// Multi-frequency synchronization heads, end to end: project, couple,
/// lock, optionally sparsify, normalize, aggregate, concatenate, project out.
pub fn mfsh_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    params: &MfshParams,
    config: &SsaConfig<T>,
) -> Result<SsaTrace> {
    let n = tape.shape(x)[0];
    let heads = config.heads;
    if let Some(k) = config.sparsity_k {
        if k < 1 || k > n {
            return Err(Error::Config(format!(
                "sparsity k = {} out of range for {} tokens",
                k, n
            )));
        }
    }
    let dim = tape.shape(x)[1];
    let d = dim / heads.max(1);

    let (omegas, thetas) = project_oscillators(
        tape,
        x,
        params.w_omega,
        params.b_omega,
        params.w_theta,
        params.b_theta,
        heads,
    )?;
    let v_full = tape.linear(x, params.w_value, params.b_value)?;
    let k_coupling = tape.softplus(params.k_hat)?;

    let mut head_traces = Vec::with_capacity(heads);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let alpha_h = match config.coupling {
            CouplingMode::FrequencyDependent => Some(tape.slice_cols(params.alpha_hat, h, h + 1)?),
            CouplingMode::UniformJ(_) => None,
        };
        let (j, delta_omega) = coupling_matrix(tape, omegas[h], &config.coupling, alpha_h)?;
        let r = order_parameter(tape, thetas[h])?;
        let sync = sync_matrix(tape, j, delta_omega, r, k_coupling, config.eps)?;

        let mut s_final = sync.s;
        if config.causal {
            let keep: Vec<bool> = (0..n * n).map(|idx| idx % n <= idx / n).collect();
            let zeros = tape.constant(Tensor::zeros(&[n, n]));
            s_final = tape.select(keep, s_final, zeros)?;
        }
        if let Some(k) = config.sparsity_k {
            s_final = tape.topk_rows(s_final, k)?;
        }

        let v_h = tape.slice_cols(v_full, h * d, (h + 1) * d)?;
        let (y, s_norm) = aggregate(tape, s_final, v_h, config.eps)?;
        outputs.push(y);
        head_traces.push(HeadTrace {
            omega: omegas[h],
            theta: thetas[h],
            j,
            delta_omega,
            tau: sync.tau,
            ratio: sync.ratio,
            s: sync.s,
            s_final,
            s_norm,
            r,
            y,
            lock_mask: sync.lock_mask,
        });
    }

    let concat = tape.concat_cols(&outputs)?;
    let out = tape.linear(concat, params.w_out, params.b_out)?;
    Ok(SsaTrace {
        heads: head_traces,
        out,
    })
}

/// Materialize the oscillator state from a trace.
pub fn collect_state<T: Scalar>(tape: &Tape<T>, trace: &SsaTrace) -> Result<OscillatorState<T>> {
    let omega: Vec<Tensor<T>> = trace.heads.iter().map(|h| tape.value(h.omega).clone()).collect();
    let theta: Vec<Tensor<T>> = trace.heads.iter().map(|h| tape.value(h.theta).clone()).collect();
    Ok(OscillatorState {
        omega: Tensor::stack(&omega)?,
        theta: Tensor::stack(&theta)?,
    })
}

/// Materialize the synchronization artifacts from a trace.
pub fn collect_artifacts<T: Scalar>(tape: &Tape<T>, trace: &SsaTrace) -> Result<SyncArtifacts<T>> {
    let stack = |f: &dyn Fn(&HeadTrace) -> NodeId| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = trace.heads.iter().map(|h| tape.value(f(h)).clone()).collect();
        Tensor::stack(&parts)
    };
    let r_vals: Vec<T> = trace.heads.iter().map(|h| tape.value(h.r).item()).collect();
    let mut lock_mask = Vec::new();
    for h in &trace.heads {
        lock_mask.extend_from_slice(&h.lock_mask);
    }
    Ok(SyncArtifacts {
        j: stack(&|h| h.j)?,
        r: Tensor::from_vec(&[trace.heads.len()], r_vals)?,
        delta_omega: stack(&|h| h.delta_omega)?,
        tau: stack(&|h| h.tau)?,
        lock_mask,
        s: stack(&|h| h.s)?,
        s_normalized: stack(&|h| h.s_norm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SeededRng;

    // softplus^{-1}(1) so that softplus(alpha_hat) = 1 in coupling tests
    const ALPHA_HAT_ONE: f64 = 0.5413248546129181;

    fn tape_with_omega(omega: Tensor<f64>) -> (Tape<f64>, NodeId) {
        let mut tape = Tape::new();
        let node = tape.leaf(omega, true);
        (tape, node)
    }

    #[test]
    fn identical_frequencies_give_unit_coupling_zero_mismatch() {
        let omega = Tensor::from_vec(&[2, 3], vec![0.4, -0.2, 1.0, 0.4, -0.2, 1.0]).unwrap();
        let (mut tape, node) = tape_with_omega(omega);
        let alpha = tape.constant(Tensor::scalar(ALPHA_HAT_ONE));
        let (j, d) =
            coupling_matrix(&mut tape, node, &CouplingMode::FrequencyDependent, Some(alpha)).unwrap();
        assert!(tape.value(j).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coupling_at_log2_distance_is_half() {
        // alpha = 1, squared distance = ln 2 -> J = exp(-ln 2) = 0.5
        let gap = (2.0f64).ln().sqrt();
        let omega = Tensor::from_vec(&[2, 1], vec![0.0, gap]).unwrap();
        let (mut tape, node) = tape_with_omega(omega);
        let alpha = tape.constant(Tensor::scalar(ALPHA_HAT_ONE));
        let (j, _) =
            coupling_matrix(&mut tape, node, &CouplingMode::FrequencyDependent, Some(alpha)).unwrap();
        assert!((tape.value(j).get2(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coupling_quarter_distance_scalar_oracle() {
        // alpha = 1, squared distance = 0.25 -> J = exp(-0.25)
        let omega = Tensor::from_vec(&[2, 1], vec![0.0, 0.5]).unwrap();
        let (mut tape, node) = tape_with_omega(omega);
        let alpha = tape.constant(Tensor::scalar(ALPHA_HAT_ONE));
        let (j, d) =
            coupling_matrix(&mut tape, node, &CouplingMode::FrequencyDependent, Some(alpha)).unwrap();
        assert!((tape.value(j).get2(0, 1) - 0.7788007830714049).abs() < 1e-12);
        assert!((tape.value(d).get2(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn order_parameter_perfect_coherence() {
        let theta = Tensor::<f64>::full(&[5, 3], 1.234);
        let mut tape = Tape::new();
        let node = tape.constant(theta);
        let r = order_parameter(&mut tape, node).unwrap();
        assert!((tape.value(r).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn order_parameter_symmetric_cancellation() {
        use std::f64::consts::PI;
        // four phases {0, π/2, π, 3π/2} in every dimension -> r = 0
        let phases = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
        let theta = Tensor::from_fn(&[4, 3], |i| phases[i / 3]);
        let mut tape = Tape::new();
        let node = tape.constant(theta);
        let r = order_parameter(&mut tape, node).unwrap();
        assert!(tape.value(r).item().abs() < 1e-12);
    }

    #[test]
    fn order_parameter_averages_over_dimensions() {
        use std::f64::consts::PI;
        // dim 0 all zeros (r=1), dim 1 the four symmetric phases (r=0) -> 0.5
        let phases = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
        let theta = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 0.0 } else { phases[i / 2] });
        let mut tape = Tape::new();
        let node = tape.constant(theta);
        let r = order_parameter(&mut tape, node).unwrap();
        assert!((tape.value(r).item() - 0.5).abs() < 1e-12);
    }

    fn uniform_sync(delta: f64) -> f64 {
        // S for UniformJ = 1, K·r = 1 at the given mismatch
        let mut tape = Tape::new();
        let j = tape.constant(Tensor::full(&[2, 2], 1.0));
        let d = tape.constant(Tensor::from_vec(&[2, 2], vec![0.0, delta, delta, 0.0]).unwrap());
        let r = tape.constant(Tensor::scalar(1.0));
        let k = tape.constant(Tensor::scalar(1.0));
        let sync = sync_matrix(&mut tape, j, d, r, k, 1e-8).unwrap();
        tape.value(sync.s).get2(0, 1)
    }

    #[test]
    fn sync_uniform_345_case() {
        // Δω = 0.6, K·r·J = 1 -> S = sqrt(1 - 0.36) = 0.8
        assert!((uniform_sync(0.6) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sync_unlocked_is_exactly_zero() {
        assert_eq!(uniform_sync(2.0), 0.0);
    }

    #[test]
    fn sync_diagonal_is_unit_self_synchronization() {
        let mut rng = SeededRng::new(21);
        let omega: Tensor<f64> = rng.gaussian_matrix(&[6, 4], 0.0, 0.3);
        let theta: Tensor<f64> = rng.gaussian_matrix(&[6, 4], 0.0, 0.3);
        let mut tape = Tape::new();
        let on = tape.constant(omega);
        let tn = tape.constant(theta);
        let alpha = tape.constant(Tensor::scalar(ALPHA_HAT_ONE));
        let (j, d) =
            coupling_matrix(&mut tape, on, &CouplingMode::FrequencyDependent, Some(alpha)).unwrap();
        let r = order_parameter(&mut tape, tn).unwrap();
        let k = tape.constant(Tensor::scalar(5.0));
        let sync = sync_matrix(&mut tape, j, d, r, k, 1e-8).unwrap();
        let s = tape.value(sync.s);
        for i in 0..6 {
            assert!((s.get2(i, i) - 1.0).abs() < 1e-12, "S_ii must be 1");
        }
    }

    #[test]
    fn sync_frequency_dependent_scalar_oracle() {
        // alpha = 1, ‖Δω vector‖² = 0.25 so J = exp(-0.25), Δω = 0.5, K·r = 1
        // S = J · sqrt(1 - (0.5/J)²) = 0.5971018838629077
        let omega = Tensor::from_vec(&[2, 1], vec![0.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let on = tape.constant(omega);
        let alpha = tape.constant(Tensor::scalar(ALPHA_HAT_ONE));
        let (j, d) =
            coupling_matrix(&mut tape, on, &CouplingMode::FrequencyDependent, Some(alpha)).unwrap();
        let r = tape.constant(Tensor::scalar(1.0));
        let k = tape.constant(Tensor::scalar(1.0));
        let sync = sync_matrix(&mut tape, j, d, r, k, 1e-8).unwrap();
        assert!(
            (tape.value(sync.s).get2(0, 1) - 0.5971018838629077).abs() < 1e-7,
            "got {}",
            tape.value(sync.s).get2(0, 1)
        );
    }

    #[test]
    fn zero_order_parameter_unlocks_off_diagonal() {
        let mut tape = Tape::new();
        let j = tape.constant(Tensor::full(&[3, 3], 1.0));
        let d = tape.constant(Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 0.0 } else { 0.7 }));
        let r = tape.constant(Tensor::scalar(0.0));
        let k = tape.constant(Tensor::scalar(5.0));
        let sync = sync_matrix(&mut tape, j, d, r, k, 1e-8).unwrap();
        let s = tape.value(sync.s);
        for i in 0..3 {
            for c in 0..3 {
                if i == c {
                    assert_eq!(s.get2(i, c), 1.0, "diagonal survives r = 0");
                } else {
                    assert_eq!(s.get2(i, c), 0.0, "off-diagonal unlocks at r = 0");
                }
            }
        }
    }

    #[test]
    fn ds_formula_values() {
        // Δω = 0 -> 0; J = 1, K·r = 1, Δω = 0.5 -> -0.5/sqrt(0.75)
        let d = Tensor::from_vec(&[2], vec![0.0f64, 0.5]).unwrap();
        let tau = Tensor::full(&[2], 1.0);
        let j = Tensor::full(&[2], 1.0);
        let g = ds_d_delta_omega(&d, &tau, &j);
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] + 0.5773502691896258).abs() < 1e-12);
    }

    #[test]
    fn ds_formula_matches_central_differences() {
        // FD of the scalar closed form at Δω = 0.5 with h = 1e-5
        let closed = |d: f64| (1.0 - d * d).sqrt();
        let h = 1e-5;
        let fd = (closed(0.5 + h) - closed(0.5 - h)) / (2.0 * h);
        assert!((fd + 0.5773502691896258).abs() < 1e-9);

        // random locked interior points, analytic vs FD of J·sqrt(1-(d/t)²)
        let mut rng = SeededRng::new(33);
        for _ in 0..100 {
            let t = 0.5 + rng.uniform_f64() * 2.0;
            let jj = 0.2 + rng.uniform_f64() * 0.8;
            let ratio = rng.uniform_f64() * 0.9;
            let d0 = ratio * t;
            let f = |d: f64| jj * (1.0 - (d / t) * (d / t)).sqrt();
            let fd = (f(d0 + h) - f(d0 - h)) / (2.0 * h);
            let g = ds_d_delta_omega(
                &Tensor::from_vec(&[1], vec![d0]).unwrap(),
                &Tensor::from_vec(&[1], vec![t]).unwrap(),
                &Tensor::from_vec(&[1], vec![jj]).unwrap(),
            );
            let a = g.data()[0];
            assert!(a <= 0.0, "∂S/∂Δω must be non-positive");
            let rel = (a - fd).abs() / a.abs().max(1.0);
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn aggregate_mean_of_two_and_zero_row() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0f64, 1.0, 0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let (y, _) = aggregate(&mut tape, s, v, 1e-8).unwrap();
        let yv = tape.value(y);
        assert!((yv.get2(0, 0) - 0.5).abs() < 1e-7);
        assert!((yv.get2(0, 1) - 0.5).abs() < 1e-7);
        // all-zero row aggregates to (numerically) zero via the ε denominator
        assert!(yv.get2(1, 0).abs() < 1e-12 && yv.get2(1, 1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_scalar_loop_oracle() {
        let mut rng = SeededRng::new(8);
        let s_raw: Tensor<f64> = rng.gaussian_matrix(&[5, 5], 0.5, 0.3);
        let v: Tensor<f64> = rng.gaussian_matrix(&[5, 3], 0.0, 1.0);
        let eps = 1e-8;
        // independent scalar loop
        let mut expect = vec![0.0; 15];
        for i in 0..5 {
            let mut denom = eps;
            for jc in 0..5 {
                denom += s_raw.get2(i, jc);
            }
            for l in 0..3 {
                let mut num = 0.0;
                for jc in 0..5 {
                    num += s_raw.get2(i, jc) * v.get2(jc, l);
                }
                expect[i * 3 + l] = num / denom;
            }
        }
        let mut tape = Tape::new();
        let sn = tape.constant(s_raw);
        let vn = tape.constant(v);
        let (y, _) = aggregate(&mut tape, sn, vn, eps).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn toy_params(tape: &mut Tape<f64>, dim: usize, heads: usize, seed: u64) -> MfshParams {
        let mut rng = SeededRng::new(seed);
        let w = |t: &mut Tape<f64>, rng: &mut SeededRng| {
            let m: Tensor<f64> = rng.gaussian_matrix(&[dim, dim], 0.0, 0.02);
            t.leaf(m, true)
        };
        let w_omega = w(tape, &mut rng);
        let b_omega = tape.leaf(Tensor::zeros(&[dim]), true);
        let w_theta = w(tape, &mut rng);
        let b_theta = tape.leaf(Tensor::zeros(&[dim]), true);
        let w_value = w(tape, &mut rng);
        let b_value = tape.leaf(Tensor::zeros(&[dim]), true);
        let w_out = w(tape, &mut rng);
        let b_out = tape.leaf(Tensor::zeros(&[dim]), true);
        let alpha_hat = tape.leaf(Tensor::full(&[heads], -2.2521684610440907), true); // softplus -> 0.1
        let k_hat = tape.leaf(Tensor::scalar(4.993284640182216), true); // softplus -> 5.0
        MfshParams {
            w_omega,
            b_omega,
            w_theta,
            b_theta,
            w_value,
            b_value,
            w_out,
            b_out,
            alpha_hat,
            k_hat,
        }
    }

    #[test]
    fn single_token_sync_matrix_is_one() {
        let mut tape = Tape::new();
        let params = toy_params(&mut tape, 8, 2, 4);
        let mut rng = SeededRng::new(5);
        let x: Tensor<f64> = rng.gaussian_matrix(&[1, 8], 0.0, 1.0);
        let xn = tape.constant(x);
        let trace = mfsh_forward(&mut tape, xn, &params, &SsaConfig::new(2)).unwrap();
        for h in &trace.heads {
            assert_eq!(tape.value(h.s).data(), &[1.0]);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (n, dim, heads) = (6, 8, 2);
        let mut rng = SeededRng::new(6);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[n, dim], |i| x.get2(perm[i / dim], i % dim));

        let mut tape = Tape::new();
        let params = toy_params(&mut tape, dim, heads, 4);
        let xn = tape.constant(x);
        let t1 = mfsh_forward(&mut tape, xn, &params, &SsaConfig::new(heads)).unwrap();
        let y = tape.value(t1.out).clone();

        let mut tape2 = Tape::new();
        let params2 = toy_params(&mut tape2, dim, heads, 4);
        let xpn = tape2.constant(xp);
        let t2 = mfsh_forward(&mut tape2, xpn, &params2, &SsaConfig::new(heads)).unwrap();
        let yp = tape2.value(t2.out);

        for i in 0..n {
            for c in 0..dim {
                assert!(
                    (y.get2(perm[i], c) - yp.get2(i, c)).abs() < 1e-12,
                    "output must permute with the tokens"
                );
            }
        }
    }

    #[test]
    fn mfsh_invariants_on_random_inputs() {
        let (n, dim, heads) = (12, 8, 2);
        for seed in 0..5u64 {
            let mut rng = SeededRng::new(100 + seed);
            let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
            let mut tape = Tape::new();
            let params = toy_params(&mut tape, dim, heads, seed);
            let xn = tape.constant(x);
            let trace = mfsh_forward(&mut tape, xn, &params, &SsaConfig::new(heads)).unwrap();
            let art = collect_artifacts(&tape, &trace).unwrap();
            for h in 0..heads {
                let s = art.s.index_axis0(h).unwrap();
                let d = art.delta_omega.index_axis0(h).unwrap();
                let tau = art.tau.index_axis0(h).unwrap();
                let rv = art.r.data()[h];
                assert!((0.0..=1.0).contains(&rv), "r in [0,1]");
                for i in 0..n {
                    assert!((s.get2(i, i) - 1.0).abs() < 1e-12, "self-synchronization");
                    for c in 0..n {
                        let v = s.get2(i, c);
                        assert!((-1e-15..=1.0 + 1e-12).contains(&v), "S in [0,1], got {v}");
                        assert!((v - s.get2(c, i)).abs() < 1e-12, "S symmetric");
                        // lock exactness: S > 0 iff Δω <= τ
                        assert_eq!(v > 0.0, d.get2(i, c) <= tau.get2(i, c));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_mode_monotone_in_mismatch() {
        // with J, K, r fixed, S is non-increasing in Δω on [0, τ]
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let delta = step as f64 / 50.0; // τ = 1
            let s = uniform_sync(delta);
            assert!(s <= prev + 1e-15, "S must not increase with mismatch");
            prev = s;
        }
    }

    #[test]
    fn degenerate_identical_tokens_give_all_ones() {
        let (n, dim, heads) = (5, 8, 2);
        let row: Vec<f64> = (0..dim).map(|c| 0.3 * c as f64 - 1.0).collect();
        let x = Tensor::from_fn(&[n, dim], |i| row[i % dim]);
        let mut tape = Tape::new();
        let params = toy_params(&mut tape, dim, heads, 9);
        let xn = tape.constant(x);
        let trace = mfsh_forward(&mut tape, xn, &params, &SsaConfig::new(heads)).unwrap();
        let art = collect_artifacts(&tape, &trace).unwrap();
        assert!(art.s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(art.r.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn topk_rows_bounded_and_rows_normalized() {
        let (n, dim, heads, k) = (10, 8, 2, 3);
        let mut rng = SeededRng::new(31);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let mut tape = Tape::new();
        let params = toy_params(&mut tape, dim, heads, 2);
        let xn = tape.constant(x);
        let mut config = SsaConfig::new(heads);
        config.sparsity_k = Some(k);
        let trace = mfsh_forward(&mut tape, xn, &params, &config).unwrap();
        for h in &trace.heads {
            let s_final = tape.value(h.s_final);
            let s_norm = tape.value(h.s_norm);
            for i in 0..n {
                let nonzeros = (0..n).filter(|&c| s_final.get2(i, c) != 0.0).count();
                assert!(nonzeros <= k, "at most k nonzeros per row");
                let sum: f64 = (0..n).map(|c| s_norm.get2(i, c)).sum();
                assert!(
                    (sum - 1.0).abs() < 1e-6 || sum.abs() < 1e-12,
                    "rows sum to 1 or are all-zero, got {sum}"
                );
            }
        }
    }

    #[test]
    fn projections_match_scalar_loop_oracle() {
        let (n, dim, heads) = (6, 8, 2);
        let d = dim / heads;
        let mut rng = SeededRng::new(77);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let w: Tensor<f64> = rng.gaussian_matrix(&[dim, dim], 0.0, 0.5);
        let b: Tensor<f64> = rng.gaussian_matrix(&[dim], 0.0, 0.5);
        let wt: Tensor<f64> = rng.gaussian_matrix(&[dim, dim], 0.0, 0.5);
        let bt: Tensor<f64> = rng.gaussian_matrix(&[dim], 0.0, 0.5);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.constant(w.clone());
        let bn = tape.constant(b.clone());
        let wtn = tape.constant(wt.clone());
        let btn = tape.constant(bt.clone());
        let (omegas, thetas) = project_oscillators(&mut tape, xn, wn, bn, wtn, btn, heads).unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        for h in 0..heads {
            let om = tape.value(omegas[h]);
            let th = tape.value(thetas[h]);
            for i in 0..n {
                for l in 0..d {
                    let col = h * d + l;
                    let mut acc_o = b.data()[col];
                    let mut acc_t = bt.data()[col];
                    for m in 0..dim {
                        acc_o += x.get2(i, m) * w.get2(m, col);
                        acc_t += x.get2(i, m) * wt.get2(m, col);
                    }
                    assert!((om.get2(i, l) - acc_o * scale).abs() < 1e-12);
                    assert!((th.get2(i, l) - acc_t).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projections_zero_input_gives_scaled_bias() {
        let (n, dim, heads) = (4, 8, 2);
        let d = dim / heads;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[n, dim]));
        let w = tape.constant(Tensor::zeros(&[dim, dim]));
        let b = tape.constant(Tensor::from_fn(&[dim], |i| i as f64));
        let wt = tape.constant(Tensor::zeros(&[dim, dim]));
        let bt = tape.constant(Tensor::zeros(&[dim]));
        let (omegas, _) = project_oscillators(&mut tape, x, w, b, wt, bt, heads).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        for h in 0..heads {
            let om = tape.value(omegas[h]);
            for i in 0..n {
                for l in 0..d {
                    assert_eq!(om.get2(i, l), (h * d + l) as f64 * scale);
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 7]));
        let w = tape.constant(Tensor::zeros(&[7, 7]));
        let b = tape.constant(Tensor::zeros(&[7]));
        let err = project_oscillators(&mut tape, x, w, b, w, b, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mfsh_gradient_matches_finite_differences() {
        // tiny config, loss through the full operator; init keeps every
        // ratio far from the lock boundary
        let (n, dim, heads) = (5, 8, 2);
        let mut rng = SeededRng::new(55);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let err = crate::engine::grad_check(
            |tape, leaf| {
                let params = toy_params(tape, dim, heads, 4);
                let trace = mfsh_forward(tape, leaf, &params, &SsaConfig::new(heads))?;
                tape.mean_all(trace.out)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn artifacts_csv_and_summary_shape() {
        let (n, dim, heads) = (4, 8, 2);
        let mut rng = SeededRng::new(3);
        let x: Tensor<f64> = rng.gaussian_matrix(&[n, dim], 0.0, 1.0);
        let mut tape = Tape::new();
        let params = toy_params(&mut tape, dim, heads, 1);
        let xn = tape.constant(x);
        let trace = mfsh_forward(&mut tape, xn, &params, &SsaConfig::new(heads)).unwrap();
        let art = collect_artifacts(&tape, &trace).unwrap();

        let csv = art.head_csv(0);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "row,col,J,delta_omega,tau,S,S_normalized");
        assert_eq!(csv.lines().count(), 1 + n * n);

        let summary = art.head_summary(1);
        assert_eq!(summary["head"], 1);
        let r = summary["r"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(summary["nonzero_fraction"].as_f64().unwrap() <= 1.0);
    }
}
