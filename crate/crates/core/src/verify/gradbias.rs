//! Frequency-gradient bias checks.
//!
//! For a locked pair (i, j), a surrogate loss L = −S_ij must pull ω_i toward
//! ω_j (one SGD step strictly shrinks ‖ω_i − ω_j‖) and L = +S_ij must push
//! it away. The analytic gradient includes every path: the mismatch term
//! ∂S/∂Δω, the coupling kernel ∂S/∂J, and (when phases are perturbed) the
//! order parameter; finite differences validate the whole bundle.

use crate::engine::{grad_check, NodeId, SeededRng, Tape, Tensor};
use crate::ssa::{coupling_matrix, order_parameter, sync_matrix, CouplingMode};
use crate::verify::SuiteReport;
use crate::Result;

/// Outcome of one pair check.
#[derive(Debug, Clone, Copy)]
pub struct BiasCheck {
    pub locked: bool,
    /// ‖ω_i − ω_j‖ before the step.
    pub mismatch_before: f64,
    /// After one step on ω_i under L = −S_ij.
    pub mismatch_after_attract: f64,
    /// After one step on ω_i under L = +S_ij.
    pub mismatch_after_repel: f64,
    /// Gradient of −S_ij with respect to ω is zero off the pair.
    pub gradient_localized: bool,
}

impl BiasCheck {
    pub fn attract_decreases(&self) -> bool {
        self.mismatch_after_attract < self.mismatch_before
    }

    pub fn repel_increases(&self) -> bool {
        self.mismatch_after_repel > self.mismatch_before
    }
}

fn entry_as_scalar(
    tape: &mut Tape<f64>,
    s: NodeId,
    i: usize,
    j: usize,
) -> Result<NodeId> {
    let n = tape.shape(s)[0];
    let picker = Tensor::from_fn(&[n, n], |idx| if idx == i * n + j { 1.0 } else { 0.0 });
    let p = tape.constant(picker);
    let masked = tape.mul(s, p)?;
    tape.sum_all(masked)
}

fn build_s(
    tape: &mut Tape<f64>,
    omega: NodeId,
    theta: NodeId,
    alpha_hat: f64,
    k_hat: f64,
) -> Result<(NodeId, Vec<bool>)> {
    let alpha = tape.constant(Tensor::scalar(alpha_hat));
    let (j, delta) = coupling_matrix(tape, omega, &CouplingMode::FrequencyDependent, Some(alpha))?;
    let r = order_parameter(tape, theta)?;
    let k_hat_node = tape.constant(Tensor::scalar(k_hat));
    let k = tape.softplus(k_hat_node)?;
    let sync = sync_matrix(tape, j, delta, r, k, 1e-8)?;
    Ok((sync.s, sync.lock_mask))
}

fn mismatch(omega: &Tensor<f64>, i: usize, j: usize) -> f64 {
    let d = omega.shape()[1];
    (0..d)
        .map(|l| {
            let diff = omega.get2(i, l) - omega.get2(j, l);
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

/// Check the gradient direction on one pair by stepping ω_i only.
pub fn positional_bias_check(
    omega: &Tensor<f64>,
    theta: &Tensor<f64>,
    alpha_hat: f64,
    k_hat: f64,
    pair: (usize, usize),
    step: f64,
) -> Result<BiasCheck> {
    let (i, j) = pair;
    let n = omega.shape()[0];
    let d = omega.shape()[1];

    let mut tape = Tape::new();
    let omega_node = tape.leaf(omega.clone(), true);
    let theta_node = tape.constant(theta.clone());
    let (s, lock_mask) = build_s(&mut tape, omega_node, theta_node, alpha_hat, k_hat)?;
    let before = mismatch(omega, i, j);
    if !lock_mask[i * n + j] {
        // unlocked pair: the mask blocks every path, gradient is exactly zero
        let s_ij = entry_as_scalar(&mut tape, s, i, j)?;
        let neg = tape.scale(s_ij, -1.0)?;
        let grads = tape.backward(neg)?;
        let g = grads.get_or_zero(omega_node);
        assert!(g.data().iter().all(|&v| v == 0.0));
        return Ok(BiasCheck {
            locked: false,
            mismatch_before: before,
            mismatch_after_attract: before,
            mismatch_after_repel: before,
            gradient_localized: true,
        });
    }

    let s_ij = entry_as_scalar(&mut tape, s, i, j)?;
    let loss_attract = tape.scale(s_ij, -1.0)?;
    let grads = tape.backward(loss_attract)?;
    let g = grads.get_or_zero(omega_node);

    // S_ij involves only ω_i and ω_j, so no other row may receive gradient
    let gradient_localized = (0..n)
        .filter(|&row| row != i && row != j)
        .all(|row| (0..d).all(|l| g.get2(row, l) == 0.0));

    let stepped = |sign: f64| {
        Tensor::from_fn(omega.shape(), |idx| {
            if idx / d == i {
                omega.data()[idx] - sign * step * g.data()[idx]
            } else {
                omega.data()[idx]
            }
        })
    };
    let attract = stepped(1.0);
    let repel = stepped(-1.0);
    Ok(BiasCheck {
        locked: true,
        mismatch_before: before,
        mismatch_after_attract: mismatch(&attract, i, j),
        mismatch_after_repel: mismatch(&repel, i, j),
        gradient_localized,
    })
}

/// Finite-difference validation of ∂(−S_ij)/∂ω and ∂(−S_ij)/∂θ (the latter
/// flows through the order parameter). Returns the larger of the two max
/// relative errors.
pub fn bias_gradient_fd_check(
    omega: &Tensor<f64>,
    theta: &Tensor<f64>,
    alpha_hat: f64,
    k_hat: f64,
    pair: (usize, usize),
) -> Result<f64> {
    let (i, j) = pair;
    let theta_c = theta.clone();
    let err_omega = grad_check(
        |tape, leaf| {
            let theta_node = tape.constant(theta_c.clone());
            let (s, _) = build_s(tape, leaf, theta_node, alpha_hat, k_hat)?;
            let s_ij = entry_as_scalar(tape, s, i, j)?;
            tape.scale(s_ij, -1.0)
        },
        omega,
        1e-6,
    )?;
    let omega_c = omega.clone();
    let err_theta = grad_check(
        |tape, leaf| {
            let omega_node = tape.constant(omega_c.clone());
            let (s, _) = build_s(tape, omega_node, leaf, alpha_hat, k_hat)?;
            let s_ij = entry_as_scalar(tape, s, i, j)?;
            tape.scale(s_ij, -1.0)
        },
        theta,
        1e-6,
    )?;
    Ok(err_omega.max(err_theta))
}

/// Random locked-pair configuration in the broad-locking regime.
pub fn random_locked_instance(
    rng: &mut SeededRng,
    tokens: usize,
    dims: usize,
) -> (Tensor<f64>, Tensor<f64>, (usize, usize)) {
    let omega: Tensor<f64> = rng.gaussian_matrix(&[tokens, dims], 0.0, 0.15);
    let theta: Tensor<f64> = rng.gaussian_matrix(&[tokens, dims], 0.0, 0.3);
    let i = rng.below(tokens);
    let mut j = rng.below(tokens);
    while j == i {
        j = rng.below(tokens);
    }
    (omega, theta, (i, j))
}

/// Pre-softplus values used by the suite (bandwidth 0.1, coupling 5).
pub const SUITE_ALPHA_HAT: f64 = -2.2521684610440907;
pub const SUITE_K_HAT: f64 = 4.993284640182216;

/// 100 random locked pairs: attraction/repulsion signs must be right every
/// time; a subsample is validated against finite differences.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradbias", seed);
    let mut rng = SeededRng::new(seed);
    let trials = 100;
    let mut sign_correct = 0;
    let mut localized = 0;
    let mut locked_pairs = 0;
    let mut max_fd_err = 0.0f64;
    for trial in 0..trials {
        let (omega, theta, pair) = random_locked_instance(&mut rng, 8, 4);
        let check = positional_bias_check(&omega, &theta, SUITE_ALPHA_HAT, SUITE_K_HAT, pair, 1e-3)?;
        if check.locked {
            locked_pairs += 1;
            if check.attract_decreases() && check.repel_increases() {
                sign_correct += 1;
            }
            if check.gradient_localized {
                localized += 1;
            }
        }
        if trial % 10 == 0 {
            let err = bias_gradient_fd_check(&omega, &theta, SUITE_ALPHA_HAT, SUITE_K_HAT, pair)?;
            max_fd_err = max_fd_err.max(err);
        }
    }
    report.metric("locked_pairs", locked_pairs);
    report.metric("sign_correct", sign_correct);
    report.metric("gradient_localized", localized);
    report.metric("max_fd_rel_err", max_fd_err);
    report.check("all_pairs_locked", locked_pairs == trials);
    report.check("sign_correct_100_of_100", sign_correct == trials);
    report.check("gradient_localized_everywhere", localized == trials);
    report.check("fd_rel_err_below_1e-4", max_fd_err < 1e-4);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_instance() -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = SeededRng::new(5);
        let omega: Tensor<f64> = rng.gaussian_matrix(&[5, 3], 0.0, 0.15);
        let theta: Tensor<f64> = rng.gaussian_matrix(&[5, 3], 0.0, 0.3);
        (omega, theta)
    }

    #[test]
    fn attraction_shrinks_mismatch_repulsion_grows_it() {
        let (omega, theta) = small_instance();
        let check =
            positional_bias_check(&omega, &theta, SUITE_ALPHA_HAT, SUITE_K_HAT, (0, 3), 1e-3).unwrap();
        assert!(check.locked, "instance must be in the broad-locking regime");
        assert!(check.attract_decreases(), "{check:?}");
        assert!(check.repel_increases(), "{check:?}");
    }

    #[test]
    fn gradient_touches_only_the_pair() {
        let (omega, theta) = small_instance();
        let check =
            positional_bias_check(&omega, &theta, SUITE_ALPHA_HAT, SUITE_K_HAT, (1, 4), 1e-3).unwrap();
        assert!(check.gradient_localized);
    }

    #[test]
    fn unlocked_pair_reports_zero_gradient() {
        // far-apart scalar frequencies with weak coupling: pair (0,1) unlocked
        let omega = Tensor::from_vec(&[3, 1], vec![0.0, 50.0, 100.0]).unwrap();
        let theta = Tensor::zeros(&[3, 1]);
        // k_hat chosen so softplus(k_hat) = 1
        let check = positional_bias_check(&omega, &theta, SUITE_ALPHA_HAT, 0.5413248546129181, (0, 1), 1e-3)
            .unwrap();
        assert!(!check.locked);
        assert_eq!(check.mismatch_before, check.mismatch_after_attract);
    }

    #[test]
    fn analytic_gradient_survives_fd_through_r_and_j() {
        let (omega, theta) = small_instance();
        let err = bias_gradient_fd_check(&omega, &theta, SUITE_ALPHA_HAT, SUITE_K_HAT, (2, 4)).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
