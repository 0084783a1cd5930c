//! Numerical Kuramoto integrators: the independent ground truth for the
//! closed-form synchronization operator.
//!
//! Two systems are covered. The pairwise mean-field reduction
//!
//! ```text
//! dφ/dt = Δω − κ·sin(φ),     κ = K·r·J
//! ```
//!
//! whose stable fixed point `sin(φ*) = Δω/κ`, `cos(φ*) = +sqrt(1-(Δω/κ)²)`
//! is exactly what the closed form evaluates, and the full N-oscillator
//! system with heterogeneous coupling
//!
//! ```text
//! dθ_i/dt = ω_i + Σ_j J_ij·sin(θ_j − θ_i)
//! ```
//!
//! Both use fixed-step classic fourth-order Runge–Kutta: deterministic,
//! portable, and accurate far beyond what the comparisons need.

use crate::engine::Tensor;
use crate::{Error, Result, Scalar};

/// Default integrator step.
pub const DEFAULT_DT: f64 = 0.01;
/// Default integration horizon.
pub const DEFAULT_T_END: f64 = 200.0;
/// A pair whose unwrapped relative phase exceeds this is classified as
/// drifting (unlocked).
pub const LOCK_DETECTION_BOUND: f64 = 4.0 * std::f64::consts::PI;

/// Two-oscillator mean-field system in relative-phase form.
#[derive(Debug, Clone, Copy)]
pub struct PairSystem<T> {
    /// Frequency mismatch Δω (rad/s).
    pub delta_omega: T,
    /// Effective coupling κ = K·r·J (rad/s), non-negative.
    pub kappa: T,
    /// Initial relative phase (rad).
    pub phi0: T,
}

/// Trajectory of the relative phase. The phase is never wrapped, so drift
/// shows up as unbounded growth.
#[derive(Debug, Clone)]
pub struct PairTrajectory<T> {
    pub t: Vec<T>,
    pub phi: Vec<T>,
}

impl<T: Scalar> PairTrajectory<T> {
    pub fn final_phi(&self) -> T {
        *self.phi.last().expect("trajectory never empty")
    }

    /// Whether the unwrapped phase stayed within the lock-detection bound.
    pub fn locked(&self) -> bool {
        let bound = T::from_f64_lossy(LOCK_DETECTION_BOUND);
        self.phi.iter().all(|&p| p.abs() <= bound)
    }

    /// CSV dump: `t,phi,cos_phi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,phi,cos_phi\n");
        for (&t, &p) in self.t.iter().zip(&self.phi) {
            out.push_str(&format!(
                "{},{},{}\n",
                t.to_f64_lossy(),
                p.to_f64_lossy(),
                p.cos().to_f64_lossy()
            ));
        }
        out
    }
}

/// Full N-oscillator system with an explicit coupling matrix.
#[derive(Debug, Clone)]
pub struct FullSystem<T: Scalar> {
    /// Natural frequencies, length N.
    pub omega: Vec<T>,
    /// Symmetric non-negative coupling matrix `[N, N]`; any global K/N
    /// scaling is expected to be baked in by the caller.
    pub coupling: Tensor<T>,
    /// Initial phases, length N.
    pub theta0: Vec<T>,
}

/// Result of integrating a [`FullSystem`].
#[derive(Debug, Clone)]
pub struct FullTrajectory<T> {
    /// Sample times.
    pub t: Vec<T>,
    /// Order parameter r at each sample time.
    pub r: Vec<T>,
    /// Final phases (unwrapped).
    pub theta_end: Vec<T>,
}

impl<T: Scalar> FullTrajectory<T> {
    /// CSV dump: `t,r`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,r\n");
        for (&t, &r) in self.t.iter().zip(&self.r) {
            out.push_str(&format!("{},{}\n", t.to_f64_lossy(), r.to_f64_lossy()));
        }
        out
    }
}

/// Closed-form vs ODE comparison for one pair.
#[derive(Debug, Clone, Copy)]
pub struct SteadyStateComparison<T> {
    /// `sqrt(1 - (Δω/κ)²)` when locked.
    pub closed_form_coherence: Option<T>,
    /// `cos(φ(t_end))` from the integrator.
    pub ode_coherence: T,
    /// Absolute difference when both sides exist.
    pub abs_diff: Option<T>,
    /// Whether the trajectory stayed bounded (phase-locked).
    pub locked: bool,
}

fn pair_rhs<T: Scalar>(sys: &PairSystem<T>, phi: T) -> T {
    sys.delta_omega - sys.kappa * phi.sin()
}

/// Classic RK4 on the pairwise mean-field equation.
pub fn integrate_pair<T: Scalar>(sys: &PairSystem<T>, dt: T, t_end: T) -> Result<PairTrajectory<T>> {
    if dt <= T::zero() || t_end <= T::zero() {
        return Err(Error::Config("integration needs dt > 0 and t_end > 0".into()));
    }
    let steps = (t_end.to_f64_lossy() / dt.to_f64_lossy()).round() as usize;
    let half = T::from_f64_lossy(0.5);
    let sixth = T::from_f64_lossy(1.0 / 6.0);
    let two = T::one() + T::one();

    let mut phi = sys.phi0;
    let mut t = T::zero();
    let mut traj = PairTrajectory {
        t: Vec::with_capacity(steps + 1),
        phi: Vec::with_capacity(steps + 1),
    };
    traj.t.push(t);
    traj.phi.push(phi);
    for _ in 0..steps {
        let k1 = pair_rhs(sys, phi);
        let k2 = pair_rhs(sys, phi + half * dt * k1);
        let k3 = pair_rhs(sys, phi + half * dt * k2);
        let k4 = pair_rhs(sys, phi + dt * k3);
        phi = phi + dt * sixth * (k1 + two * k2 + two * k3 + k4);
        t = t + dt;
        if !phi.is_finite() {
            return Err(Error::Integration { t: t.to_f64_lossy() });
        }
        traj.t.push(t);
        traj.phi.push(phi);
    }
    Ok(traj)
}

fn full_rhs<T: Scalar>(sys: &FullSystem<T>, theta: &[T], out: &mut [T]) {
    let n = theta.len();
    let j = sys.coupling.data();
    for i in 0..n {
        let mut acc = sys.omega[i];
        for (jj, &tj) in theta.iter().enumerate() {
            if jj != i {
                acc += j[i * n + jj] * (tj - theta[i]).sin();
            }
        }
        out[i] = acc;
    }
}

fn order_param_scalar<T: Scalar>(theta: &[T]) -> T {
    let n = T::from_f64_lossy(theta.len() as f64);
    let mut c = T::zero();
    let mut s = T::zero();
    for &t in theta {
        c += t.cos();
        s += t.sin();
    }
    c = c / n;
    s = s / n;
    (c * c + s * s).sqrt()
}

/// Classic RK4 on the full system, tracking r at every step.
pub fn integrate_full<T: Scalar>(sys: &FullSystem<T>, dt: T, t_end: T) -> Result<FullTrajectory<T>> {
    if dt <= T::zero() || t_end <= T::zero() {
        return Err(Error::Config("integration needs dt > 0 and t_end > 0".into()));
    }
    let n = sys.omega.len();
    if sys.theta0.len() != n || sys.coupling.shape() != [n, n] {
        return Err(Error::DimMismatch {
            op: "integrate_full",
            left: vec![n],
            right: sys.coupling.shape().to_vec(),
        });
    }
    let steps = (t_end.to_f64_lossy() / dt.to_f64_lossy()).round() as usize;
    let half = T::from_f64_lossy(0.5);
    let sixth = T::from_f64_lossy(1.0 / 6.0);
    let two = T::one() + T::one();

    let mut theta = sys.theta0.clone();
    let mut t = T::zero();
    let mut traj = FullTrajectory {
        t: vec![t],
        r: vec![order_param_scalar(&theta)],
        theta_end: Vec::new(),
    };
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut stage = vec![T::zero(); n];
    for _ in 0..steps {
        full_rhs(sys, &theta, &mut k1);
        for i in 0..n {
            stage[i] = theta[i] + half * dt * k1[i];
        }
        full_rhs(sys, &stage, &mut k2);
        for i in 0..n {
            stage[i] = theta[i] + half * dt * k2[i];
        }
        full_rhs(sys, &stage, &mut k3);
        for i in 0..n {
            stage[i] = theta[i] + dt * k3[i];
        }
        full_rhs(sys, &stage, &mut k4);
        for i in 0..n {
            theta[i] = theta[i] + dt * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            if !theta[i].is_finite() {
                return Err(Error::Integration {
                    t: t.to_f64_lossy() + dt.to_f64_lossy(),
                });
            }
        }
        t = t + dt;
        traj.t.push(t);
        traj.r.push(order_param_scalar(&theta));
    }
    traj.theta_end = theta;
    Ok(traj)
}

/// Integrate one pair from rest and compare the ODE coherence against the
/// closed form `sqrt(1-(Δω/κ)²)`.
pub fn steady_state_compare<T: Scalar>(
    delta_omega: T,
    kappa: T,
    dt: T,
    t_end: T,
) -> Result<SteadyStateComparison<T>> {
    if kappa <= T::zero() {
        return Err(Error::Config("steady-state comparison needs κ > 0".into()));
    }
    let sys = PairSystem {
        delta_omega,
        kappa,
        phi0: T::zero(),
    };
    let traj = integrate_pair(&sys, dt, t_end)?;
    let locked = traj.locked();
    let ode_coherence = traj.final_phi().cos();
    let ratio = delta_omega / kappa;
    let closed_form_coherence = if ratio.abs() <= T::one() {
        Some((T::one() - ratio * ratio).sqrt())
    } else {
        None
    };
    let abs_diff = closed_form_coherence.map(|c| (c - ode_coherence).abs());
    Ok(SteadyStateComparison {
        closed_form_coherence,
        ode_coherence,
        abs_diff,
        locked,
    })
}
