//! Footstep MPC over `N_s` steps of the ALIP step-to-step dynamics.
//!
//! The states are condensed out, leaving a dense QP in the footholds plus
//! nonnegative slacks on the kinematic reachability constraints.

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use thiserror::Error;

use crate::alip::{
    self, foot_yaw_command, input_matrix, predict_preimpact, reference_states, transition_matrix,
    AlipError, AlipParams, AlipState, GaitCommand, StanceSign,
};
use crate::qp::{self, KktResiduals, QpError, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid MPC config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Alip(#[from] AlipError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("QP solver failed with status {status:?} (residuals {kkt:?})")]
    SolverFailure { status: QpStatus, kkt: KktResiduals },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Weight on intermediate step transitions.
    pub q: Matrix4<f64>,
    /// Weight on the final transition.
    pub q_terminal: Matrix4<f64>,
    /// Per-axis half-widths of the CoM-to-foot box (m).
    pub kin_box: Vector2<f64>,
    pub mu_friction: f64,
    /// Largest `|u_x|` and lateral `|u_y|` (m).
    pub u_bounds: Vector2<f64>,
    /// Smallest lateral foothold offset away from the stance foot (m).
    pub min_step_width: f64,
    /// Quadratic penalty on kinematic slacks.
    pub slack_penalty: f64,
    /// Linear penalty on kinematic slacks; large enough that slacks stay zero
    /// whenever the hard problem is feasible.
    pub slack_linear: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl MpcConfig {
    /// Defaults scaled to the robot: momentum errors are weighted in velocity
    /// units.
    pub fn for_params(params: &AlipParams) -> Self {
        let w = 1.0 / params.mass_height().powi(2);
        let q = Matrix4::from_diagonal(&Vector4::new(0.0, 0.0, w, w));
        Self {
            horizon: 3,
            q,
            q_terminal: q * 10.0,
            kin_box: Vector2::new(0.45, 0.45),
            mu_friction: 1.0,
            u_bounds: Vector2::new(0.6, 0.6),
            min_step_width: 0.05,
            slack_penalty: 1e3,
            slack_linear: 1e3,
            tol: 1e-8,
            max_iter: 4000,
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::InvalidConfig(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        for (name, m) in [("q", &self.q), ("q_terminal", &self.q_terminal)] {
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return bad(&format!("{name} must be symmetric"));
            }
            let eig = m.symmetric_eigenvalues();
            if eig.iter().any(|v| *v < -1e-12 * (1.0 + m.amax())) {
                return bad(&format!("{name} must be positive semidefinite"));
            }
        }
        if !(self.kin_box.min() > 0.0 && self.u_bounds.min() > 0.0) {
            return bad("kin_box and u_bounds must be positive");
        }
        if !(self.mu_friction > 0.0) {
            return bad("mu_friction must be positive");
        }
        if !(self.min_step_width >= 0.0 && self.min_step_width < self.u_bounds[1]) {
            return bad("min_step_width must lie in [0, u_bounds.y)");
        }
        if !(self.slack_penalty > 0.0 && self.slack_linear >= 0.0) {
            return bad("slack penalties must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        Ok(())
    }

    pub fn qp_settings(&self) -> QpSettings {
        QpSettings { tol: self.tol, max_iter: self.max_iter }
    }

    fn slack_count(&self) -> usize {
        4 * self.horizon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootstepPlan {
    /// Footholds relative to each prior stance point, in the desired-yaw frame.
    pub u_seq: Vec<Vector2<f64>>,
    pub gamma0: f64,
    /// Pre-impact states at the end of each planned step.
    pub predicted_states: Vec<AlipState>,
    pub objective: f64,
    pub slack_norm: f64,
    pub iterations: usize,
}

/// Condensed QP along with the constant part of the cost.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub problem: QpProblem,
    pub constant: f64,
    free: Vec<Vector4<f64>>,
    gains: Vec<DMatrix<f64>>,
}

impl CondensedQp {
    /// Pre-impact states `x_1..x_N` for a decision vector.
    pub fn states(&self, z: &DVector<f64>) -> Vec<AlipState> {
        let u = z.rows(0, self.gains[0].ncols()).into_owned();
        (1..self.free.len())
            .map(|i| AlipState::from_vector(&(self.free[i] + fixed4(&(&self.gains[i] * &u)))))
            .collect()
    }
}

fn fixed4(v: &DVector<f64>) -> Vector4<f64> {
    Vector4::new(v[0], v[1], v[2], v[3])
}

/// Stance sign during planned step `i` (foothold `u_i` ends that step).
fn stance_at(sigma: StanceSign, i: usize) -> f64 {
    if i % 2 == 0 {
        sigma.value()
    } else {
        -sigma.value()
    }
}

pub fn build_qp(
    x0: &AlipState,
    refs: &[AlipState],
    cfg: &MpcConfig,
    sigma: StanceSign,
    params: &AlipParams,
) -> Result<CondensedQp, MpcError> {
    let n_steps = cfg.horizon;
    if refs.len() != n_steps {
        return Err(MpcError::DimensionMismatch(format!(
            "{} references for a horizon of {n_steps}",
            refs.len()
        )));
    }
    if !x0.is_finite() {
        return Err(MpcError::DimensionMismatch("initial state is not finite".into()));
    }
    let nu = 2 * n_steps;
    let ns = cfg.slack_count();
    let n = nu + ns;

    let phi = transition_matrix(params, params.step_duration());
    let phi_b = phi * input_matrix();
    let mut free = vec![x0.to_vector()];
    let mut gains = vec![DMatrix::<f64>::zeros(4, nu)];
    for i in 0..n_steps {
        let c = phi * free[i];
        let mut g = DMatrix::from_fn(4, 4, |r, k| phi[(r, k)]) * &gains[i];
        for r in 0..4 {
            g[(r, 2 * i)] += phi_b[(r, 0)];
            g[(r, 2 * i + 1)] += phi_b[(r, 1)];
        }
        free.push(c);
        gains.push(g);
    }

    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut f = DVector::<f64>::zeros(n);
    let mut constant = 0.0;
    for i in 1..=n_steps {
        let w = if i == n_steps { &cfg.q_terminal } else { &cfg.q };
        let wd = DMatrix::from_fn(4, 4, |r, k| w[(r, k)]);
        let err = free[i] - refs[i - 1].to_vector();
        let errd = DVector::from_column_slice(err.as_slice());
        let gw = gains[i].transpose() * &wd;
        let hu = &gw * &gains[i] * 2.0;
        let fu = &gw * &errd * 2.0;
        let mut hv = h.view_mut((0, 0), (nu, nu));
        hv += &hu;
        let mut fv = f.rows_mut(0, nu);
        fv += &fu;
        constant += err.dot(&(w * err));
    }
    for k in nu..n {
        h[(k, k)] = 2.0 * cfg.slack_penalty;
        f[k] = cfg.slack_linear;
    }
    // Symmetrize away rounding so the QP validation sees an exact mirror.
    let h = (&h + h.transpose()) * 0.5;

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let post_slack = |i: usize, axis: usize| nu + 2 * i + axis;
    let pre_slack = |i: usize, axis: usize| nu + 2 * n_steps + 2 * (i - 1) + axis;

    for i in 0..n_steps {
        for axis in 0..2 {
            // CoM relative to the new foothold right after impact i.
            let mut a = DVector::zeros(n);
            for k in 0..nu {
                a[k] = gains[i][(axis, k)];
            }
            a[2 * i + axis] -= 1.0;
            let c = free[i][axis];
            let s = post_slack(i, axis);
            push_box(&mut rows, &a, c, cfg.kin_box[axis], s);
        }
    }
    for i in 1..=n_steps {
        for axis in 0..2 {
            // CoM relative to the stance foot at the end of step i.
            let mut a = DVector::zeros(n);
            for k in 0..nu {
                a[k] = gains[i][(axis, k)];
            }
            push_box(&mut rows, &a, free[i][axis], cfg.kin_box[axis], pre_slack(i, axis));
        }
    }
    for k in nu..n {
        let mut a = DVector::zeros(n);
        a[k] = -1.0;
        rows.push((a, 0.0));
    }
    let friction = cfg.mu_friction * params.com_height();
    for i in 0..n_steps {
        let sig = stance_at(sigma, i);
        let ux = 2 * i;
        let uy = 2 * i + 1;
        let mut unit = |k: usize, coeff: f64, bound: f64| {
            let mut a = DVector::zeros(n);
            a[k] = coeff;
            rows.push((a, bound));
        };
        unit(ux, 1.0, cfg.u_bounds[0]);
        unit(ux, -1.0, cfg.u_bounds[0]);
        // Swing foot lands on the side opposite the stance foot.
        unit(uy, sig, -cfg.min_step_width);
        unit(uy, -sig, cfg.u_bounds[1]);
        unit(ux, 1.0, friction);
        unit(ux, -1.0, friction);
        unit(uy, 1.0, friction);
        unit(uy, -1.0, friction);
    }

    let m = rows.len();
    let mut a_in = DMatrix::zeros(m, n);
    let mut b_in = DVector::zeros(m);
    for (r, (a, b)) in rows.into_iter().enumerate() {
        a_in.set_row(r, &a.transpose());
        b_in[r] = b;
    }
    let problem = QpProblem::inequality(h, f, a_in, b_in)?;
    Ok(CondensedQp { problem, constant, free, gains })
}

/// `|c + a'z| <= bound + s` as two rows in `A z <= b` form.
fn push_box(rows: &mut Vec<(DVector<f64>, f64)>, a: &DVector<f64>, c: f64, bound: f64, slack: usize) {
    let mut plus = a.clone();
    plus[slack] = -1.0;
    rows.push((plus, bound - c));
    let mut minus = -a;
    minus[slack] = -1.0;
    rows.push((minus, bound + c));
}

/// Solves the MPC from the current measurement and returns the plan.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    x_cm: &AlipState,
    remaining: f64,
    gait: &GaitCommand,
    sigma: StanceSign,
    torso_yaw: f64,
    foot_yaw: f64,
    cfg: &MpcConfig,
    params: &AlipParams,
) -> Result<FootstepPlan, MpcError> {
    let x0 = predict_preimpact(x_cm, remaining, torso_yaw, params)?;
    let refs = reference_states(params, gait, sigma, cfg.horizon)?;
    let condensed = build_qp(&x0, &refs, cfg, sigma, params)?;
    let sol = qp::solve(&condensed.problem, &cfg.qp_settings());
    if sol.status != QpStatus::Optimal {
        return Err(MpcError::SolverFailure { status: sol.status, kkt: sol.kkt });
    }
    let nu = 2 * cfg.horizon;
    let u_seq = (0..cfg.horizon).map(|i| Vector2::new(sol.z[2 * i], sol.z[2 * i + 1])).collect();
    let slack_norm = sol.z.rows(nu, cfg.slack_count()).iter().map(|s| s.max(0.0).powi(2)).sum::<f64>().sqrt();
    Ok(FootstepPlan {
        u_seq,
        gamma0: foot_yaw_command(gait.yaw_rate_des(), params.step_duration(), foot_yaw),
        predicted_states: condensed.states(&sol.z),
        objective: condensed.problem.objective(&sol.z) + condensed.constant,
        slack_norm,
        iterations: sol.iterations,
    })
}

/// Replanning instants within one step at planning rate `f_plan`.
pub fn replan_schedule(f_plan: f64, step_duration: f64) -> Vec<f64> {
    let count = ((f_plan * step_duration - 1e-9).ceil() as usize).max(1);
    (0..count).map(|i| i as f64 / f_plan).collect()
}

/// Foothold of the nominal orbit for the current stance, in the desired-yaw
/// frame. Used as the base action when the MPC is disabled.
pub fn nominal_foothold(
    gait: &GaitCommand,
    sigma: StanceSign,
    params: &AlipParams,
) -> Result<Vector2<f64>, MpcError> {
    Ok(alip::periodic_orbit(params, gait, sigma)?.foothold)
}
