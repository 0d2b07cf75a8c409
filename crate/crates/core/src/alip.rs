//! Angular-momentum linear inverted pendulum (ALIP) model.
//!
//! State ordering is `(x_c, y_c, L_x, L_y)`: CoM position relative to the
//! stance contact and angular momentum about the contact point. The two
//! planar subsystems `(x_c, L_y)` and `(y_c, L_x)` are decoupled.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix4, Matrix4x2, SMatrix, SVector, Vector2, Vector4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlipError {
    #[error("invalid ALIP parameter: {0}")]
    InvalidParams(String),
    #[error("no period-2 orbit exists for step duration {step_duration} s")]
    NoOrbit { step_duration: f64 },
    #[error("gait command inconsistent: gamma_des {gamma_des} != yaw_rate_des * T_s = {expected}")]
    InconsistentCommand { gamma_des: f64, expected: f64 },
    #[error("remaining step time {remaining} s outside [0, {step_duration}]")]
    RemainingTime { remaining: f64, step_duration: f64 },
}

/// Physical and timing parameters of the reduced model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlipParams {
    mass: f64,
    gravity: f64,
    com_height: f64,
    step_duration: f64,
    sample_time: f64,
    samples_per_step: usize,
    step_width: f64,
}

impl AlipParams {
    pub fn new(
        mass: f64,
        gravity: f64,
        com_height: f64,
        step_duration: f64,
        sample_time: f64,
        step_width: f64,
    ) -> Result<Self, AlipError> {
        let positive = [
            ("mass", mass),
            ("gravity", gravity),
            ("com_height", com_height),
            ("step_duration", step_duration),
            ("sample_time", sample_time),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(AlipError::InvalidParams(format!("{name} must be > 0, got {value}")));
            }
        }
        if !(step_width.is_finite() && step_width >= 0.0) {
            return Err(AlipError::InvalidParams(format!(
                "step_width must be >= 0, got {step_width}"
            )));
        }
        let ratio = step_duration / sample_time;
        let samples = ratio.round();
        if samples < 1.0 || (ratio - samples).abs() > 1e-9 * ratio.max(1.0) {
            return Err(AlipError::InvalidParams(format!(
                "step_duration / sample_time must be an integer, got {ratio}"
            )));
        }
        Ok(Self {
            mass,
            gravity,
            com_height,
            step_duration,
            sample_time,
            samples_per_step: samples as usize,
            step_width,
        })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn com_height(&self) -> f64 {
        self.com_height
    }

    pub fn step_duration(&self) -> f64 {
        self.step_duration
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn samples_per_step(&self) -> usize {
        self.samples_per_step
    }

    pub fn step_width(&self) -> f64 {
        self.step_width
    }

    /// Natural frequency `sqrt(g / z_H)` of the pendulum.
    pub fn omega(&self) -> f64 {
        (self.gravity / self.com_height).sqrt()
    }

    /// `m * z_H`; dividing an angular momentum by this gives a velocity.
    pub fn mass_height(&self) -> f64 {
        self.mass * self.com_height
    }

    pub fn with_step_width(mut self, step_width: f64) -> Result<Self, AlipError> {
        self.step_width = step_width;
        Self::new(
            self.mass,
            self.gravity,
            self.com_height,
            self.step_duration,
            self.sample_time,
            step_width,
        )
    }

    pub fn with_step_duration(self, step_duration: f64, sample_time: f64) -> Result<Self, AlipError> {
        Self::new(
            self.mass,
            self.gravity,
            self.com_height,
            step_duration,
            sample_time,
            self.step_width,
        )
    }
}

impl Default for AlipParams {
    fn default() -> Self {
        Self::new(39.0, 9.81, 0.69, 0.25, 0.01, 0.25).expect("default ALIP parameters are valid")
    }
}

/// Reduced state `(x_c, y_c, L_x, L_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlipState {
    pub x: f64,
    pub y: f64,
    pub lx: f64,
    pub ly: f64,
}

impl AlipState {
    pub const ZERO: AlipState = AlipState { x: 0.0, y: 0.0, lx: 0.0, ly: 0.0 };

    pub fn new(x: f64, y: f64, lx: f64, ly: f64) -> Self {
        Self { x, y, lx, ly }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.lx, self.ly)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn momentum(&self) -> Vector2<f64> {
        Vector2::new(self.lx, self.ly)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.lx.is_finite() && self.ly.is_finite()
    }

    /// Rotates the position pair and the momentum pair by `yaw` about z.
    pub fn rotated(&self, yaw: f64) -> Self {
        let r = rotation(yaw);
        let p = r * self.position();
        let l = r * self.momentum();
        Self::new(p[0], p[1], l[0], l[1])
    }

    pub fn max_abs_diff(&self, other: &AlipState) -> f64 {
        (self.to_vector() - other.to_vector()).amax()
    }
}

/// Which foot is in stance; `+1` is the left foot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StanceSign {
    Left,
    Right,
}

impl StanceSign {
    pub fn from_value(value: f64) -> Self {
        if value >= 0.0 {
            StanceSign::Left
        } else {
            StanceSign::Right
        }
    }

    pub fn value(self) -> f64 {
        match self {
            StanceSign::Left => 1.0,
            StanceSign::Right => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            StanceSign::Left => StanceSign::Right,
            StanceSign::Right => StanceSign::Left,
        }
    }
}

/// Desired end-of-step targets: lateral momentum offset, sagittal momentum,
/// and per-step yaw derived from the torso yaw-rate command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaitCommand {
    lx_offset: f64,
    ly_des: f64,
    gamma_des: f64,
    yaw_rate_des: f64,
}

impl GaitCommand {
    pub fn new(lx_offset: f64, ly_des: f64, yaw_rate_des: f64, step_duration: f64) -> Self {
        Self { lx_offset, ly_des, gamma_des: yaw_rate_des * step_duration, yaw_rate_des }
    }

    /// Builds a command from both yaw quantities, rejecting inconsistent pairs.
    pub fn with_gamma(
        lx_offset: f64,
        ly_des: f64,
        gamma_des: f64,
        yaw_rate_des: f64,
        step_duration: f64,
    ) -> Result<Self, AlipError> {
        let expected = yaw_rate_des * step_duration;
        if (gamma_des - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
            return Err(AlipError::InconsistentCommand { gamma_des, expected });
        }
        Ok(Self { lx_offset, ly_des, gamma_des, yaw_rate_des })
    }

    /// Command from walking velocities in m/s; `vy` maps to `-L_x / (m z_H)`.
    pub fn from_velocity(params: &AlipParams, vx: f64, vy: f64, yaw_rate_des: f64) -> Self {
        let mh = params.mass_height();
        Self::new(-vy * mh, vx * mh, yaw_rate_des, params.step_duration())
    }

    pub fn lx_offset(&self) -> f64 {
        self.lx_offset
    }

    pub fn ly_des(&self) -> f64 {
        self.ly_des
    }

    pub fn gamma_des(&self) -> f64 {
        self.gamma_des
    }

    pub fn yaw_rate_des(&self) -> f64 {
        self.yaw_rate_des
    }

    pub fn beta(&self) -> [f64; 3] {
        [self.lx_offset, self.ly_des, self.gamma_des]
    }
}

/// Period-2 orbit of the step-to-step map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orbit {
    /// Signed lateral momentum at the end of a step with the requested stance.
    pub lx_main: f64,
    /// Pre-impact state at the end of a step with the requested stance.
    pub state: AlipState,
    /// Foothold taken at that impact, relative to the stance contact.
    pub foothold: Vector2<f64>,
    /// Pre-impact state at the end of the following (opposite-stance) step.
    pub partner_state: AlipState,
    pub partner_foothold: Vector2<f64>,
    pub closure_residual: f64,
}

pub fn rotation(yaw: f64) -> Matrix2<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

pub fn system_matrices(params: &AlipParams) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let m = params.mass();
    let inv_mh = 1.0 / params.mass_height();
    let mg = m * params.gravity();
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, 0.0, 0.0, inv_mh,
        0.0, 0.0, -inv_mh, 0.0,
        0.0, -mg, 0.0, 0.0,
        mg, 0.0, 0.0, 0.0,
    );
    (a, input_matrix())
}

pub fn input_matrix() -> Matrix4x2<f64> {
    #[rustfmt::skip]
    let b = Matrix4x2::new(
        -1.0, 0.0,
        0.0, -1.0,
        0.0, 0.0,
        0.0, 0.0,
    );
    b
}

/// `exp(A dt)` for an arbitrary 4x4 system matrix (Padé scaling and squaring).
pub fn discretize(a: &Matrix4<f64>, dt: f64) -> Matrix4<f64> {
    if dt == 0.0 {
        return Matrix4::identity();
    }
    (a * dt).exp()
}

/// Closed-form `exp(A dt)` for the ALIP system matrix.
pub fn transition_matrix(params: &AlipParams, dt: f64) -> Matrix4<f64> {
    let lam = params.omega();
    let mhl = params.mass_height() * lam;
    let c = (lam * dt).cosh();
    let s = (lam * dt).sinh();
    #[rustfmt::skip]
    let phi = Matrix4::new(
        c, 0.0, 0.0, s / mhl,
        0.0, c, -s / mhl, 0.0,
        0.0, -mhl * s, c, 0.0,
        mhl * s, 0.0, 0.0, c,
    );
    phi
}

/// One sample of the discrete dynamics; `foothold` is applied first when
/// the sample is a step transition.
pub fn step_map(x: &AlipState, foothold: Option<Vector2<f64>>, params: &AlipParams) -> AlipState {
    let phi = transition_matrix(params, params.sample_time());
    let mut v = x.to_vector();
    if let Some(u) = foothold {
        v += input_matrix() * u;
    }
    AlipState::from_vector(&(phi * v))
}

/// Full step: impact with `foothold` followed by `T_s` of stance.
pub fn step_to_step(x_pre: &AlipState, foothold: &Vector2<f64>, params: &AlipParams) -> AlipState {
    let phi = transition_matrix(params, params.step_duration());
    AlipState::from_vector(&(phi * (x_pre.to_vector() + input_matrix() * foothold)))
}

/// Solves the period-2 orbit whose first pre-impact state ends a step with
/// stance `sigma`.
pub fn periodic_orbit(
    params: &AlipParams,
    gait: &GaitCommand,
    sigma: StanceSign,
) -> Result<Orbit, AlipError> {
    let phi = transition_matrix(params, params.step_duration());
    let pb = phi * input_matrix();
    let lateral = sigma.value() * params.step_width();

    // Unknowns: x_a (4), x_b (4), u_x at a, u_x at b.
    let mut lhs = SMatrix::<f64, 10, 10>::zeros();
    let mut rhs = SVector::<f64, 10>::zeros();
    for r in 0..4 {
        for c in 0..4 {
            lhs[(r, c)] = phi[(r, c)];
            lhs[(4 + r, 4 + c)] = phi[(r, c)];
        }
        lhs[(r, 4 + r)] -= 1.0;
        lhs[(4 + r, r)] -= 1.0;
        lhs[(r, 8)] = pb[(r, 0)];
        lhs[(4 + r, 9)] = pb[(r, 0)];
        // Lateral footholds are -sigma*W at a and +sigma*W at b.
        rhs[r] = pb[(r, 1)] * lateral;
        rhs[4 + r] = -pb[(r, 1)] * lateral;
    }
    lhs[(8, 3)] = 1.0;
    rhs[8] = gait.ly_des();
    lhs[(9, 7)] = 1.0;
    rhs[9] = gait.ly_des();

    let no_orbit = AlipError::NoOrbit { step_duration: params.step_duration() };
    let lu = lhs.full_piv_lu();
    let scale = lhs.amax();
    let min_pivot = (0..10).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale) {
        return Err(no_orbit);
    }
    let sol = lu.solve(&rhs).ok_or(no_orbit.clone())?;

    let state = AlipState::new(sol[0], sol[1], sol[2], sol[3]);
    let partner_state = AlipState::new(sol[4], sol[5], sol[6], sol[7]);
    let foothold = Vector2::new(sol[8], -lateral);
    let partner_foothold = Vector2::new(sol[9], lateral);

    let b = step_to_step(&state, &foothold, params);
    let a = step_to_step(&b, &partner_foothold, params);
    let closure_residual = a.max_abs_diff(&state).max(b.max_abs_diff(&partner_state));
    if !closure_residual.is_finite() {
        return Err(no_orbit);
    }
    Ok(Orbit { lx_main: state.lx, state, foothold, partner_state, partner_foothold, closure_residual })
}

/// Desired pre-impact states at the next `horizon` step transitions, starting
/// from a step whose stance is `sigma_initial`.
pub fn reference_states(
    params: &AlipParams,
    gait: &GaitCommand,
    sigma_initial: StanceSign,
    horizon: usize,
) -> Result<Vec<AlipState>, AlipError> {
    let orbit = periodic_orbit(params, gait, sigma_initial)?;
    Ok((0..horizon)
        .map(|i| {
            // Entry i ends the step with stance sigma_initial * (-1)^(i+1).
            let mut r = if i % 2 == 0 { orbit.partner_state } else { orbit.state };
            r.lx += gait.lx_offset();
            r
        })
        .collect())
}

/// State just before the next impact, expressed in the frame of the desired
/// torso yaw.
pub fn predict_preimpact(
    x_cm: &AlipState,
    remaining: f64,
    torso_yaw_des: f64,
    params: &AlipParams,
) -> Result<AlipState, AlipError> {
    let ts = params.step_duration();
    if !(remaining >= -1e-12 && remaining <= ts + 1e-12) {
        return Err(AlipError::RemainingTime { remaining, step_duration: ts });
    }
    let local = x_cm.rotated(-torso_yaw_des);
    let phi = transition_matrix(params, remaining.clamp(0.0, ts));
    Ok(AlipState::from_vector(&(phi * local.to_vector())))
}

/// One-step-ahead foot yaw command, wrapped into `(-pi, pi]`.
pub fn foot_yaw_command(yaw_rate_des: f64, step_duration: f64, current_foot_yaw: f64) -> f64 {
    wrap_angle(current_foot_yaw + yaw_rate_des * step_duration)
}
