//! Mismatched reduced-order simulator standing in for a full-order robot.
//!
//! The flow is the ALIP model plus perturbations from a distal swing-leg
//! mass, CoM height ripple, terrain pitch and external pushes. Each substep
//! uses exponential Euler: the ALIP part is propagated exactly and the
//! perturbation is held constant over the substep.

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use std::f64::consts::PI;

use crate::alip::{transition_matrix, AlipParams, AlipState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyParams {
    /// Fraction of the robot mass carried by the swing foot.
    pub distal_mass_frac: f64,
    /// Fraction of angular momentum lost at each foot switch.
    pub impact_loss: f64,
    /// Amplitude of the CoM height oscillation over a step (m).
    pub zc_ripple_amp: f64,
    pub obs_noise_std: f64,
    /// Terrain pitch (rad), positive uphill along world x.
    pub slope: f64,
    pub sim_dt: f64,
}

impl ProxyParams {
    /// No mismatch: the proxy reduces to the ALIP flow.
    pub fn exact(sim_dt: f64) -> Self {
        Self {
            distal_mass_frac: 0.0,
            impact_loss: 0.0,
            zc_ripple_amp: 0.0,
            obs_noise_std: 0.0,
            slope: 0.0,
            sim_dt,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..0.5).contains(&self.distal_mass_frac) {
            return Err(format!("distal_mass_frac must lie in [0, 0.5), got {}", self.distal_mass_frac));
        }
        if !(0.0..1.0).contains(&self.impact_loss) {
            return Err(format!("impact_loss must lie in [0, 1), got {}", self.impact_loss));
        }
        if !(self.zc_ripple_amp >= 0.0 && self.obs_noise_std >= 0.0) {
            return Err("zc_ripple_amp and obs_noise_std must be >= 0".into());
        }
        if !(self.slope.abs() < PI / 4.0) {
            return Err(format!("slope must satisfy |slope| < pi/4, got {}", self.slope));
        }
        if !(self.sim_dt > 0.0 && self.sim_dt.is_finite()) {
            return Err(format!("sim_dt must be > 0, got {}", self.sim_dt));
        }
        Ok(())
    }

    pub fn is_exact(&self) -> bool {
        self.distal_mass_frac == 0.0 && self.zc_ripple_amp == 0.0 && self.slope == 0.0
    }
}

impl Default for ProxyParams {
    fn default() -> Self {
        Self {
            distal_mass_frac: 0.15,
            impact_loss: 0.05,
            zc_ripple_amp: 0.01,
            obs_noise_std: 0.0,
            slope: 0.0,
            sim_dt: 0.005,
        }
    }
}

/// Inputs held constant over one substep.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProxyInputs {
    /// Swing foot position relative to the stance contact (m).
    pub swing_pos: Vector2<f64>,
    /// Swing foot acceleration (m/s^2).
    pub swing_accel: Vector2<f64>,
    /// Time since the last foot switch (s).
    pub t_step: f64,
    /// External horizontal force at the CoM (N).
    pub force: Vector2<f64>,
}

pub fn com_height(params: &AlipParams, proxy: &ProxyParams, t_step: f64) -> f64 {
    params.com_height() + proxy.zc_ripple_amp * (2.0 * PI * t_step / params.step_duration()).sin()
}

/// `int_0^dt Phi(s) ds` in closed form.
pub fn transition_integral(params: &AlipParams, dt: f64) -> Matrix4<f64> {
    let lam = params.omega();
    let mhl = params.mass_height() * lam;
    let c = (lam * dt).sinh() / lam;
    let s = ((lam * dt).cosh() - 1.0) / lam;
    #[rustfmt::skip]
    let g = Matrix4::new(
        c, 0.0, 0.0, s / mhl,
        0.0, c, -s / mhl, 0.0,
        0.0, -mhl * s, c, 0.0,
        mhl * s, 0.0, 0.0, c,
    );
    g
}

/// Difference between the proxy vector field and the ALIP field at `x`.
pub fn perturbation(
    x: &AlipState,
    inputs: &ProxyInputs,
    params: &AlipParams,
    proxy: &ProxyParams,
) -> Vector4<f64> {
    let m = params.mass();
    let g = params.gravity();
    let zh = params.com_height();
    let zc = com_height(params, proxy, inputs.t_step);
    let eps = proxy.distal_mass_frac;
    let (sin_t, cos_t) = proxy.slope.sin_cos();

    let inv = 1.0 / (m * zc) - 1.0 / (m * zh);
    let dx = x.ly * inv;
    let dy = -x.lx * inv;
    let lever_x = cos_t * ((1.0 - eps) * x.x + eps * inputs.swing_pos[0]) - sin_t * zc;
    let dly = m * g * (lever_x - x.x) - eps * m * zh * inputs.swing_accel[0] + zh * inputs.force[0];
    let lever_y = (1.0 - eps) * x.y + eps * inputs.swing_pos[1];
    let dlx = -m * g * (lever_y - x.y) + eps * m * zh * inputs.swing_accel[1] - zh * inputs.force[1];
    Vector4::new(dx, dy, dlx, dly)
}

/// Advances the proxy by `dt` with inputs held constant.
pub fn proxy_dynamics(
    x: &AlipState,
    inputs: &ProxyInputs,
    dt: f64,
    params: &AlipParams,
    proxy: &ProxyParams,
) -> AlipState {
    let phi = transition_matrix(params, dt);
    let next = phi * x.to_vector();
    let d = perturbation(x, inputs, params, proxy);
    if d == Vector4::zeros() {
        return AlipState::from_vector(&next);
    }
    AlipState::from_vector(&(next + transition_integral(params, dt) * d))
}

/// Impact map: CoM re-expressed about the new contact and momentum reduced.
pub fn impact(x_pre: &AlipState, foothold: &Vector2<f64>, proxy: &ProxyParams) -> AlipState {
    let keep = 1.0 - proxy.impact_loss;
    AlipState::new(x_pre.x - foothold[0], x_pre.y - foothold[1], keep * x_pre.lx, keep * x_pre.ly)
}

/// Cubic Hermite segment over `(x, y, yaw)` ending at rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingTrajectory {
    pub t0: f64,
    pub t1: f64,
    pub p0: Vector3<f64>,
    pub v0: Vector3<f64>,
    pub p1: Vector3<f64>,
}

impl SwingTrajectory {
    pub fn new(t0: f64, t1: f64, p0: Vector3<f64>, v0: Vector3<f64>, p1: Vector3<f64>) -> Self {
        Self { t0, t1, p0, v0, p1 }
    }

    /// Restarts from the current position and velocity toward a new target.
    pub fn retarget(&self, t: f64, target: Vector3<f64>) -> Self {
        let (p, v, _) = self.sample(t);
        Self::new(t, self.t1, p, v, target)
    }

    /// Position, velocity and acceleration at `t`.
    pub fn sample(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let span = self.t1 - self.t0;
        if span <= 1e-12 || t >= self.t1 {
            return (self.p1, Vector3::zeros(), Vector3::zeros());
        }
        let tau = ((t - self.t0) / span).clamp(0.0, 1.0);
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let m0 = self.v0 * span;
        let p = self.p0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * (t3 - 2.0 * t2 + tau)
            + self.p1 * (-2.0 * t3 + 3.0 * t2);
        let dp = (self.p0 * (6.0 * t2 - 6.0 * tau) + m0 * (3.0 * t2 - 4.0 * tau + 1.0) + self.p1 * (6.0 * tau - 6.0 * t2))
            / span;
        let ddp = (self.p0 * (12.0 * tau - 6.0) + m0 * (6.0 * tau - 4.0) + self.p1 * (6.0 - 12.0 * tau)) / (span * span);
        (p, dp, ddp)
    }
}
