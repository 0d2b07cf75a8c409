//! Residual-MDP walking environment.
//!
//! Each transition covers one planning interval. The base policy proposes a
//! foothold and foot yaw, the residual action is added on top, and the proxy
//! simulator integrates until the next replanning instant or foot switch.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::alip::{
    foot_yaw_command, periodic_orbit, rotation, wrap_angle, AlipError, AlipParams, AlipState, GaitCommand,
    StanceSign,
};
use crate::mpc::{self, replan_schedule, MpcConfig, MpcError};
use crate::proxy::{self, com_height, ProxyInputs, ProxyParams, SwingTrajectory};
use crate::reward::{reward, termination, RewardConfig, RewardSample};

pub const OBS_DIM: usize = 23;
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Alip(#[from] AlipError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("environment stepped after termination; call reset first")]
    StaleEnv,
    #[error("a push is already active until t = {active_until} s")]
    OverlappingPush { active_until: f64 },
    #[error("push duration must be > 0, got {0}")]
    InvalidPush(f64),
    #[error("io error: {0}")]
    Io(String),
}

/// Source of the base action the residual is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasePolicy {
    Mpc,
    /// Open-loop footholds of the nominal periodic orbit.
    NominalOrbit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaitSampler {
    pub vx: (f64, f64),
    pub vy: (f64, f64),
    pub yaw_rate: (f64, f64),
}

impl GaitSampler {
    pub fn fixed(vx: f64, vy: f64, yaw_rate: f64) -> Self {
        Self { vx: (vx, vx), vy: (vy, vy), yaw_rate: (yaw_rate, yaw_rate) }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in [("vx", self.vx), ("vy", self.vy), ("yaw_rate", self.yaw_rate)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("sampler range {name} = [{lo}, {hi}] is invalid"));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, params: &AlipParams) -> GaitCommand {
        let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let vx = draw(self.vx);
        let vy = draw(self.vy);
        let yaw = draw(self.yaw_rate);
        GaitCommand::from_velocity(params, vx, vy, yaw)
    }
}

impl Default for GaitSampler {
    fn default() -> Self {
        Self { vx: (-0.925, 0.925), vy: (-0.2, 0.2), yaw_rate: (0.0, 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub params: AlipParams,
    pub proxy: ProxyParams,
    pub reward: RewardConfig,
    pub mpc: MpcConfig,
    pub base: BasePolicy,
    /// Planning and policy rate (Hz).
    pub f_plan: f64,
    /// Residual bounds `(u_x, u_y, gamma)`.
    pub action_scale: Vector3<f64>,
    pub sampler: GaitSampler,
    /// Footsteps per episode before truncation.
    pub max_steps: usize,
    /// Initial momentum perturbation as a fraction of `m z_H` (m/s).
    pub init_perturbation: f64,
    /// Bound on the swing-foot acceleration seen by the distal-mass coupling.
    pub swing_accel_limit: f64,
    /// Chance of a random push starting during each footstep while none is active.
    pub push_probability: f64,
    /// Random push choices as `(duration s, peak force in units of m g)`. The
    /// magnitude is drawn uniformly up to the peak, the heading uniformly.
    pub push_types: Vec<(f64, f64)>,
}

impl EnvConfig {
    pub fn new(params: AlipParams) -> Self {
        Self {
            params,
            proxy: ProxyParams::default(),
            reward: RewardConfig::for_params(&params),
            mpc: MpcConfig::for_params(&params),
            base: BasePolicy::Mpc,
            f_plan: 1.0 / params.step_duration(),
            action_scale: Vector3::new(0.15, 0.1, 0.2),
            sampler: GaitSampler::default(),
            max_steps: 40,
            init_perturbation: 0.05,
            swing_accel_limit: 60.0,
            push_probability: 0.0,
            push_types: vec![(0.0175, 0.9), (1.0, 0.09)],
        }
    }

    /// One transition per footstep.
    pub fn is_low_frequency(&self) -> bool {
        self.f_plan * self.params.step_duration() <= 1.0 + 1e-9
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        self.proxy.validate().or_else(bad)?;
        self.reward.validate(&self.params).or_else(bad)?;
        self.sampler.validate().or_else(bad)?;
        self.mpc.validate()?;
        if !(self.f_plan > 0.0 && self.f_plan.is_finite()) {
            return bad(format!("f_plan must be > 0, got {}", self.f_plan));
        }
        if self.proxy.sim_dt > 1.0 / self.f_plan + 1e-12 {
            return bad("sim_dt exceeds the planning interval".into());
        }
        if !(self.action_scale.min() > 0.0) {
            return bad("action_scale entries must be > 0".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if !(self.init_perturbation >= 0.0 && self.swing_accel_limit > 0.0) {
            return bad("init_perturbation must be >= 0 and swing_accel_limit > 0".into());
        }
        let types_ok = self.push_types.iter().all(|(d, f)| *d > 0.0 && *f >= 0.0);
        if !((0.0..=1.0).contains(&self.push_probability) && types_ok)
            || (self.push_probability > 0.0 && self.push_types.is_empty())
        {
            return bad("push randomization out of range".into());
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::new(AlipParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub sigma: f64,
    pub t_r: f64,
    /// `(x_c, y_c, z_c, L_x, L_y, L_z)` in the heading frame.
    pub alpha: [f64; 6],
    /// Torso Euler angles, swing-foot Euler angles, torso angular velocity.
    pub psi: [f64; 9],
    /// `(L_x_offset, L_y_des, gamma_des)`.
    pub beta: [f64; 3],
    pub prev_total_action: [f64; 3],
}

impl Observation {
    pub fn to_vec(&self) -> [f64; OBS_DIM] {
        let mut v = [0.0; OBS_DIM];
        v[0] = self.sigma;
        v[1] = self.t_r;
        v[2..8].copy_from_slice(&self.alpha);
        v[8..17].copy_from_slice(&self.psi);
        v[17..20].copy_from_slice(&self.beta);
        v[20..23].copy_from_slice(&self.prev_total_action);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Action {
    pub u_res: Vector2<f64>,
    pub gamma_res: f64,
}

impl Action {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self { u_res: Vector2::new(a[0], a[1]), gamma_res: a[2] }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.u_res[0], self.u_res[1], self.gamma_res)
    }

    pub fn clamped(&self, scale: &Vector3<f64>) -> Self {
        let c = |v: f64, s: f64| if v.is_nan() { 0.0 } else { v.clamp(-s, s) };
        Self {
            u_res: Vector2::new(c(self.u_res[0], scale[0]), c(self.u_res[1], scale[1])),
            gamma_res: c(self.gamma_res, scale[2]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    /// End-of-step momentum errors when this transition ended a footstep.
    pub ly_error: Option<f64>,
    pub lx_error: Option<f64>,
    pub slack_norm: f64,
    /// Push force applied during the transition (N, world frame).
    pub push: Vector2<f64>,
    /// Base action `(u_x, u_y, gamma)`; yaw relative to the stance foot.
    pub base_action: Vector3<f64>,
    pub total_action: Vector3<f64>,
    pub step_completed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs_next: Observation,
    pub reward: f64,
    pub terminated: bool,
    /// Episode hit the footstep limit without terminating.
    pub truncated: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Push {
    force: Vector2<f64>,
    start: f64,
    end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub sigma: f64,
    pub t_r: f64,
    pub alpha: [f64; 6],
    pub base: Vector2<f64>,
    pub residual: Vector2<f64>,
    pub gamma_total: f64,
    pub reward: f64,
    pub terminated: bool,
}

/// Per-transition trajectory record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub const HEADER: &'static str =
        "t,sigma,T_r,x_c,y_c,z_c,L_x,L_y,L_z,u_x_base,u_y_base,u_x_res,u_y_res,gamma_total,reward,terminated";

    pub fn to_csv(&self, meta: &[String]) -> String {
        let mut out = String::new();
        for m in meta {
            let _ = writeln!(out, "# {m}");
        }
        let _ = writeln!(out, "{}", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.sigma,
                r.t_r,
                r.alpha[0],
                r.alpha[1],
                r.alpha[2],
                r.alpha[3],
                r.alpha[4],
                r.alpha[5],
                r.base[0],
                r.base[1],
                r.residual[0],
                r.residual[1],
                r.gamma_total,
                r.reward,
                u8::from(r.terminated)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path, meta: &[String]) -> Result<(), EnvError> {
        std::fs::write(path, self.to_csv(meta)).map_err(|e| EnvError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct GaitEnv {
    cfg: EnvConfig,
    schedule: Vec<f64>,
    rng: ChaCha8Rng,
    gait: GaitCommand,
    /// Reduced state relative to the stance contact, world axes.
    x: AlipState,
    sigma: StanceSign,
    t: f64,
    t_step: f64,
    replan_index: usize,
    stance_yaw: f64,
    swing: SwingTrajectory,
    yaw_des: f64,
    tilt: Vector2<f64>,
    prev_tilt: Vector2<f64>,
    prev_total: Vector3<f64>,
    push: Option<Push>,
    terminated: bool,
    steps_taken: usize,
    log: Option<TrajectoryLog>,
}

impl GaitEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let schedule = replan_schedule(cfg.f_plan, cfg.params.step_duration());
        let ts = cfg.params.step_duration();
        Ok(Self {
            schedule,
            rng: ChaCha8Rng::seed_from_u64(0),
            gait: GaitCommand::default(),
            x: AlipState::ZERO,
            sigma: StanceSign::Left,
            t: 0.0,
            t_step: 0.0,
            replan_index: 0,
            stance_yaw: 0.0,
            swing: SwingTrajectory::new(0.0, ts, Vector3::zeros(), Vector3::zeros(), Vector3::zeros()),
            yaw_des: 0.0,
            tilt: Vector2::zeros(),
            prev_tilt: Vector2::zeros(),
            prev_total: Vector3::zeros(),
            push: None,
            terminated: true,
            steps_taken: 0,
            log: None,
            cfg,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn gait(&self) -> &GaitCommand {
        &self.gait
    }

    pub fn state(&self) -> &AlipState {
        &self.x
    }

    pub fn sigma(&self) -> StanceSign {
        self.sigma
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn remaining_time(&self) -> f64 {
        (self.cfg.params.step_duration() - self.t_step).max(0.0)
    }

    /// Unwrapped torso yaw (rad).
    pub fn torso_yaw(&self) -> f64 {
        let (p, _, _) = self.swing.sample(self.t_step);
        0.5 * (self.stance_yaw + p[2])
    }

    pub fn desired_yaw(&self) -> f64 {
        self.yaw_des
    }

    pub fn enable_log(&mut self) {
        self.log = Some(TrajectoryLog::default());
    }

    pub fn take_log(&mut self) -> Option<TrajectoryLog> {
        self.log.take()
    }

    /// Resets with a command drawn from the configured sampler.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.reset_inner(seed, None)
    }

    /// Resets with a fixed command; the seed still drives perturbations.
    pub fn reset_with_command(&mut self, seed: u64, gait: GaitCommand) -> Result<Observation, EnvError> {
        self.reset_inner(seed, Some(gait))
    }

    fn reset_inner(&mut self, seed: u64, gait: Option<GaitCommand>) -> Result<Observation, EnvError> {
        let p = self.cfg.params;
        let ts = p.step_duration();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = self.cfg.sampler.sample(&mut self.rng, &p);
        self.gait = gait.unwrap_or(sampled);
        self.sigma = if self.rng.random_bool(0.5) { StanceSign::Left } else { StanceSign::Right };

        // Post-impact state at the start of a step on the nominal orbit.
        let prev = periodic_orbit(&p, &self.gait, self.sigma.flipped())?;
        let mut start = prev.state;
        start.lx += self.gait.lx_offset();
        let mh = p.mass_height();
        let amp = self.cfg.init_perturbation * mh;
        if amp > 0.0 {
            start.lx += self.rng.random_range(-amp..=amp);
            start.ly += self.rng.random_range(-amp..=amp);
        }
        self.x = AlipState::new(start.x - prev.foothold[0], start.y - prev.foothold[1], start.lx, start.ly);

        let gamma = self.gait.gamma_des();
        self.t = 0.0;
        self.t_step = 0.0;
        self.replan_index = 0;
        self.yaw_des = 0.0;
        self.stance_yaw = 0.5 * gamma;
        let liftoff = Vector3::new(-prev.foothold[0], -prev.foothold[1], -0.5 * gamma);
        self.swing = SwingTrajectory::new(0.0, ts, liftoff, Vector3::zeros(), liftoff);
        self.tilt = Vector2::zeros();
        self.prev_tilt = Vector2::zeros();
        self.prev_total = Vector3::zeros();
        self.push = None;
        self.terminated = false;
        self.steps_taken = 0;
        if let Some(log) = self.log.as_mut() {
            log.rows.clear();
        }

        Ok(self.observe())
    }

    /// Possibly schedules a sagittal or lateral push inside the step that just began.
    fn schedule_random_push(&mut self) -> Result<(), EnvError> {
        if self.cfg.push_probability <= 0.0 || self.push.is_some() || !self.rng.random_bool(self.cfg.push_probability) {
            return Ok(());
        }
        let p = self.cfg.params;
        let (duration, peak) = self.cfg.push_types[self.rng.random_range(0..self.cfg.push_types.len())];
        let force = peak * self.rng.random::<f64>();
        let dir = self.rng.random_range(0.0..std::f64::consts::TAU);
        let start = self.t + self.rng.random_range(0.0..p.step_duration());
        self.apply_push(force * p.mass() * p.gravity(), duration, dir, start)
    }

    /// Changes the command mid-episode.
    pub fn set_command(&mut self, gait: GaitCommand) {
        self.gait = gait;
    }

    pub fn apply_push(&mut self, force: f64, duration: f64, direction: f64, t_start: f64) -> Result<(), EnvError> {
        if !(duration > 0.0) {
            return Err(EnvError::InvalidPush(duration));
        }
        if let Some(active) = self.push {
            if active.end > self.t && active.start < t_start + duration {
                return Err(EnvError::OverlappingPush { active_until: active.end });
            }
        }
        let (s, c) = direction.sin_cos();
        self.push = Some(Push { force: Vector2::new(c, s) * force, start: t_start, end: t_start + duration });
        Ok(())
    }

    fn push_force(&self, t: f64) -> Vector2<f64> {
        match self.push {
            Some(p) if t >= p.start && t < p.end => p.force,
            _ => Vector2::zeros(),
        }
    }

    /// Base action `(u in the heading frame, absolute foot yaw)` and slack.
    fn base_action(&self) -> Result<(Vector2<f64>, f64, f64), EnvError> {
        let p = &self.cfg.params;
        let gamma0 = foot_yaw_command(self.gait.yaw_rate_des(), p.step_duration(), self.stance_yaw);
        let gamma0 = self.stance_yaw + wrap_angle(gamma0 - self.stance_yaw);
        match self.cfg.base {
            BasePolicy::Mpc => {
                let plan = mpc::plan(
                    &self.x,
                    self.remaining_time(),
                    &self.gait,
                    self.sigma,
                    self.yaw_des,
                    self.stance_yaw,
                    &self.cfg.mpc,
                    p,
                )?;
                Ok((plan.u_seq[0], gamma0, plan.slack_norm))
            }
            BasePolicy::NominalOrbit => {
                let u = mpc::nominal_foothold(&self.gait, self.sigma, p)?;
                Ok((u, gamma0, 0.0))
            }
        }
    }

    pub fn env_step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if self.terminated {
            return Err(EnvError::StaleEnv);
        }
        let p = self.cfg.params;
        let ts = p.step_duration();
        let action = action.clamped(&self.cfg.action_scale);

        let (u_base, gamma_base, slack_norm) = self.base_action()?;
        let u_total = u_base + action.u_res;
        let gamma_total = gamma_base + action.gamma_res;
        let u_world = rotation(self.yaw_des) * u_total;
        let total = Vector3::new(u_total[0], u_total[1], gamma_total - self.stance_yaw);
        let base = Vector3::new(u_base[0], u_base[1], gamma_base - self.stance_yaw);
        let t_r_before = self.remaining_time();
        let sigma_before = self.sigma;

        let target = Vector3::new(u_world[0], u_world[1], gamma_total);
        self.swing = self.swing.retarget(self.t_step, target);

        let t_end = self.schedule.get(self.replan_index + 1).copied().unwrap_or(ts);
        let span = (t_end - self.t_step).max(0.0);
        let n = ((span / self.cfg.proxy.sim_dt - 1e-9).ceil() as usize).max(1);
        let h = span / n as f64;
        let mut applied = Vector2::zeros();
        let mut accel = Vector2::zeros();
        for k in 0..n {
            let t_mid = self.t_step + 0.5 * h;
            let (sp, _, sa) = self.swing.sample(t_mid);
            let mut a = Vector2::new(sa[0], sa[1]);
            let norm = a.norm();
            if norm > self.cfg.swing_accel_limit {
                a *= self.cfg.swing_accel_limit / norm;
            }
            let force = self.push_force(self.t + 0.5 * h);
            if force != Vector2::zeros() {
                applied = force;
            }
            let inputs = ProxyInputs { swing_pos: Vector2::new(sp[0], sp[1]), swing_accel: a, t_step: t_mid, force };
            self.x = proxy::proxy_dynamics(&self.x, &inputs, h, &p, &self.cfg.proxy);
            accel = a;
            self.t += h;
            self.t_step = if k + 1 == n { t_end } else { self.t_step + h };
            self.yaw_des += self.gait.yaw_rate_des() * h;
            let local = self.x.rotated(-self.yaw_des);
            let z = com_height(&p, &self.cfg.proxy, self.t_step);
            if !self.x.is_finite() || termination(z, local.lx, local.ly, &self.cfg.reward) {
                self.terminated = true;
                break;
            }
        }
        if let Some(push) = self.push {
            if self.t >= push.end {
                self.push = None;
            }
        }
        self.tilt_update(accel);

        let mut info = StepInfo { slack_norm, push: applied, base_action: base, total_action: total, ..Default::default() };
        let flipped = !self.terminated && self.t_step >= ts - 1e-9;
        let pre_local = self.x.rotated(-self.yaw_des);
        let orbit = periodic_orbit(&p, &self.gait, sigma_before)?;
        let (lx_des, ly_des) = if flipped {
            (orbit.state.lx + self.gait.lx_offset(), self.gait.ly_des())
        } else {
            (self.gait.lx_offset(), self.gait.ly_des())
        };
        let yaw_error = wrap_angle(self.torso_yaw() - self.yaw_des);
        let sample = RewardSample {
            terminated: self.terminated,
            stance_flipped: flipped,
            lx: pre_local.lx,
            ly: pre_local.ly,
            lx_des,
            ly_des,
            lx_offset: self.gait.lx_offset(),
            lx_main: orbit.lx_main.abs(),
            yaw_error,
            z_c: com_height(&p, &self.cfg.proxy, self.t_step),
            roll: self.tilt[0],
            pitch: self.tilt[1],
            action: total,
            prev_action: self.prev_total,
        };
        let r = reward(&sample, &self.cfg.reward, p.com_height());

        if flipped {
            info.step_completed = true;
            info.ly_error = Some(pre_local.ly - ly_des);
            info.lx_error = Some(pre_local.lx - lx_des);
            self.foot_switch(&u_world, gamma_total);
            self.schedule_random_push()?;
        } else if !self.terminated {
            self.replan_index += 1;
        }
        self.prev_total = total;
        let truncated = !self.terminated && self.steps_taken >= self.cfg.max_steps;

        let obs = self.observe();
        if let Some(log) = self.log.as_mut() {
            log.rows.push(LogRow {
                t: self.t,
                sigma: sigma_before.value(),
                t_r: t_r_before,
                alpha: obs.alpha,
                base: u_base,
                residual: action.u_res,
                gamma_total,
                reward: r,
                terminated: self.terminated,
            });
        }
        Ok(StepOutcome { obs_next: obs, reward: r, terminated: self.terminated, truncated, info })
    }

    fn foot_switch(&mut self, u_world: &Vector2<f64>, gamma_total: f64) {
        let ts = self.cfg.params.step_duration();
        self.x = proxy::impact(&self.x, u_world, &self.cfg.proxy);
        let old_stance = self.stance_yaw;
        self.stance_yaw = gamma_total;
        let liftoff = Vector3::new(-u_world[0], -u_world[1], old_stance);
        self.swing = SwingTrajectory::new(0.0, ts, liftoff, Vector3::zeros(), liftoff);
        self.sigma = self.sigma.flipped();
        self.t_step = 0.0;
        self.replan_index = 0;
        self.steps_taken += 1;
    }

    fn tilt_update(&mut self, accel: Vector2<f64>) {
        let eps = self.cfg.proxy.distal_mass_frac;
        let g = self.cfg.params.gravity();
        let local = rotation(-self.yaw_des) * accel;
        self.prev_tilt = self.tilt;
        self.tilt = Vector2::new((-eps * local[1] / g).atan(), (eps * local[0] / g).atan());
    }

    fn observe(&mut self) -> Observation {
        let p = self.cfg.params;
        let noise_std = self.cfg.proxy.obs_noise_std;
        let noise = |rng: &mut ChaCha8Rng| {
            if noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                n * noise_std
            } else {
                0.0
            }
        };
        let local = self.x.rotated(-self.yaw_des);
        let z = com_height(&p, &self.cfg.proxy, self.t_step);
        let lz = p.mass() * 0.04 * self.gait.yaw_rate_des();
        let mut alpha = [local.x, local.y, z, local.lx, local.ly, lz];
        for a in alpha.iter_mut() {
            *a += noise(&mut self.rng);
        }

        let tilt = self.tilt;
        let interval = 1.0 / self.cfg.f_plan;
        let rate = (tilt - self.prev_tilt) / interval;
        let (sp, _, _) = self.swing.sample(self.t_step);
        let mut psi = [
            tilt[0],
            tilt[1],
            wrap_angle(self.torso_yaw() - self.yaw_des),
            0.0,
            self.cfg.proxy.slope,
            wrap_angle(sp[2] - self.yaw_des),
            rate[0],
            rate[1],
            self.gait.yaw_rate_des(),
        ];
        for v in psi.iter_mut() {
            *v += noise(&mut self.rng);
        }
        for i in [0, 1, 2, 3, 4, 5] {
            psi[i] = wrap_angle(psi[i]);
        }

        let low = self.cfg.is_low_frequency();
        Observation {
            sigma: self.sigma.value(),
            t_r: if low { 0.0 } else { self.remaining_time() },
            alpha,
            psi,
            beta: self.gait.beta(),
            prev_total_action: if low { [0.0; 3] } else { [self.prev_total[0], self.prev_total[1], self.prev_total[2]] },
        }
    }
}
