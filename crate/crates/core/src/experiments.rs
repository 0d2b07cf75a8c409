//! Desk-scale experiments on the proxy simulator.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::alip::{periodic_orbit, AlipError, AlipParams, GaitCommand, StanceSign};
use crate::env::{Action, BasePolicy, EnvConfig, EnvError, GaitEnv, GaitSampler};
use crate::par::{self, Execution};
use crate::policy::{PolicyCheckpoint, PolicyError};
use crate::ppo::{self, MetricsRow, PpoConfig, PpoError, TrainFiles};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Alip(#[from] AlipError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which footstep controller drives the environment.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    MpcOnly,
    MpcRl(&'a PolicyCheckpoint),
    /// Residual on top of the nominal orbit foothold with the given bounds.
    RlOnly(&'a PolicyCheckpoint, Vector3<f64>),
}

impl Controller<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Controller::MpcOnly => "mpc",
            Controller::MpcRl(_) => "mpc_rl",
            Controller::RlOnly(..) => "rl_only",
        }
    }

    pub fn env_config(&self, cfg: &EnvConfig) -> EnvConfig {
        match self {
            Controller::MpcOnly | Controller::MpcRl(_) => EnvConfig { base: BasePolicy::Mpc, ..cfg.clone() },
            Controller::RlOnly(_, scale) => rl_only_config(cfg, *scale),
        }
    }

    pub fn act(&self, obs: &[f64]) -> Result<Action, PolicyError> {
        match self {
            Controller::MpcOnly => Ok(Action::zero()),
            Controller::MpcRl(p) | Controller::RlOnly(p, _) => Ok(Action::from_slice(&p.act(obs)?)),
        }
    }
}

/// Same MDP with the MPC replaced by the nominal orbit foothold.
pub fn rl_only_config(cfg: &EnvConfig, action_scale: Vector3<f64>) -> EnvConfig {
    EnvConfig { base: BasePolicy::NominalOrbit, action_scale, ..cfg.clone() }
}

fn heading_velocity(env: &GaitEnv) -> f64 {
    let p = env.config().params;
    env.state().rotated(-env.desired_yaw()).ly / p.mass_height()
}

pub fn csv_text(meta: &[String], header: &str, rows: &[String]) -> String {
    let mut out = String::new();
    for m in meta {
        let _ = writeln!(out, "# {m}");
    }
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = writeln!(out, "{r}");
    }
    out
}

pub fn write_csv(path: &Path, meta: &[String], header: &str, rows: &[String]) -> std::io::Result<()> {
    std::fs::write(path, csv_text(meta, header, rows))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitReport {
    pub lx_main: f64,
    pub x_des: f64,
    pub y_des: f64,
    pub ly_des: f64,
    pub foothold_x: f64,
    pub closure_residual: f64,
}

/// Orbit for a velocity command, reported for a left-stance step.
pub fn orbit_report(params: &AlipParams, vx: f64, vy: f64, yaw_rate: f64) -> Result<OrbitReport, ExperimentError> {
    let gait = GaitCommand::from_velocity(params, vx, vy, yaw_rate);
    let o = periodic_orbit(params, &gait, StanceSign::Left)?;
    Ok(OrbitReport {
        lx_main: o.lx_main,
        x_des: o.state.x,
        y_des: o.state.y,
        ly_des: o.state.ly,
        foothold_x: o.foothold[0],
        closure_residual: o.closure_residual,
    })
}

/// Mean end-of-step `|L_y error| / (m z_H)` over episodes with sampled commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSummary {
    pub mean_abs_error: f64,
    pub samples: usize,
    pub terminations: usize,
}

pub fn tracking_error(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    seeds: &[u64],
    exec: Execution,
) -> Result<TrackingSummary, ExperimentError> {
    let env_cfg = controller.env_config(cfg);
    let mh = env_cfg.params.mass_height();
    let per_seed = par::map_range(exec, seeds.len(), |i| -> Result<(Vec<f64>, bool), ExperimentError> {
        let mut env = GaitEnv::new(env_cfg.clone())?;
        let mut obs = env.reset(seeds[i])?;
        let mut errs = Vec::new();
        loop {
            let out = env.env_step(&controller.act(&obs.to_vec())?)?;
            if let Some(e) = out.info.ly_error {
                errs.push(e.abs() / mh);
            }
            if out.terminated {
                return Ok((errs, true));
            }
            if out.truncated {
                return Ok((errs, false));
            }
            obs = out.obs_next;
        }
    });
    let mut all = Vec::new();
    let mut terminations = 0;
    for r in per_seed {
        let (e, t) = r?;
        all.extend(e);
        terminations += t as usize;
    }
    let mean_abs_error = if all.is_empty() { f64::NAN } else { all.iter().sum::<f64>() / all.len() as f64 };
    Ok(TrackingSummary { mean_abs_error, samples: all.len(), terminations })
}

/// Piecewise-constant forward velocity at time `t`.
pub fn profile_at(profile: &[(f64, f64)], t: f64) -> f64 {
    profile.iter().take_while(|(start, _)| *start <= t + 1e-12).last().map_or(0.0, |(_, v)| *v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    /// `(t, v_cmd, v_meas)` after every env step; ends early on termination.
    pub samples: Vec<(f64, f64, f64)>,
    pub step_errors: Vec<f64>,
    pub terminated: bool,
}

/// Walks a velocity profile from a fixed seed.
pub fn track_run(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    profile: &[(f64, f64)],
    duration: f64,
    seed: u64,
) -> Result<TrackRun, ExperimentError> {
    let mut env_cfg = controller.env_config(cfg);
    let p = env_cfg.params;
    env_cfg.max_steps = (duration / p.step_duration()).ceil().max(1.0) as usize;
    let mut env = GaitEnv::new(env_cfg)?;
    let command = |t: f64| GaitCommand::from_velocity(&p, profile_at(profile, t), 0.0, 0.0);
    let mut obs = env.reset_with_command(seed, command(0.0))?;
    let mut run = TrackRun { samples: Vec::new(), step_errors: Vec::new(), terminated: false };
    loop {
        let v_cmd = profile_at(profile, env.time());
        env.set_command(command(env.time()));
        let out = env.env_step(&controller.act(&obs.to_vec())?)?;
        run.samples.push((env.time(), v_cmd, heading_velocity(&env)));
        if let Some(e) = out.info.ly_error {
            run.step_errors.push(e.abs() / p.mass_height());
        }
        if out.terminated {
            run.terminated = true;
            break;
        }
        if out.truncated {
            break;
        }
        obs = out.obs_next;
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackComparison {
    pub seed: u64,
    pub mpc: TrackRun,
    pub mpc_rl: TrackRun,
}

pub const TRACK_HEADER: &str = "seed,t,v_cmd,v_meas_MPC,v_meas_MPC+RL";

impl TrackComparison {
    pub fn rows(&self) -> Vec<String> {
        let n = self.mpc.samples.len().max(self.mpc_rl.samples.len());
        let grid = if self.mpc.samples.len() >= self.mpc_rl.samples.len() { &self.mpc } else { &self.mpc_rl };
        (0..n)
            .map(|i| {
                let (t, v_cmd, _) = grid.samples[i];
                let col = |r: &TrackRun| r.samples.get(i).map_or(f64::NAN, |s| s.2);
                format!("{},{},{},{},{}", self.seed, t, v_cmd, col(&self.mpc), col(&self.mpc_rl))
            })
            .collect()
    }
}

pub fn track(
    cfg: &EnvConfig,
    policy: &PolicyCheckpoint,
    profile: &[(f64, f64)],
    duration: f64,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<TrackComparison>, ExperimentError> {
    par::map_range(exec, seeds.len(), |i| {
        Ok(TrackComparison {
            seed: seeds[i],
            mpc: track_run(cfg, Controller::MpcOnly, profile, duration, seeds[i])?,
            mpc_rl: track_run(cfg, Controller::MpcRl(policy), profile, duration, seeds[i])?,
        })
    })
    .into_iter()
    .collect()
}

/// Mean step-end error over all runs of one column.
pub fn mean_step_error<'a>(runs: impl IntoIterator<Item = &'a TrackRun>) -> f64 {
    let errs: Vec<f64> = runs.into_iter().flat_map(|r| r.step_errors.iter().copied()).collect();
    if errs.is_empty() {
        f64::NAN
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushProtocol {
    pub velocity: f64,
    pub push_step: usize,
    pub phase: f64,
    pub survival_steps: usize,
    /// Upper end of the search in units of `m g`.
    pub force_limit: f64,
    pub iterations: usize,
    pub sequential: bool,
}

impl PushProtocol {
    pub fn from_experiment(e: &crate::config::ExperimentParams) -> Self {
        Self {
            velocity: e.push_velocity,
            push_step: e.push_step,
            phase: e.push_phase,
            survival_steps: e.survival_steps,
            force_limit: e.push_force_limit,
            iterations: e.push_iterations,
            sequential: e.push_sequential,
        }
    }

    fn steps_spanned(&self, duration: f64, ts: f64) -> usize {
        ((self.phase * ts + duration) / ts - 1e-9).ceil().max(1.0) as usize
    }
}

fn push_env(cfg: &EnvConfig, controller: Controller<'_>, proto: &PushProtocol, max_steps: usize) -> Result<GaitEnv, EnvError> {
    let mut env_cfg = controller.env_config(cfg);
    env_cfg.sampler = GaitSampler::fixed(proto.velocity, 0.0, 0.0);
    env_cfg.push_probability = 0.0;
    env_cfg.max_steps = max_steps;
    GaitEnv::new(env_cfg)
}

/// Walks until `target` footsteps are done; false on termination.
fn walk_until(env: &mut GaitEnv, obs: &mut Vec<f64>, controller: Controller<'_>, target: usize) -> Result<bool, ExperimentError> {
    while env.steps_taken() < target {
        let out = env.env_step(&controller.act(obs)?)?;
        if out.terminated {
            return Ok(false);
        }
        *obs = out.obs_next.to_vec().to_vec();
        if out.truncated {
            break;
        }
    }
    Ok(true)
}

/// One episode with a single push; true when no termination follows within
/// the survival window after the push ends.
pub fn survives_push(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    proto: &PushProtocol,
    seed: u64,
    force: f64,
    direction: f64,
    duration: f64,
) -> Result<bool, ExperimentError> {
    let ts = cfg.params.step_duration();
    let end = proto.push_step + proto.steps_spanned(duration, ts) + proto.survival_steps;
    let mut env = push_env(cfg, controller, proto, end + 1)?;
    let mut obs = env.reset(seed)?.to_vec().to_vec();
    if !walk_until(&mut env, &mut obs, controller, proto.push_step)? {
        return Ok(false);
    }
    if force > 0.0 {
        env.apply_push(force, duration, direction, env.time() + proto.phase * ts)?;
    }
    walk_until(&mut env, &mut obs, controller, end)
}

/// Largest survived force in units of `m g` under the independent-per-force
/// protocol, found by bisection.
pub fn max_push_force(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    proto: &PushProtocol,
    seed: u64,
    direction: f64,
    duration: f64,
) -> Result<f64, ExperimentError> {
    let mg = cfg.params.mass() * cfg.params.gravity();
    if proto.sequential {
        return sequential_push_force(cfg, controller, proto, seed, direction, duration);
    }
    let test = |f: f64| survives_push(cfg, controller, proto, seed, f * mg, direction, duration);
    if !test(0.0)? {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, proto.force_limit);
    if test(hi)? {
        return Ok(hi);
    }
    for _ in 0..proto.iterations {
        let mid = 0.5 * (lo + hi);
        if test(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Increasing forces on an evenly spaced grid within one episode.
fn sequential_push_force(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    proto: &PushProtocol,
    seed: u64,
    direction: f64,
    duration: f64,
) -> Result<f64, ExperimentError> {
    let ts = cfg.params.step_duration();
    let mg = cfg.params.mass() * cfg.params.gravity();
    let levels = proto.iterations.max(1);
    let period = proto.steps_spanned(duration, ts) + proto.survival_steps;
    let mut env = push_env(cfg, controller, proto, proto.push_step + levels * period + 1)?;
    let mut obs = env.reset(seed)?.to_vec().to_vec();
    if !walk_until(&mut env, &mut obs, controller, proto.push_step)? {
        return Ok(0.0);
    }
    let mut survived = 0.0;
    for k in 1..=levels {
        let f = proto.force_limit * k as f64 / levels as f64;
        env.apply_push(f * mg, duration, direction, env.time() + proto.phase * ts)?;
        if !walk_until(&mut env, &mut obs, controller, proto.push_step + k * period)? {
            break;
        }
        survived = f;
    }
    Ok(survived)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushResult {
    pub controller: &'static str,
    pub duration: f64,
    pub direction: f64,
    pub seed: u64,
    pub max_force: f64,
}

pub const PUSH_HEADER: &str = "controller,duration,direction,seed,max_force_over_mg";

impl PushResult {
    pub fn row(&self) -> String {
        format!("{},{},{},{},{}", self.controller, self.duration, self.direction, self.seed, self.max_force)
    }
}

pub fn push_directions(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

/// Force search over every direction and seed for one push duration.
pub fn push_sweep(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    proto: &PushProtocol,
    directions: &[f64],
    duration: f64,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<PushResult>, ExperimentError> {
    let jobs: Vec<(f64, u64)> = directions.iter().flat_map(|d| seeds.iter().map(move |s| (*d, *s))).collect();
    par::map_range(exec, jobs.len(), |j| {
        let (direction, seed) = jobs[j];
        let max_force = max_push_force(cfg, controller, proto, seed, direction, duration)?;
        Ok(PushResult { controller: controller.label(), duration, direction, seed, max_force })
    })
    .into_iter()
    .collect()
}

/// Per-direction mean over seeds, in direction order.
pub fn mean_by_direction(results: &[PushResult], directions: &[f64]) -> Vec<f64> {
    directions
        .iter()
        .map(|d| {
            let v: Vec<f64> = results.iter().filter(|r| r.direction == *d).map(|r| r.max_force).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnResult {
    pub controller: &'static str,
    pub seed: u64,
    pub turns: usize,
    pub yaw_rate_error: f64,
    pub terminated: bool,
}

pub const TURN_HEADER: &str = "controller,seed,completed_turns,yaw_rate_error,terminated";

impl TurnResult {
    pub fn row(&self) -> String {
        format!("{},{},{},{},{}", self.controller, self.seed, self.turns, self.yaw_rate_error, self.terminated)
    }
}

/// Counts full rotations of the torso yaw while walking at a constant turn rate.
pub fn turn_run(
    cfg: &EnvConfig,
    controller: Controller<'_>,
    yaw_rate: f64,
    velocity: f64,
    steps: usize,
    seed: u64,
) -> Result<TurnResult, ExperimentError> {
    let mut env_cfg = controller.env_config(cfg);
    env_cfg.max_steps = steps;
    let p = env_cfg.params;
    let mut env = GaitEnv::new(env_cfg)?;
    let mut obs = env.reset_with_command(seed, GaitCommand::from_velocity(&p, velocity, 0.0, yaw_rate))?;
    let yaw0 = env.torso_yaw();
    let (mut prev_yaw, mut prev_t) = (yaw0, env.time());
    let mut rate_err = Vec::new();
    let mut terminated = false;
    loop {
        let out = env.env_step(&controller.act(&obs.to_vec())?)?;
        let (yaw, t) = (env.torso_yaw(), env.time());
        if t > prev_t {
            rate_err.push(((yaw - prev_yaw) / (t - prev_t) - yaw_rate).abs());
        }
        (prev_yaw, prev_t) = (yaw, t);
        if out.terminated {
            terminated = true;
            break;
        }
        if out.truncated {
            break;
        }
        obs = out.obs_next;
    }
    let turns = ((prev_yaw - yaw0).abs() / (2.0 * PI) + 1e-9).floor() as usize;
    let yaw_rate_error = rate_err.iter().sum::<f64>() / rate_err.len().max(1) as f64;
    Ok(TurnResult { controller: controller.label(), seed, turns, yaw_rate_error, terminated })
}

/// Learning curves of both variants on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareResult {
    pub seed: u64,
    pub mpc_rl: Vec<MetricsRow>,
    pub rl_only: Vec<MetricsRow>,
}

pub const COMPARE_HEADER: &str = "seed,variant,iter,env_steps,mean_return";

impl CompareResult {
    pub fn rows(&self) -> Vec<String> {
        let fmt = |name: &str, m: &MetricsRow| format!("{},{},{},{},{}", self.seed, name, m.iter, m.env_steps, m.mean_return);
        self.mpc_rl.iter().map(|m| fmt("mpc_rl", m)).chain(self.rl_only.iter().map(|m| fmt("rl_only", m))).collect()
    }
}

/// Trapezoidal area under mean return versus env steps.
pub fn learning_curve_auc(rows: &[MetricsRow]) -> f64 {
    rows.windows(2)
        .map(|w| 0.5 * (w[0].mean_return + w[1].mean_return) * (w[1].env_steps - w[0].env_steps) as f64)
        .sum()
}

pub fn compare_sample_efficiency(
    cfg: &EnvConfig,
    ppo_cfg: &PpoConfig,
    rl_action_scale: Vector3<f64>,
    seed: u64,
) -> Result<CompareResult, ExperimentError> {
    let pc = PpoConfig { seed, ..ppo_cfg.clone() };
    let files = TrainFiles::default();
    let mpc_rl = ppo::train(&pc, &EnvConfig { base: BasePolicy::Mpc, ..cfg.clone() }, &files)?.metrics;
    let rl_only = ppo::train(&pc, &rl_only_config(cfg, rl_action_scale), &files)?.metrics;
    Ok(CompareResult { seed, mpc_rl, rl_only })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_command_without_width_is_all_zero() {
        let p = AlipParams::default().with_step_width(0.0).unwrap();
        let r = orbit_report(&p, 0.0, 0.0, 0.0).unwrap();
        for v in [r.lx_main, r.x_des, r.y_des, r.ly_des, r.foothold_x, r.closure_residual] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn profile_lookup() {
        let prof = [(0.0, 0.1), (1.0, 0.5), (2.0, -0.3)];
        assert_eq!(profile_at(&prof, 0.5), 0.1);
        assert_eq!(profile_at(&prof, 1.0), 0.5);
        assert_eq!(profile_at(&prof, 7.0), -0.3);
    }

    #[test]
    fn auc_of_constant_curve() {
        let rows: Vec<MetricsRow> =
            (0..4).map(|i| MetricsRow { iter: i, env_steps: 100 * (i as u64 + 1), mean_return: 2.0, ..Default::default() }).collect();
        assert_eq!(learning_curve_auc(&rows), 600.0);
    }

    #[test]
    fn zero_force_always_survives() {
        let cfg = EnvConfig::default();
        let proto = PushProtocol {
            velocity: 0.37,
            push_step: 2,
            phase: 0.5,
            survival_steps: 4,
            force_limit: 5.0,
            iterations: 4,
            sequential: false,
        };
        assert!(survives_push(&cfg, Controller::MpcOnly, &proto, 0, 0.0, 0.0, 0.1).unwrap());
    }

    #[test]
    fn turning_in_place_counts_rotations() {
        let cfg = EnvConfig::default();
        let r = turn_run(&cfg, Controller::MpcOnly, 0.0, 0.0, 12, 0).unwrap();
        assert_eq!(r.turns, 0);
        assert!(!r.terminated);
    }
}
