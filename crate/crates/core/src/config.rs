//! Flat `key = value` run configuration with dotted keys.
//!
//! Keys are grouped by prefix (`params.`, `proxy.`, `mpc.`, `reward.`, `env.`,
//! `sampler.`, `ppo.`, `experiment.`). Lists are comma separated. Anything not
//! listed here is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alip::AlipParams;
use crate::env::{BasePolicy, EnvConfig};
use crate::par::Execution;
use crate::ppo::{PpoConfig, SigmaSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Experiment-harness settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentParams {
    pub seeds: Vec<u64>,
    /// Checkpoint for the MPC+RL column.
    pub policy: Option<PathBuf>,
    /// Learner state to continue training from.
    pub resume: Option<PathBuf>,
    pub orbit_velocity: (f64, f64, f64),
    /// `(start time, forward velocity)` segments.
    pub velocity_profile: Vec<(f64, f64)>,
    pub track_duration: f64,
    pub push_directions: usize,
    pub push_durations: Vec<f64>,
    pub push_velocity: f64,
    /// Steps walked before the push starts.
    pub push_step: usize,
    /// Push start as a fraction of that step.
    pub push_phase: f64,
    /// Upper end of the force search in units of `m g`.
    pub push_force_limit: f64,
    pub push_iterations: usize,
    pub survival_steps: usize,
    /// Apply increasing forces within one episode instead of one per episode.
    pub push_sequential: bool,
    pub turn_rate: f64,
    pub turn_velocity: f64,
    pub turn_steps: usize,
    pub slopes: Vec<f64>,
    /// Residual bounds of the RL-only variant.
    pub rl_action_scale: Vector3<f64>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            policy: None,
            resume: None,
            orbit_velocity: (0.0, 0.0, 0.0),
            velocity_profile: vec![(0.0, 0.0), (2.0, 0.5), (5.0, 0.925), (8.0, -0.5), (11.0, -0.925), (14.0, 0.0)],
            track_duration: 16.0,
            push_directions: 8,
            push_durations: vec![0.0175, 0.1, 1.0],
            push_velocity: 0.37,
            push_step: 6,
            push_phase: 0.5,
            push_force_limit: 20.0,
            push_iterations: 16,
            survival_steps: 10,
            push_sequential: false,
            turn_rate: 1.27,
            turn_velocity: 0.0,
            turn_steps: 60,
            slopes: vec![0.0, 0.05, 0.1, 0.15, 0.2007],
            rl_action_scale: Vector3::new(0.3, 0.3, 0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub experiment: ExperimentParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { env: EnvConfig::default(), ppo: PpoConfig::default(), experiment: ExperimentParams::default() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Entries::parse(text)?;
        let d = AlipParams::default();
        let params = AlipParams::new(
            entries.f64("params.mass")?.unwrap_or(d.mass()),
            entries.f64("params.gravity")?.unwrap_or(d.gravity()),
            entries.f64("params.com_height")?.unwrap_or(d.com_height()),
            entries.f64("params.step_duration")?.unwrap_or(d.step_duration()),
            entries.f64("params.sample_time")?.unwrap_or(d.sample_time()),
            entries.f64("params.step_width")?.unwrap_or(d.step_width()),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut env = EnvConfig::new(params);
        let mut ppo = PpoConfig::default();
        let mut exp = ExperimentParams::default();

        let pr = &mut env.proxy;
        entries.set_f64("proxy.distal_mass_frac", &mut pr.distal_mass_frac)?;
        entries.set_f64("proxy.impact_loss", &mut pr.impact_loss)?;
        entries.set_f64("proxy.zc_ripple_amp", &mut pr.zc_ripple_amp)?;
        entries.set_f64("proxy.obs_noise_std", &mut pr.obs_noise_std)?;
        entries.set_f64("proxy.slope", &mut pr.slope)?;
        entries.set_f64("proxy.sim_dt", &mut pr.sim_dt)?;

        let m = &mut env.mpc;
        entries.set_usize("mpc.horizon", &mut m.horizon)?;
        let mut qd = m.q.diagonal();
        let mut terminal = m.q_terminal[(2, 2)] / m.q[(2, 2)];
        if let Some(v) = entries.f64("mpc.q_position")? {
            qd[0] = v;
            qd[1] = v;
        }
        if let Some(v) = entries.f64("mpc.q_momentum")? {
            qd[2] = v;
            qd[3] = v;
        }
        entries.set_f64("mpc.terminal_scale", &mut terminal)?;
        m.q = Matrix4::from_diagonal(&Vector4::new(qd[0], qd[1], qd[2], qd[3]));
        m.q_terminal = m.q * terminal;
        if let Some(v) = entries.list("mpc.kin_box", 2)? {
            m.kin_box = Vector2::new(v[0], v[1]);
        }
        if let Some(v) = entries.list("mpc.u_bounds", 2)? {
            m.u_bounds = Vector2::new(v[0], v[1]);
        }
        entries.set_f64("mpc.mu_friction", &mut m.mu_friction)?;
        entries.set_f64("mpc.min_step_width", &mut m.min_step_width)?;
        entries.set_f64("mpc.slack_penalty", &mut m.slack_penalty)?;
        entries.set_f64("mpc.slack_linear", &mut m.slack_linear)?;
        entries.set_f64("mpc.tol", &mut m.tol)?;
        entries.set_usize("mpc.max_iter", &mut m.max_iter)?;

        let r = &mut env.reward;
        entries.set_f64("reward.alive", &mut r.alive)?;
        for (name, k) in [
            ("lx", &mut r.lx),
            ("ly", &mut r.ly),
            ("gamma", &mut r.gamma),
            ("lx_swing", &mut r.lx_swing),
            ("ly_swing", &mut r.ly_swing),
            ("action_rate", &mut r.action_rate),
        ] {
            entries.set_f64(&format!("reward.{name}.weight"), &mut k.weight)?;
            entries.set_f64(&format!("reward.{name}.width"), &mut k.width)?;
        }
        entries.set_f64("reward.w_height", &mut r.w_height)?;
        entries.set_f64("reward.w_tilt", &mut r.w_tilt)?;
        entries.set_f64("reward.z_min", &mut r.z_min)?;
        entries.set_f64("reward.z_max", &mut r.z_max)?;
        entries.set_f64("reward.l_min", &mut r.l_min)?;
        entries.set_f64("reward.l_max", &mut r.l_max)?;

        if let Some((line, v)) = entries.take("env.base") {
            env.base = match v.as_str() {
                "mpc" => BasePolicy::Mpc,
                "nominal" => BasePolicy::NominalOrbit,
                _ => return Err(bad(line, "env.base", "expected `mpc` or `nominal`")),
            };
        }
        entries.set_f64("env.f_plan", &mut env.f_plan)?;
        if let Some(v) = entries.list("env.action_scale", 3)? {
            env.action_scale = Vector3::new(v[0], v[1], v[2]);
        }
        entries.set_usize("env.max_steps", &mut env.max_steps)?;
        entries.set_f64("env.init_perturbation", &mut env.init_perturbation)?;
        entries.set_f64("env.swing_accel_limit", &mut env.swing_accel_limit)?;
        entries.set_f64("env.push_probability", &mut env.push_probability)?;
        if let Some((line, v)) = entries.take("env.push_types") {
            env.push_types = parse_pairs(&v).map_err(|msg| bad(line, "env.push_types", &msg))?;
        }

        for (name, range) in [
            ("sampler.vx", &mut env.sampler.vx),
            ("sampler.vy", &mut env.sampler.vy),
            ("sampler.yaw_rate", &mut env.sampler.yaw_rate),
        ] {
            if let Some(v) = entries.list(name, 2)? {
                *range = (v[0], v[1]);
            }
        }

        entries.set_f64("ppo.clip_eps", &mut ppo.clip_eps)?;
        entries.set_f64("ppo.gamma", &mut ppo.gamma)?;
        entries.set_f64("ppo.gae_lambda", &mut ppo.gae_lambda)?;
        entries.set_usize("ppo.n_envs", &mut ppo.n_envs)?;
        entries.set_usize("ppo.rollout_len", &mut ppo.rollout_len)?;
        entries.set_usize("ppo.epochs", &mut ppo.epochs)?;
        entries.set_usize("ppo.minibatch_size", &mut ppo.minibatch_size)?;
        entries.set_f64("ppo.lr_policy", &mut ppo.lr_policy)?;
        entries.set_f64("ppo.lr_value", &mut ppo.lr_value)?;
        entries.set_u64("ppo.max_env_steps", &mut ppo.max_env_steps)?;
        ppo.sigma.horizon = ppo.max_env_steps;
        if let Some(v) = entries.list("ppo.sigma_schedule", 3)? {
            if v[2] < 0.0 || v[2].fract() != 0.0 {
                return Err(ConfigError::Invalid("ppo.sigma_schedule horizon must be a whole number".into()));
            }
            ppo.sigma = SigmaSchedule { start: v[0], end: v[1], horizon: v[2] as u64 };
        }
        entries.set_u64("ppo.seed", &mut ppo.seed)?;
        if let Some((line, v)) = entries.take("ppo.hidden") {
            ppo.hidden = parse_list(&v)
                .and_then(|xs| xs.iter().map(|x| parse_whole(*x)).collect())
                .map_err(|msg| bad(line, "ppo.hidden", &msg))?;
        }
        entries.set_f64("ppo.value_scale", &mut ppo.value_scale)?;
        entries.set_f64("ppo.max_grad_norm", &mut ppo.max_grad_norm)?;
        entries.set_usize("ppo.grad_chunk", &mut ppo.grad_chunk)?;
        if let Some((line, v)) = entries.take("ppo.execution") {
            ppo.execution = match v.as_str() {
                "parallel" => Execution::Parallel,
                "sequential" => Execution::Sequential,
                _ => return Err(bad(line, "ppo.execution", "expected `parallel` or `sequential`")),
            };
        }

        if let Some((line, v)) = entries.take("experiment.seeds") {
            exp.seeds = parse_list(&v)
                .and_then(|xs| xs.iter().map(|x| parse_whole(*x).map(|n| n as u64)).collect())
                .map_err(|msg| bad(line, "experiment.seeds", &msg))?;
        }
        if let Some((_, v)) = entries.take("experiment.policy") {
            exp.policy = Some(PathBuf::from(v));
        }
        if let Some((_, v)) = entries.take("experiment.resume") {
            exp.resume = Some(PathBuf::from(v));
        }
        if let Some(v) = entries.list("experiment.orbit_velocity", 3)? {
            exp.orbit_velocity = (v[0], v[1], v[2]);
        }
        if let Some((line, v)) = entries.take("experiment.velocity_profile") {
            exp.velocity_profile = parse_pairs(&v).map_err(|msg| bad(line, "experiment.velocity_profile", &msg))?;
        }
        entries.set_f64("experiment.track_duration", &mut exp.track_duration)?;
        entries.set_usize("experiment.push_directions", &mut exp.push_directions)?;
        if let Some(v) = entries.list_any("experiment.push_durations")? {
            exp.push_durations = v;
        }
        entries.set_f64("experiment.push_velocity", &mut exp.push_velocity)?;
        entries.set_usize("experiment.push_step", &mut exp.push_step)?;
        entries.set_f64("experiment.push_phase", &mut exp.push_phase)?;
        entries.set_f64("experiment.push_force_limit", &mut exp.push_force_limit)?;
        entries.set_usize("experiment.push_iterations", &mut exp.push_iterations)?;
        entries.set_usize("experiment.survival_steps", &mut exp.survival_steps)?;
        entries.set_bool("experiment.push_sequential", &mut exp.push_sequential)?;
        entries.set_f64("experiment.turn_rate", &mut exp.turn_rate)?;
        entries.set_f64("experiment.turn_velocity", &mut exp.turn_velocity)?;
        entries.set_usize("experiment.turn_steps", &mut exp.turn_steps)?;
        if let Some(v) = entries.list_any("experiment.slopes")? {
            exp.slopes = v;
        }
        if let Some(v) = entries.list("experiment.rl_action_scale", 3)? {
            exp.rl_action_scale = Vector3::new(v[0], v[1], v[2]);
        }

        entries.finish()?;
        let cfg = Self { env, ppo, experiment: exp };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let e = &self.experiment;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if e.seeds.is_empty() {
            return invalid("experiment.seeds must not be empty");
        }
        if e.velocity_profile.is_empty() || e.velocity_profile.windows(2).any(|w| w[1].0 <= w[0].0) {
            return invalid("experiment.velocity_profile needs increasing start times");
        }
        if e.push_directions == 0 || e.push_durations.iter().any(|d| !(*d > 0.0)) {
            return invalid("push directions and durations must be positive");
        }
        if !(e.push_force_limit > 0.0 && (0.0..1.0).contains(&e.push_phase)) {
            return invalid("push_force_limit must be positive and push_phase in [0, 1)");
        }
        if e.survival_steps == 0 || e.turn_steps == 0 || !(e.track_duration > 0.0) {
            return invalid("survival_steps, turn_steps and track_duration must be positive");
        }
        if e.rl_action_scale.min() <= 0.0 {
            return invalid("experiment.rl_action_scale must be positive");
        }
        for p in [&e.policy, &e.resume].into_iter().flatten() {
            if !p.exists() {
                return Err(ConfigError::Invalid(format!("path {p:?} does not exist")));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        hex::encode(&digest[..8])
    }
}

fn bad(line: usize, key: &str, msg: &str) -> ConfigError {
    ConfigError::BadValue { line, key: key.to_string(), msg: msg.to_string() }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", s.trim())))
        .collect()
}

fn parse_whole(x: f64) -> Result<usize, String> {
    if x >= 0.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(format!("{x} is not a non-negative integer"))
    }
}

/// `a:b, c:d` pairs.
fn parse_pairs(v: &str) -> Result<Vec<(f64, f64)>, String> {
    v.split(',')
        .map(|seg| {
            let (a, b) = seg.split_once(':').ok_or_else(|| format!("segment `{}` needs `a:b`", seg.trim()))?;
            let a = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
            let b = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
            Ok((a, b))
        })
        .collect()
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line, msg: "empty key or value".into() });
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(ConfigError::DuplicateKey { line, key: k.to_string() });
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.take(key)
            .map(|(line, v)| v.parse::<f64>().map_err(|e| bad(line, key, &e.to_string())))
            .transpose()
    }

    fn set_f64(&mut self, key: &str, slot: &mut f64) -> Result<(), ConfigError> {
        if let Some(v) = self.f64(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_usize(&mut self, key: &str, slot: &mut usize) -> Result<(), ConfigError> {
        if let Some((line, v)) = self.take(key) {
            *slot = v.parse().map_err(|e: std::num::ParseIntError| bad(line, key, &e.to_string()))?;
        }
        Ok(())
    }

    fn set_u64(&mut self, key: &str, slot: &mut u64) -> Result<(), ConfigError> {
        if let Some((line, v)) = self.take(key) {
            *slot = v.parse().map_err(|e: std::num::ParseIntError| bad(line, key, &e.to_string()))?;
        }
        Ok(())
    }

    fn set_bool(&mut self, key: &str, slot: &mut bool) -> Result<(), ConfigError> {
        if let Some((line, v)) = self.take(key) {
            *slot = v.parse().map_err(|e: std::str::ParseBoolError| bad(line, key, &e.to_string()))?;
        }
        Ok(())
    }

    fn list(&mut self, key: &str, n: usize) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => {
                let xs = parse_list(&v).map_err(|m| bad(line, key, &m))?;
                if xs.len() != n {
                    return Err(bad(line, key, &format!("expected {n} values, got {}", xs.len())));
                }
                Ok(Some(xs))
            }
        }
    }

    fn list_any(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.take(key).map(|(line, v)| parse_list(&v).map_err(|m| bad(line, key, &m))).transpose()
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(ConfigError::UnknownKey { line, key }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        let mut expected = RunConfig::default();
        expected.ppo.sigma.horizon = expected.ppo.max_env_steps;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn parses_values_of_each_kind() {
        let text = "
            params.com_height = 0.8   # taller
            proxy.distal_mass_frac = 0.1
            mpc.kin_box = 0.4, 0.35
            env.base = nominal
            sampler.vx = -0.5, 0.5
            ppo.hidden = 32, 16
            ppo.execution = sequential
            experiment.seeds = 3, 4
            experiment.velocity_profile = 0:0, 1.5:0.4
            experiment.push_sequential = true
            env.push_types = 0.0175:0.9, 1:0.09
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.env.params.com_height(), 0.8);
        assert_eq!(cfg.env.proxy.distal_mass_frac, 0.1);
        assert_eq!(cfg.env.mpc.kin_box, Vector2::new(0.4, 0.35));
        assert_eq!(cfg.env.base, BasePolicy::NominalOrbit);
        assert_eq!(cfg.env.sampler.vx, (-0.5, 0.5));
        assert_eq!(cfg.ppo.hidden, vec![32, 16]);
        assert_eq!(cfg.ppo.execution, Execution::Sequential);
        assert_eq!(cfg.experiment.seeds, vec![3, 4]);
        assert_eq!(cfg.experiment.velocity_profile, vec![(0.0, 0.0), (1.5, 0.4)]);
        assert!(cfg.experiment.push_sequential);
        assert_eq!(cfg.env.push_types, vec![(0.0175, 0.9), (1.0, 0.09)]);
        // Derived defaults follow the overridden height.
        assert_eq!(cfg.env.reward.z_max, 1.3 * 0.8);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("ppo.gamma = 0.9\nppo.gama = 0.9\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, ref key } if key == "ppo.gama"));
    }

    #[test]
    fn syntax_and_value_errors() {
        assert!(matches!(RunConfig::parse("ppo.gamma 0.9"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("ppo.gamma = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("ppo.gamma = 1\nppo.gamma = 1"), Err(ConfigError::DuplicateKey { .. })));
        assert!(matches!(RunConfig::parse("ppo.clip_eps = 1.5"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse("").unwrap();
        let b = RunConfig::parse("ppo.seed = 1").unwrap();
        assert_eq!(a.hash(), RunConfig::parse("").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
