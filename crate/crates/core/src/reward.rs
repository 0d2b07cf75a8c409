//! Step reward and early-termination set.

use nalgebra::Vector3;

use crate::alip::AlipParams;

/// Gaussian kernel `weight * exp(-(e / width)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub weight: f64,
    pub width: f64,
}

impl Kernel {
    pub fn new(weight: f64, width: f64) -> Self {
        Self { weight, width }
    }

    pub fn eval(&self, e: f64) -> f64 {
        let r = e / self.width;
        self.weight * (-r * r).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub alive: f64,
    pub lx: Kernel,
    pub ly: Kernel,
    pub gamma: Kernel,
    /// Intra-step lateral momentum band.
    pub lx_swing: Kernel,
    pub ly_swing: Kernel,
    /// Change of the total action between consecutive transitions, per component.
    pub action_rate: Kernel,
    pub w_height: f64,
    pub w_tilt: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl RewardConfig {
    pub fn for_params(params: &AlipParams) -> Self {
        let mh = params.mass_height();
        let zh = params.com_height();
        let l_max = 1.5 * mh * 0.925;
        Self {
            alive: 0.5,
            lx: Kernel::new(1.0, 0.25 * mh),
            ly: Kernel::new(1.0, 0.25 * mh),
            gamma: Kernel::new(0.5, 0.1),
            lx_swing: Kernel::new(0.1, 0.3 * mh),
            ly_swing: Kernel::new(0.1, 0.3 * mh),
            action_rate: Kernel::new(0.05, 0.05),
            w_height: 1.0,
            w_tilt: 1.0,
            z_min: 0.7 * zh,
            z_max: 1.3 * zh,
            l_min: -l_max,
            l_max,
        }
    }

    pub fn kernels(&self) -> [(&'static str, Kernel); 6] {
        [
            ("lx", self.lx),
            ("ly", self.ly),
            ("gamma", self.gamma),
            ("lx_swing", self.lx_swing),
            ("ly_swing", self.ly_swing),
            ("action_rate", self.action_rate),
        ]
    }

    pub fn validate(&self, params: &AlipParams) -> Result<(), String> {
        for (name, k) in self.kernels() {
            if !(k.weight > 0.0 && k.width > 0.0) {
                return Err(format!("kernel {name} needs positive weight and width"));
            }
        }
        if !(self.w_height > 0.0 && self.w_tilt > 0.0) {
            return Err("w_height and w_tilt must be > 0".into());
        }
        if !(self.z_min < params.com_height() && params.com_height() < self.z_max) {
            return Err("z bounds must bracket the nominal CoM height".into());
        }
        if !(self.l_min < self.l_max) {
            return Err("l_min must be below l_max".into());
        }
        Ok(())
    }
}

/// Everything the reward needs about one transition, in the heading frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSample {
    pub terminated: bool,
    pub stance_flipped: bool,
    pub lx: f64,
    pub ly: f64,
    pub lx_des: f64,
    pub ly_des: f64,
    pub lx_offset: f64,
    /// Magnitude of the orbit's lateral momentum.
    pub lx_main: f64,
    pub yaw_error: f64,
    pub z_c: f64,
    pub roll: f64,
    pub pitch: f64,
    pub action: Vector3<f64>,
    pub prev_action: Vector3<f64>,
}

pub fn reward(s: &RewardSample, cfg: &RewardConfig, z_nominal: f64) -> f64 {
    if s.terminated {
        return 0.0;
    }
    if s.stance_flipped {
        cfg.alive
            + cfg.lx.eval(s.lx - s.lx_des)
            + cfg.ly.eval(s.ly - s.ly_des)
            + cfg.gamma.eval(s.yaw_error)
            - cfg.w_height * (s.z_c - z_nominal).abs()
            - cfg.w_tilt * (s.roll * s.roll + s.pitch * s.pitch)
    } else {
        let band = ((s.lx - s.lx_offset).abs() - s.lx_main).max(0.0);
        let delta = s.action - s.prev_action;
        cfg.lx_swing.eval(band)
            + cfg.ly_swing.eval(s.ly - s.ly_des)
            + delta.iter().map(|d| cfg.action_rate.eval(*d)).sum::<f64>()
    }
}

/// Closed-interval membership test for the safe set.
pub fn termination(z_c: f64, lx: f64, ly: f64, cfg: &RewardConfig) -> bool {
    let inside = |v: f64, lo: f64, hi: f64| v >= lo && v <= hi;
    !(inside(z_c, cfg.z_min, cfg.z_max) && inside(lx, cfg.l_min, cfg.l_max) && inside(ly, cfg.l_min, cfg.l_max))
}
