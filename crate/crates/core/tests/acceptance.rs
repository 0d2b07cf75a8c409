//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use alip_stepper::alip::*;
use alip_stepper::config::ExperimentParams;
use alip_stepper::env::*;
use alip_stepper::experiments::*;
use alip_stepper::par::Execution;
use alip_stepper::policy::*;
use alip_stepper::ppo::*;
use alip_stepper::proxy::ProxyParams;
use alip_stepper::qp;
use alip_stepper::reward::{reward, RewardConfig, RewardSample};
use common::*;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn alip_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_closed: f64 = 0.0;
    let mut worst_rk4: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(5.0..80.0);
        let g = rng.random_range(9.0..10.0);
        let zh = rng.random_range(0.4..1.2);
        let dt = rng.random_range(1e-6..=0.5);
        let p = AlipParams::new(m, g, zh, 0.25, 0.01, 0.2).unwrap();
        let (a, _) = system_matrices(&p);
        let phi = discretize(&a, dt);
        let rel = |x: &nalgebra::Matrix4<f64>, y: &nalgebra::Matrix4<f64>| {
            x.iter().zip(y.iter()).map(|(u, v)| (u - v).abs() / v.abs().max(1.0)).fold(0.0, f64::max)
        };
        worst_closed = worst_closed.max(rel(&phi, &closed_form(m, g, zh, dt)));
        worst_rk4 = worst_rk4.max(rel(&phi, &rk4_exp(&a, dt, 1e-5)));
    }
    outcome(
        worst_closed <= 1e-10 && worst_rk4 <= 1e-10,
        format!("max rel. deviation: closed form {worst_closed:.1e}, RK4 {worst_rk4:.1e}"),
    )
}

fn orbit_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let ts = rng.random_range(2..=8) as f64 * 0.05;
        let w = rng.random_range(0.0..0.35);
        let p = AlipParams::new(39.0, 9.81, 0.69, ts, 0.01, w).unwrap();
        let ly = rng.random_range(-0.925..0.925) * p.mass_height();
        let gait = GaitCommand::new(0.0, ly, 0.0, ts);
        let o = periodic_orbit(&p, &gait, StanceSign::Left).unwrap();
        // Closure recomputed from the returned orbit.
        let b = step_to_step(&o.state, &o.foothold, &p);
        let back = step_to_step(&b, &o.partner_foothold, &p);
        worst = worst.max(o.closure_residual).max(back.max_abs_diff(&o.state) / (1.0 + o.state.ly.abs()));
    }
    outcome(worst <= 1e-9, format!("max closure residual {worst:.1e}"))
}

fn qp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let settings = qp::QpSettings::default();
    let (mut worst_z, mut worst_kkt): (f64, f64) = (0.0, 0.0);
    let mut failures = 0;
    for _ in 0..200 {
        let p = random_qp(&mut rng);
        let (z_ref, _) = enumerate(&p).unwrap();
        let s = qp::solve(&p, &settings);
        if s.status != qp::QpStatus::Optimal {
            failures += 1;
            continue;
        }
        worst_z = worst_z.max((&s.z - &z_ref).amax());
        worst_kkt = worst_kkt.max(qp::check_kkt(&p, &s).max());
    }
    outcome(
        failures == 0 && worst_z <= 1e-7 && worst_kkt <= 1e-8,
        format!("max |z - z_enum| {worst_z:.1e}, max KKT {worst_kkt:.1e}, non-optimal {failures}"),
    )
}

fn mpc_tracking() -> Outcome {
    let p = AlipParams::default();
    let mh = p.mass_height();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut cfg = EnvConfig::new(p);
        cfg.proxy = ProxyParams::exact(p.sample_time());
        cfg.reward.l_min = f64::NEG_INFINITY;
        cfg.reward.l_max = f64::INFINITY;
        cfg.init_perturbation = 0.1;
        cfg.sampler = GaitSampler::fixed(rng.random_range(-0.8..0.8), rng.random_range(-0.15..0.15), 0.0);
        let mut env = GaitEnv::new(cfg).unwrap();
        env.reset(trial).unwrap();
        let mut errors = Vec::new();
        while errors.len() < 8 {
            if let Some(e) = env.env_step(&Action::zero()).unwrap().info.ly_error {
                errors.push(e.abs());
            }
        }
        worst = worst.max(errors[7]);
    }
    outcome(worst <= 1e-3 * mh, format!("worst |L_y error| after 8 steps {:.2e} (bound {:.2e})", worst, 1e-3 * mh))
}

fn zero_residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = Policy::new(&[OBS_DIM, 64, 64, ACTION_DIM], vec![0.15, 0.1, 0.2], &mut rng).unwrap();
    let ck = PolicyCheckpoint { policy, normalizer: Some(ObsNormalizer::new(OBS_DIM)) };
    let cfg = EnvConfig::default();
    let mut identical = 0;
    for seed in 0..5 {
        let run = |c: Controller<'_>| {
            let mut env = GaitEnv::new(c.env_config(&cfg)).unwrap();
            let mut obs = env.reset(seed).unwrap();
            let mut trace = Vec::new();
            for _ in 0..10 {
                let out = env.env_step(&c.act(&obs.to_vec()).unwrap()).unwrap();
                obs = out.obs_next.clone();
                let bits: Vec<u64> = env.state().to_vector().iter().map(|v| v.to_bits()).collect();
                trace.push((out, bits));
            }
            trace
        };
        identical += (run(Controller::MpcOnly) == run(Controller::MpcRl(&ck))) as usize;
    }
    outcome(identical == 5, format!("{identical}/5 seeds bit-identical over 10 steps"))
}

fn reward_checks() -> Outcome {
    let p = AlipParams::default();
    let cfg = RewardConfig::for_params(&p);
    let perfect = RewardSample {
        terminated: false,
        stance_flipped: true,
        lx: 3.0,
        ly: 8.0,
        lx_des: 3.0,
        ly_des: 8.0,
        lx_offset: 0.2,
        lx_main: 2.8,
        yaw_error: 0.0,
        z_c: p.com_height(),
        roll: 0.0,
        pitch: 0.0,
        action: Vector3::new(0.02, -0.01, 0.05),
        prev_action: Vector3::new(0.02, -0.01, 0.05),
    };
    let zh = p.com_height();
    let terminal = reward(&RewardSample { terminated: true, ..perfect }, &cfg, zh) == 0.0;
    let end = reward(&perfect, &cfg, zh) == cfg.alive + cfg.lx.weight + cfg.ly.weight + cfg.gamma.weight;
    let swing = RewardSample { stance_flipped: false, lx: -2.5, ..perfect };
    let sw = reward(&swing, &cfg, zh) == cfg.lx_swing.weight + cfg.ly_swing.weight + 3.0 * cfg.action_rate.weight;
    let kernels = cfg.kernels().iter().all(|(_, k)| k.eval(0.0) == k.weight);
    outcome(
        terminal && end && sw && kernels,
        format!("terminal {terminal}, transition {end}, intra-step {sw}, Ker(0) = weight {kernels}"),
    )
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst_net: f64 = 0.0;
    for (dims, kind, scale) in [
        ([23, 8, 8, 3], OutputKind::ScaledTanh, vec![0.15, 0.1, 0.2]),
        ([23, 8, 8, 1], OutputKind::Linear, vec![10.0]),
    ] {
        let net = Mlp::new_dense(&dims, Activation::Tanh, kind, scale, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..23).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let w: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |n: &Mlp| -> f64 {
            xs.iter().map(|x| n.forward(x).unwrap().iter().zip(&w).map(|(o, c)| o * c).sum::<f64>()).sum()
        };
        let mut grad = vec![0.0; net.num_params()];
        for x in &xs {
            let (_, trace) = net.forward_trace(x).unwrap();
            net.backward_into(&trace, &w, &mut grad).unwrap();
        }
        let mut probe = net.clone();
        for i in 0..net.num_params() {
            let fd = central_diff(&mut net.params().to_vec(), i, &mut |p| {
                probe.params_mut().copy_from_slice(p);
                loss(&probe)
            });
            worst_net = worst_net.max(rel_err(grad[i], fd));
        }
    }

    let mut policy = Policy::new(&[1, 1, 2], vec![1.0, 0.5], &mut rng).unwrap();
    policy.net = Mlp::new_dense(&[1, 1, 2], Activation::Tanh, OutputKind::ScaledTanh, vec![1.0, 0.5], &mut rng).unwrap();
    policy.set_std_factor(0.5);
    let std = policy.std();
    let samples: Vec<PolicySample> = (0..16)
        .map(|_| {
            let obs = vec![rng.random_range(-1.0..1.0)];
            let mean = policy.mean(&obs).unwrap();
            let action: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + s * rng.random_range(-1.0..1.0)).collect();
            let lp = gaussian_log_prob(&action, &mean, &std) + rng.random_range(-0.3..0.3);
            PolicySample { obs, action, log_prob_old: lp, advantage: rng.random_range(-2.0..2.0) }
        })
        .collect();
    let mut grad = vec![0.0; 6];
    policy_loss_grad(&policy, &samples, 0.2, &mut grad).unwrap();
    let mut probe = policy.clone();
    let mut worst_ppo: f64 = 0.0;
    for i in 0..6 {
        let fd = central_diff(&mut policy.net.params().to_vec(), i, &mut |p| {
            probe.net.params_mut().copy_from_slice(p);
            policy_loss_grad(&probe, &samples, 0.2, &mut [0.0; 6]).unwrap().surrogate
        });
        worst_ppo = worst_ppo.max(rel_err(grad[i], fd));
    }
    outcome(
        worst_net <= 1e-5 && worst_ppo <= 1e-4,
        format!("max rel. error: nets {worst_net:.1e}, surrogate {worst_ppo:.1e}"),
    )
}

const TRAIN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EVAL_SEEDS: std::ops::Range<u64> = 1000..1040;
const BUDGET: u64 = 1_000_000;

/// Evaluation environment for the learning criteria.
fn desk_env() -> EnvConfig {
    let mut cfg = EnvConfig::default();
    cfg.f_plan = 16.0;
    cfg
}

/// Training adds random pushes on top of the evaluation environment.
fn desk_train_env() -> EnvConfig {
    let mut cfg = desk_env();
    cfg.push_probability = 0.15;
    cfg.push_types = vec![(0.0175, 4.0), (1.0, 0.4)];
    cfg
}

fn desk_ppo(seed: u64) -> PpoConfig {
    PpoConfig {
        seed,
        max_env_steps: BUDGET,
        sigma: SigmaSchedule { start: 0.2, end: 0.02, horizon: BUDGET },
        ..Default::default()
    }
}

struct DeskRun {
    seed: u64,
    policy: PolicyCheckpoint,
    mpc_rl: Vec<MetricsRow>,
    rl_only: Vec<MetricsRow>,
}

fn train_desk_runs() -> Vec<DeskRun> {
    let env = desk_train_env();
    let rl_scale = ExperimentParams::default().rl_action_scale;
    TRAIN_SEEDS
        .iter()
        .map(|&seed| {
            let mpc_rl = train(&desk_ppo(seed), &env, &TrainFiles::default()).unwrap();
            let rl_only = train(&desk_ppo(seed), &rl_only_config(&env, rl_scale), &TrainFiles::default()).unwrap();
            DeskRun { seed, policy: mpc_rl.checkpoint(), mpc_rl: mpc_rl.metrics, rl_only: rl_only.metrics }
        })
        .collect()
}

fn learning_effect(runs: &[DeskRun]) -> Outcome {
    let env = desk_env();
    let seeds: Vec<u64> = EVAL_SEEDS.collect();
    let base = tracking_error(&env, Controller::MpcOnly, &seeds, Execution::default()).unwrap();
    let ratios: Vec<f64> = runs
        .iter()
        .map(|r| tracking_error(&env, Controller::MpcRl(&r.policy), &seeds, Execution::default()).unwrap().mean_abs_error
            / base.mean_abs_error)
        .collect();
    let good = ratios.iter().filter(|r| **r <= 0.7).count();
    outcome(
        good >= 4,
        format!("MPC-only {:.4} m/s; MPC+RL / MPC ratios {ratios:.3?}; {good}/5 seeds <= 0.7", base.mean_abs_error),
    )
}

fn push_ordering(runs: &[DeskRun]) -> Outcome {
    let env = desk_env();
    let proto = PushProtocol::from_experiment(&ExperimentParams::default());
    let dirs = push_directions(8);
    let short = 0.0175;
    let exec = Execution::default();
    let mut mpc = Vec::new();
    let mut rl = Vec::new();
    for r in runs {
        mpc.extend(push_sweep(&env, Controller::MpcOnly, &proto, &dirs, short, &[r.seed], exec).unwrap());
        rl.extend(push_sweep(&env, Controller::MpcRl(&r.policy), &proto, &dirs, short, &[r.seed], exec).unwrap());
    }
    let a = mean_by_direction(&mpc, &dirs);
    let b = mean_by_direction(&rl, &dirs);
    let wins = a.iter().zip(&b).filter(|(m, p)| p >= m).count();
    outcome(wins >= 6, format!("{wins}/8 directions; mean F/mg MPC {a:.2?}, MPC+RL {b:.2?}"))
}

fn sample_efficiency(runs: &[DeskRun]) -> Outcome {
    let aucs: Vec<(f64, f64)> =
        runs.iter().map(|r| (learning_curve_auc(&r.mpc_rl), learning_curve_auc(&r.rl_only))).collect();
    let wins = aucs.iter().filter(|(a, b)| a > b).count();
    let shown: Vec<String> = aucs.iter().map(|(a, b)| format!("{a:.3e}/{b:.3e}")).collect();
    outcome(wins >= 4, format!("{wins}/5 seeds; AUC MPC+RL/RL-only {}", shown.join(", ")))
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = o.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {} s", l.as_secs()));
    println!(
        "criterion {id:>2} {name}: {} ({}; {:.1} s{budget})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report(1, "ALIP exactness", Some(secs(5)), alip_exactness),
        report(2, "orbit closure", Some(secs(5)), orbit_closure),
        report(3, "QP correctness", Some(secs(30)), qp_correctness),
        report(4, "MPC tracking on exact ALIP", Some(secs(30)), mpc_tracking),
        report(5, "zero-residual identity", None, zero_residual_identity),
        report(6, "reward checks", None, reward_checks),
        report(7, "gradient suite", Some(secs(60)), gradient_suite),
    ];
    let start = Instant::now();
    let runs = train_desk_runs();
    println!(
        "trained {} MPC+RL and RL-only policies at {BUDGET} env steps each in {:.0} s",
        runs.len(),
        start.elapsed().as_secs_f64()
    );
    results.push(report(8, "desk-scale learning effect", None, || learning_effect(&runs)));
    results.push(report(9, "push ordering (short push)", None, || push_ordering(&runs)));
    results.push(report(10, "sample-efficiency ordering", None, || sample_efficiency(&runs)));
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
