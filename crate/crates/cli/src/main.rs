use std::path::PathBuf;
use std::process::ExitCode;

use alip_stepper::config::{ConfigError, RunConfig};
use alip_stepper::env::EnvError;
use alip_stepper::experiments::{self as ex, Controller, ExperimentError, PushProtocol};
use alip_stepper::mpc::MpcError;
use alip_stepper::policy::PolicyCheckpoint;
use alip_stepper::ppo::{self, PpoError, TrainFiles};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Print the periodic orbit for the configured velocity.
    Orbit,
    /// Train the residual policy.
    Train,
    /// Velocity-profile tracking, MPC vs MPC+RL.
    Track,
    /// Largest survived push per direction and duration.
    Push,
    /// Completed turns at a constant yaw rate.
    Turn,
    /// Tracking on each configured slope.
    Slope,
    /// Learning curves of MPC+RL vs RL-only.
    Compare,
}

#[derive(Debug, Parser)]
#[command(name = "alip-stepper", version, about = "Residual footstep planning experiments on an ALIP proxy")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `ppo.seed` and `experiment.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSVs and checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Solver(String),
    Diverged(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn classify_env(e: &EnvError) -> CliError {
    match e {
        EnvError::InvalidConfig(_) | EnvError::Mpc(MpcError::InvalidConfig(_)) => CliError::Config(e.to_string()),
        EnvError::Mpc(_) => CliError::Solver(e.to_string()),
        _ => CliError::Other(e.to_string()),
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match &e {
            PpoError::InvalidConfig(_) => CliError::Config(e.to_string()),
            PpoError::NonFiniteLoss { .. } => CliError::Diverged(e.to_string()),
            PpoError::Env(env) => classify_env(env),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Env(env) => classify_env(&env),
            ExperimentError::Ppo(p) => p.into(),
            ExperimentError::Alip(a) => CliError::Solver(a.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    meta: Vec<String>,
}

impl Run {
    fn policy(&self) -> Result<PolicyCheckpoint, CliError> {
        let path = self
            .cfg
            .experiment
            .policy
            .as_ref()
            .ok_or_else(|| CliError::Config("experiment.policy is required for this command".into()))?;
        PolicyCheckpoint::load(path).map_err(|e| CliError::Config(format!("{path:?}: {e}")))
    }

    fn write(&self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        ex::write_csv(&path, &self.meta, header, rows)?;
        Ok(path)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.ppo.seed = seed;
        cfg.experiment.seeds = vec![seed];
    }
    let meta = vec![
        format!("command = {:?}", cli.command).to_lowercase(),
        format!("config = {}", cli.config.display()),
        format!("config_hash = {}", cfg.hash()),
        format!("seeds = {:?}", cfg.experiment.seeds),
    ];
    if cli.command != Command::Orbit {
        std::fs::create_dir_all(&cli.out)?;
    }
    let r = Run { cfg, out: cli.out.clone(), meta };
    match cli.command {
        Command::Orbit => orbit(&r),
        Command::Train => train(&r),
        Command::Track => track(&r),
        Command::Push => push(&r),
        Command::Turn => turn(&r),
        Command::Slope => slope(&r),
        Command::Compare => compare(&r),
    }
}

fn orbit(r: &Run) -> Result<(), CliError> {
    let (vx, vy, w) = r.cfg.experiment.orbit_velocity;
    let o = ex::orbit_report(&r.cfg.env.params, vx, vy, w)?;
    println!("L_x_main = {:.9}", o.lx_main);
    println!("x_des = {:.9}", o.x_des);
    println!("y_des = {:.9}", o.y_des);
    println!("L_y_des = {:.9}", o.ly_des);
    println!("u_x = {:.9}", o.foothold_x);
    println!("closure_residual = {:.3e}", o.closure_residual);
    Ok(())
}

fn train(r: &Run) -> Result<(), CliError> {
    let files = TrainFiles { dir: Some(r.out.clone()), meta: r.meta.clone(), resume: r.cfg.experiment.resume.clone() };
    let out = ppo::train(&r.cfg.ppo, &r.cfg.env, &files)?;
    let last = out.metrics.last();
    println!(
        "trained {} env steps over {} iterations; final mean return {:.3}",
        out.env_steps,
        out.metrics.len(),
        last.map_or(f64::NAN, |m| m.mean_return)
    );
    println!("wrote {}", r.out.join(ppo::POLICY_FILE).display());
    Ok(())
}

fn print_tracking(label: &str, runs: &[ex::TrackComparison]) {
    let mpc = ex::mean_step_error(runs.iter().map(|c| &c.mpc));
    let rl = ex::mean_step_error(runs.iter().map(|c| &c.mpc_rl));
    println!("{label}mean |L_y error|/(m z_H): mpc {mpc:.4} m/s, mpc+rl {rl:.4} m/s");
}

fn track(r: &Run) -> Result<(), CliError> {
    let policy = r.policy()?;
    let e = &r.cfg.experiment;
    let runs = ex::track(&r.cfg.env, &policy, &e.velocity_profile, e.track_duration, &e.seeds, r.cfg.ppo.execution)?;
    let rows: Vec<String> = runs.iter().flat_map(|c| c.rows()).collect();
    let path = r.write("track.csv", ex::TRACK_HEADER, &rows)?;
    print_tracking("", &runs);
    println!("wrote {}", path.display());
    Ok(())
}

fn push(r: &Run) -> Result<(), CliError> {
    let policy = r.policy()?;
    let e = &r.cfg.experiment;
    let proto = PushProtocol::from_experiment(e);
    let dirs = ex::push_directions(e.push_directions);
    let mut rows = Vec::new();
    for &d in &e.push_durations {
        let mpc = ex::push_sweep(&r.cfg.env, Controller::MpcOnly, &proto, &dirs, d, &e.seeds, r.cfg.ppo.execution)?;
        let rl = ex::push_sweep(&r.cfg.env, Controller::MpcRl(&policy), &proto, &dirs, d, &e.seeds, r.cfg.ppo.execution)?;
        let (a, b) = (ex::mean_by_direction(&mpc, &dirs), ex::mean_by_direction(&rl, &dirs));
        let wins = a.iter().zip(&b).filter(|(m, p)| p >= m).count();
        println!("push {d} s: mpc+rl >= mpc in {wins}/{} directions", dirs.len());
        rows.extend(mpc.iter().chain(&rl).map(|p| p.row()));
    }
    let path = r.write("push.csv", ex::PUSH_HEADER, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn turn(r: &Run) -> Result<(), CliError> {
    let policy = r.policy()?;
    let e = &r.cfg.experiment;
    let mut rows = Vec::new();
    for c in [Controller::MpcOnly, Controller::MpcRl(&policy)] {
        let mut total = 0;
        for &seed in &e.seeds {
            let t = ex::turn_run(&r.cfg.env, c, e.turn_rate, e.turn_velocity, e.turn_steps, seed)?;
            total += t.turns;
            rows.push(t.row());
        }
        println!("{}: mean completed turns {:.2}", c.label(), total as f64 / e.seeds.len() as f64);
    }
    let path = r.write("turn.csv", ex::TURN_HEADER, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn slope(r: &Run) -> Result<(), CliError> {
    let policy = r.policy()?;
    let e = &r.cfg.experiment;
    for (i, &s) in e.slopes.iter().enumerate() {
        let mut env = r.cfg.env.clone();
        env.proxy.slope = s;
        let runs = ex::track(&env, &policy, &e.velocity_profile, e.track_duration, &e.seeds, r.cfg.ppo.execution)?;
        let rows: Vec<String> = runs.iter().flat_map(|c| c.rows()).collect();
        let mut meta_extra = r.meta.clone();
        meta_extra.push(format!("slope = {s}"));
        let path = r.out.join(format!("track_slope_{i}.csv"));
        ex::write_csv(&path, &meta_extra, ex::TRACK_HEADER, &rows)?;
        print_tracking(&format!("slope {s:.4} rad: "), &runs);
    }
    Ok(())
}

fn compare(r: &Run) -> Result<(), CliError> {
    let e = &r.cfg.experiment;
    let mut rows = Vec::new();
    for &seed in &e.seeds {
        let c = ex::compare_sample_efficiency(&r.cfg.env, &r.cfg.ppo, e.rl_action_scale, seed)?;
        println!(
            "seed {seed}: AUC mpc+rl {:.4e}, rl-only {:.4e}",
            ex::learning_curve_auc(&c.mpc_rl),
            ex::learning_curve_auc(&c.rl_only)
        );
        rows.extend(c.rows());
    }
    let path = r.write("compare.csv", ex::COMPARE_HEADER, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
