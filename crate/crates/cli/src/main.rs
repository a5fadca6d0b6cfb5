//! `srsm`: synthesize, verify and inspect stability certificates.
//!
//! Exit codes: 0 certified, 1 usage or I/O error, 2 timeout or unknown, 3 not certified.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use ndarray::{Array1, Array2};
use serde::Deserialize;
use srsm::certificate::export_sublevel_mask;
use srsm::learner::{Checkpoint, IterationReport, StopReason};
use srsm::policy::{LinearPolicy, Policy};
use srsm::{recheck_with_policy, simulate, Certificate, CertifiedPolicy, Grid, Mlp, SynthesisOutcome, SystemModel};

use config::{load_system, RunConfig, RunFlags};

const EXIT_CERTIFIED: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_UNKNOWN: u8 = 2;
const EXIT_NOT_CERTIFIED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "srsm",
    version,
    about = "Learn and verify stabilizing ranking supermartingales"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a policy, then alternate training and verification until certified.
    Synthesize {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Certify a given policy, training only the supermartingale.
    Verify {
        #[command(flatten)]
        run: RunFlags,
        /// Network JSON, linear policy JSON, or a certificate.
        #[arg(long)]
        policy: PathBuf,
        /// Starting supermartingale network.
        #[arg(long)]
        value: Option<PathBuf>,
    },
    /// Print the stabilization-time bounds of a certificate at a state.
    Bounds {
        #[command(flatten)]
        cert: CertArgs,
        /// Initial state, comma separated; defaults to the origin.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
    },
    /// Simulate the certified policy and compare with the bounds.
    Simulate {
        #[command(flatten)]
        cert: CertArgs,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the value lattice and the sublevel-set mask as CSV.
    Export {
        #[command(flatten)]
        cert: CertArgs,
        #[arg(long)]
        out: PathBuf,
        /// Points (lattice) and cells (mask) per axis.
        #[arg(long, default_value_t = 200)]
        resolution: usize,
    },
}

#[derive(clap::Args)]
struct CertArgs {
    #[arg(long)]
    certificate: PathBuf,
    /// Needed when the certificate was produced for an environment file.
    #[arg(long)]
    env_spec: Option<PathBuf>,
    /// Trust the stored constants instead of re-running verification.
    #[arg(long)]
    no_recheck: bool,
    #[arg(long, env = "SRSM_WORKERS")]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_CERTIFIED };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synthesize { run } => {
            let cfg = RunConfig::resolve(&run, None)?;
            init_workers(cfg.workers)?;
            cmd_synthesize(&cfg)
        }
        Command::Verify { run, policy, value } => cmd_verify(&run, &policy, value.as_deref()),
        Command::Bounds { cert, x0 } => {
            init_workers(cert.workers)?;
            cmd_bounds(&cert, x0.as_deref())
        }
        Command::Simulate {
            cert,
            x0,
            n,
            horizon,
            seed,
        } => {
            init_workers(cert.workers)?;
            cmd_simulate(&cert, x0.as_deref(), n, horizon, seed)
        }
        Command::Export { cert, out, resolution } => {
            init_workers(cert.workers)?;
            cmd_export(&cert, &out, resolution)
        }
    }
}

fn init_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes per-iteration reports and checkpoints under `out`.
fn recorder(out: &Path) -> Result<impl FnMut(&IterationReport<f64>, &Checkpoint<f64>) + '_> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(move |report: &IterationReport<f64>, ck: &Checkpoint<f64>| {
        let path = dir.join(format!("iteration_{:03}.json", report.iteration));
        if let Err(e) = write_json(&path, ck) {
            log::warn!("could not write checkpoint: {e:#}");
        }
    })
}

/// Writes the artifacts of a finished loop and maps it to an exit code.
fn finish(outcome: &SynthesisOutcome, sys: &SystemModel, out: &Path, failure_code: u8) -> Result<u8> {
    write_json(&out.join("iterations.json"), &outcome.reports)?;
    if let Some(cert) = &outcome.certificate {
        cert.save(out.join("certificate.json"))?;
        let f = BufWriter::new(File::create(out.join("value_grid.csv"))?);
        cert.contour_export(sys, 200, f)?;
        println!(
            "certified: p = {:.6}, epsilon = {:.6e}, delta = {:.6e}",
            cert.p, cert.epsilon, cert.delta
        );
        println!("certificate written to {}", out.join("certificate.json").display());
        return Ok(EXIT_CERTIFIED);
    }
    let last = Checkpoint {
        iteration: outcome.reports.len(),
        policy: outcome.policy.network().cloned(),
        v: outcome.v.clone(),
        buffer: outcome.buffer.clone(),
    };
    write_json(&out.join("last_state.json"), &last)?;
    if let Some(o) = &outcome.last_outcome {
        write_json(&out.join("verify_report.json"), o)?;
    }
    match outcome.stop {
        Some(StopReason::Timeout) => {
            println!("unknown: timeout reached after {} iterations", outcome.reports.len());
            Ok(EXIT_UNKNOWN)
        }
        _ => {
            println!("not certified after {} iterations", outcome.reports.len());
            Ok(failure_code)
        }
    }
}

fn cmd_synthesize(cfg: &RunConfig) -> Result<u8> {
    let sys = cfg.system()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    info!("synthesizing for `{}` with tau = {}", sys.id(), cfg.synthesis.tau);
    let mut rec = recorder(&out)?;
    let outcome = srsm::synthesize(&sys, &cfg.synthesis, &mut rec)?;
    if let Some(net) = outcome.policy.network() {
        net.save(out.join("policy.json"))?;
    }
    outcome.v.save(out.join("value.json"))?;
    finish(&outcome, &sys, &out, EXIT_UNKNOWN)
}

/// `u = gain·x + offset` with an optional Lipschitz constant.
#[derive(Deserialize)]
struct LinearPolicyFile {
    gain: Vec<Vec<f64>>,
    offset: Option<Vec<f64>>,
    #[serde(rename = "L_pi")]
    l_pi: Option<f64>,
    name: Option<String>,
}

enum LoadedPolicy {
    Network(Mlp),
    Linear(LinearPolicy<f64>, String, f64),
}

fn load_policy(path: &Path) -> Result<(LoadedPolicy, Option<Certificate>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("V").is_some() && value.get("policy").is_some() {
        let cert = Certificate::from_json(&text)?;
        return match &cert.policy {
            CertifiedPolicy::Network { net } => Ok((LoadedPolicy::Network(net.clone()), Some(cert))),
            CertifiedPolicy::External { name, .. } => {
                bail!("certificate policy `{name}` is external; pass the policy file itself")
            }
        };
    }
    if value.get("gain").is_some() {
        let spec: LinearPolicyFile = serde_json::from_value(value)?;
        let rows = spec.gain.len();
        let cols = spec.gain.first().map_or(0, Vec::len);
        if spec.gain.iter().any(|r| r.len() != cols) {
            bail!("gain rows have different lengths");
        }
        let gain = Array2::from_shape_vec((rows, cols), spec.gain.concat())?;
        let offset = Array1::from(spec.offset.unwrap_or_else(|| vec![0.0; rows]));
        let Some(l_pi) = spec.l_pi else {
            bail!("a linear policy must state its Lipschitz constant `L_pi`");
        };
        let policy = LinearPolicy::new(gain, offset, Some(l_pi))?;
        let name = spec.name.unwrap_or_else(|| "linear".into());
        return Ok((LoadedPolicy::Linear(policy, name, l_pi), None));
    }
    Ok((LoadedPolicy::Network(Mlp::from_json(&text)?), None))
}

fn cmd_verify(flags: &RunFlags, policy_path: &Path, value_path: Option<&Path>) -> Result<u8> {
    let (policy, cert) = load_policy(policy_path)?;
    let mut base = RunConfig::default();
    let mut initial_v = None;
    if let Some(c) = &cert {
        base.env = Some(c.env.clone());
        let s = &mut base.synthesis;
        s.tau = c.tau;
        s.m = c.m;
        s.noise_cells_per_dim = c.noise.cells_per_dim;
        s.step_cells_per_dim = c.noise.step_cells_per_dim;
        s.bound_mode = c.noise.mode;
        s.local_refinement = c.local_refinement;
        initial_v = Some(c.v.clone());
    }
    let mut cfg = RunConfig::resolve(flags, Some(base))?;
    if flags.env_spec.is_some() && flags.env.is_none() {
        cfg.env = None;
    }
    init_workers(cfg.workers)?;
    if let Some(p) = value_path {
        initial_v = Some(Mlp::load(p).with_context(|| format!("loading {}", p.display()))?);
    }
    let sys = cfg.system()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut rec = recorder(&out)?;
    let outcome = match &policy {
        LoadedPolicy::Network(net) => {
            check_shape(net, &sys)?;
            srsm::verify_fixed_policy(
                net,
                CertifiedPolicy::Network { net: net.clone() },
                &sys,
                &cfg.synthesis,
                initial_v,
                &mut rec,
            )?
        }
        LoadedPolicy::Linear(p, name, l_pi) => {
            check_shape(p, &sys)?;
            srsm::verify_fixed_policy(
                p,
                CertifiedPolicy::External {
                    name: name.clone(),
                    l_pi: *l_pi,
                },
                &sys,
                &cfg.synthesis,
                initial_v,
                &mut rec,
            )?
        }
    };
    outcome.v.save(out.join("value.json"))?;
    finish(&outcome, &sys, &out, EXIT_NOT_CERTIFIED)
}

fn check_shape(p: &dyn Policy<f64>, sys: &SystemModel) -> Result<()> {
    if p.state_dim() != sys.state_dim() || p.action_dim() != sys.action_dim() {
        bail!(
            "policy maps {} states to {} actions; the system has {} and {}",
            p.state_dim(),
            p.action_dim(),
            sys.state_dim(),
            sys.action_dim()
        );
    }
    Ok(())
}

/// Loads a certificate and its system, re-running verification unless told not to.
fn load_certificate(args: &CertArgs) -> Result<(Certificate, SystemModel)> {
    let cert =
        Certificate::load(&args.certificate).with_context(|| format!("loading {}", args.certificate.display()))?;
    let sys = match &args.env_spec {
        Some(p) => load_system(None, Some(p))?,
        None => load_system(Some(&cert.env), None)?,
    };
    if !args.no_recheck {
        let net = cert
            .policy
            .network()
            .context("certificates with external policies can only be used with --no-recheck")?;
        let report = recheck_with_policy(&cert, &sys, net)?;
        if !report.ok {
            bail!("certificate failed the recheck: {}", report.reasons.join("; "));
        }
        info!("certificate rechecked");
    }
    Ok((cert, sys))
}

fn parse_x0(x0: Option<&str>, dim: usize) -> Result<Vec<f64>> {
    let Some(s) = x0 else {
        return Ok(vec![0.0; dim]);
    };
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing x0 `{s}`"))?;
    if v.len() != dim {
        bail!("x0 has {} components, the system has {dim}", v.len());
    }
    Ok(v)
}

fn cmd_bounds(args: &CertArgs, x0: Option<&str>) -> Result<u8> {
    let (cert, sys) = load_certificate(args)?;
    let x0 = parse_x0(x0, sys.state_dim())?;
    if !sys.state_space().contains(&x0) {
        bail!("x0 lies outside the state space");
    }
    println!("V(x0) = {:.12e}", cert.v.eval_scalar(&x0)?);
    println!("E[Out] <= {:.12e}", cert.expected_out_bound(&x0)?);
    for t in [10.0, 100.0, 1000.0] {
        println!("P[Out >= {t}] <= {:.12e}", cert.tail_out_bound(&x0, t)?);
    }
    Ok(EXIT_CERTIFIED)
}

fn cmd_simulate(args: &CertArgs, x0: Option<&str>, n: usize, horizon: usize, seed: u64) -> Result<u8> {
    let (cert, sys) = load_certificate(args)?;
    let x0 = parse_x0(x0, sys.state_dim())?;
    let policy = cert.policy.network().context("simulation needs a network policy")?;
    let report = simulate(policy, &sys, &x0, n, horizon, seed)?;
    let summary = serde_json::json!({
        "trajectories": n,
        "horizon": horizon,
        "mean_out": report.mean_out(),
        "expected_out_bound": cert.expected_out_bound(&x0)?,
        "tail_fraction": report.tail_fraction(),
        "outside_at_horizon": report.outside_at_horizon,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(EXIT_CERTIFIED)
}

fn cmd_export(args: &CertArgs, out: &Path, resolution: usize) -> Result<u8> {
    let (cert, sys) = load_certificate(args)?;
    if resolution < 2 {
        bail!("resolution must be at least 2");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut f = BufWriter::new(File::create(out.join("value_lattice.csv"))?);
    cert.contour_export(&sys, resolution, &mut f)?;
    f.flush()?;
    // A grid with `resolution` cells along the widest axis.
    let n = sys.state_dim() as f64;
    let widest = sys.state_space().widths().into_iter().fold(0.0, f64::max);
    let tau = widest * n / (2.0 * resolution as f64) * (1.0 + 1e-9);
    let grid = Grid::build(sys.state_space().clone(), tau, srsm::grid::DEFAULT_CELL_BUDGET)?;
    let mut f = BufWriter::new(File::create(out.join("sublevel_mask.csv"))?);
    export_sublevel_mask(&cert.v, &grid, cert.m, &mut f)?;
    f.flush()?;
    println!(
        "wrote {} and {}",
        out.join("value_lattice.csv").display(),
        out.join("sublevel_mask.csv").display()
    );
    Ok(EXIT_CERTIFIED)
}
