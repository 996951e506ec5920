//! Configuration-driven experiment runner behind the `nlsctrl` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Integrator, ProblemParams};
use crate::error::{Error, Result};
use crate::fields::Builtin;
use crate::io::{format_float, read_field, read_modal, write_control, write_modal};
use crate::saturation::{build_ladder, build_ladder_from, kappa_sweep, saturation_verdict};
use crate::spectral::{check_asymptotics, verify_mu_bound, SampledField, GRID_FACTOR};
use crate::steering::{newton_steer, random_near_ground, refined_residual, two_leg_steer, SteerOptions, SteerVerdict};
use crate::synthesis::{random_tangent, single_direction_control, solve_linearized_control};

#[derive(Parser, Debug)]
#[command(name = "nlsctrl", version, about = "Spectral control experiments for the bilinear Schrödinger equation")]
pub struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every random draw (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print only the verdict line.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Validate the configuration and print the resolved plan.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Eigenvalues, residuals and asymptotic remainders of `A_V`.
    Eigs,
    /// Saturation ladder and codimension test.
    Saturation {
        #[arg(long)]
        levels: Option<usize>,
        /// Start from these sine modes instead of `Q_c φ`.
        #[arg(long, value_delimiter = ',')]
        initial_modes: Option<Vec<usize>>,
    },
    /// Eigenvalue tracks of `A_κ` and their zero crossings.
    KappaSweep {
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, num_args = 2, allow_negative_numbers = true, value_names = ["LO", "HI"])]
        range: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Lower bound `k³|⟨μφ, φ_k⟩| ≥ c`.
    MuCheck {
        #[arg(long)]
        mu: Option<String>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Single-direction moment control of the uncoupled linear flow.
    MomentDemo {
        #[arg(long)]
        mu: Option<String>,
        #[arg(long)]
        moments: Option<usize>,
    },
    /// Exact control of the linearized flow onto a random tangent target.
    Linctrl {
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Newton steering between random neighbours of the ground state.
    Steer {
        #[arg(long)]
        two_leg: bool,
        #[arg(long)]
        psi0: Option<PathBuf>,
        #[arg(long)]
        psi1: Option<PathBuf>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConfigAction {
    /// Print every configuration key with its default value.
    DumpDefaults,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Built-in name or `file:<path>` to a grid file.
    pub potential: String,
    /// `default` for `2pκφ^{2p}`, otherwise like `potential`.
    pub coupling: String,
    pub fields: Vec<String>,
    pub kappa: f64,
    pub p: u32,
    pub horizon: f64,
    pub modes: usize,
    pub steps: usize,
    /// `midpoint`, `triple_jump`, `suzuki` or `kahan_li`.
    pub integrator: String,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            potential: "zero".into(),
            coupling: "default".into(),
            fields: ["one", "cos_pi", "cos_2pi", "x_sq"].iter().map(|s| s.to_string()).collect(),
            kappa: 0.5,
            p: 1,
            horizon: 1.0,
            modes: 16,
            steps: 2048,
            integrator: "suzuki".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, out: "out".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigsConfig {
    /// Galerkin residual accepted over the trusted range.
    pub residual_tol: f64,
}

impl Default for EigsConfig {
    fn default() -> Self {
        Self { residual_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationConfig {
    pub levels: usize,
    pub tol: f64,
    /// Empty: start from `Q_c φ`.
    pub initial_modes: Vec<usize>,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self { levels: 40, tol: 1e-8, initial_modes: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaSweepConfig {
    pub k_max: usize,
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    pub hf_tol: f64,
}

impl Default for KappaSweepConfig {
    fn default() -> Self {
        Self { k_max: 3, lo: -30.0, hi: 0.0, samples: 301, hf_tol: 1e-5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuCheckConfig {
    pub mu: String,
    pub k_max: usize,
    pub tol: f64,
}

impl Default for MuCheckConfig {
    fn default() -> Self {
        Self { mu: "x_sq".into(), k_max: 8, tol: 1e-12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentDemoConfig {
    pub mu: String,
    pub moments: usize,
    pub bins: usize,
    pub target_norm: f64,
    pub moment_tol: f64,
    pub terminal_tol: f64,
}

impl Default for MomentDemoConfig {
    fn default() -> Self {
        Self { mu: "x_sq".into(), moments: 8, bins: 64, target_norm: 1e-3, moment_tol: 1e-8, terminal_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinctrlConfig {
    pub bins: usize,
    pub target_norm: f64,
    pub tol: f64,
}

impl Default for LinctrlConfig {
    fn default() -> Self {
        Self { bins: 64, target_norm: 1e-3, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub bins: usize,
    pub delta: f64,
    /// `H³` radius of the random endpoints.
    pub radius: f64,
    pub two_leg: bool,
    /// Optional state files; empty draws a random endpoint.
    pub psi0: String,
    pub psi1: String,
}

impl Default for SteerConfig {
    fn default() -> Self {
        let o = SteerOptions::default();
        Self {
            tol: o.tol,
            max_iter: o.max_iter,
            bins: o.bins,
            delta: o.delta,
            radius: 1e-3,
            two_leg: false,
            psi0: String::new(),
            psi1: String::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub run: RunConfig,
    pub eigs: EigsConfig,
    pub saturation: SaturationConfig,
    pub kappa_sweep: KappaSweepConfig,
    pub mu_check: MuCheckConfig,
    pub moment_demo: MomentDemoConfig,
    pub linctrl: LinctrlConfig,
    pub steer: SteerConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    fn grid_size(&self) -> usize {
        GRID_FACTOR * self.problem.modes
    }

    fn field(&self, spec: &str) -> Result<SampledField> {
        let m = self.grid_size();
        if let Some(path) = spec.strip_prefix("file:") {
            let f = read_field(Path::new(path))?;
            if f.grid_size() != m {
                return Err(Error::Shape(format!("{path}: grid {} differs from 4N = {m}", f.grid_size())));
            }
            return Ok(f);
        }
        Ok(spec.parse::<Builtin>()?.sample(m))
    }

    fn integrator(&self) -> Result<Integrator> {
        match self.problem.integrator.as_str() {
            "midpoint" => Ok(Integrator::Midpoint),
            "triple_jump" => Ok(Integrator::TripleJump),
            "suzuki" => Ok(Integrator::Suzuki),
            "kahan_li" => Ok(Integrator::KahanLi),
            other => Err(Error::Parse(format!("unknown integrator '{other}'"))),
        }
    }

    pub fn params(&self) -> Result<ProblemParams> {
        let pc = &self.problem;
        let fields = pc.fields.iter().map(|f| self.field(f)).collect::<Result<Vec<_>>>()?;
        let mut params = ProblemParams::new(self.field(&pc.potential)?, fields, pc.kappa, pc.p, pc.horizon, pc.modes)?
            .with_steps(pc.steps)
            .with_integrator(self.integrator()?);
        if pc.coupling != "default" {
            params = params.with_coupling(self.field(&pc.coupling)?)?;
        }
        Ok(params)
    }
}

/// Result of one subcommand.
pub struct Outcome {
    pub pass: bool,
    pub verdict: String,
    pub details: String,
    pub files: Vec<PathBuf>,
}

fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse(_) | Error::Io(_) | Error::Invalid(_) | Error::Shape(_) | Error::Aliasing { .. } => 2,
        _ => 1,
    }
}

/// Runs the CLI on `args` and returns the exit code; output goes to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    if let Command::Config { action: ConfigAction::DumpDefaults } = cli.command {
        print!("{}", ExperimentConfig::default().to_toml());
        return 0;
    }
    if cli.dry_run {
        return match plan(&cli, &cfg) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("config error: {e}");
                2
            }
        };
    }
    match execute(&cli.command, &cfg) {
        Ok(outcome) => {
            if !cli.quiet {
                print!("{}", outcome.details);
                for f in &outcome.files {
                    println!("wrote {}", f.display());
                }
            }
            println!("{}", outcome.verdict);
            if outcome.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    }
}

/// Reads the config file and applies global and subcommand flags.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.run.out = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    match &cli.command {
        Command::Saturation { levels, initial_modes } => {
            if let Some(l) = levels {
                cfg.saturation.levels = *l;
            }
            if let Some(m) = initial_modes {
                cfg.saturation.initial_modes = m.clone();
            }
        }
        Command::KappaSweep { k_max, range, samples } => {
            if let Some(k) = k_max {
                cfg.kappa_sweep.k_max = *k;
            }
            if let Some(r) = range {
                cfg.kappa_sweep.lo = r[0];
                cfg.kappa_sweep.hi = r[1];
            }
            if let Some(s) = samples {
                cfg.kappa_sweep.samples = *s;
            }
        }
        Command::MuCheck { mu, k_max } => {
            if let Some(m) = mu {
                cfg.mu_check.mu = normalize_field_name(m);
            }
            if let Some(k) = k_max {
                cfg.mu_check.k_max = *k;
            }
        }
        Command::MomentDemo { mu, moments } => {
            if let Some(m) = mu {
                cfg.moment_demo.mu = normalize_field_name(m);
            }
            if let Some(k) = moments {
                cfg.moment_demo.moments = *k;
            }
        }
        Command::Linctrl { bins } => {
            if let Some(b) = bins {
                cfg.linctrl.bins = *b;
            }
        }
        Command::Steer { two_leg, psi0, psi1 } => {
            cfg.steer.two_leg |= *two_leg;
            if let Some(p) = psi0 {
                cfg.steer.psi0 = p.display().to_string();
            }
            if let Some(p) = psi1 {
                cfg.steer.psi1 = p.display().to_string();
            }
        }
        Command::Eigs | Command::Config { .. } => {}
    }
    Ok(cfg)
}

/// `x^2` and `x²` are accepted as aliases of `x_sq`.
fn normalize_field_name(s: &str) -> String {
    match s {
        "x^2" | "x²" => "x_sq".into(),
        other => other.into(),
    }
}

fn plan(cli: &Cli, cfg: &ExperimentConfig) -> Result<String> {
    let params = cfg.params()?;
    let mut out = String::new();
    let _ = writeln!(out, "command = {:?}", cli.command);
    let _ = writeln!(out, "out = {}", cfg.run.out);
    let _ = writeln!(out, "seed = {}", cfg.run.seed);
    let _ = writeln!(out, "modes = {} grid = {} steps = {}", params.truncation(), params.grid_size(), params.steps);
    let _ = writeln!(out, "channels = {}", params.channels());
    out.push_str("--- resolved config ---\n");
    out.push_str(&cfg.to_toml());
    Ok(out)
}

fn write_out(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    files.push(path);
    Ok(())
}

fn verdict_line(name: &str, pass: bool, summary: &str) -> String {
    format!("{name}: {} ({summary})", if pass { "PASS" } else { "FAIL" })
}

pub fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = PathBuf::from(&cfg.run.out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut files = Vec::new();
    let mut details = String::new();
    let (pass, verdict) = match command {
        Command::Eigs => {
            let params = cfg.params()?;
            let op = params.operator();
            let asym = check_asymptotics(op);
            let mut csv = String::from("k,lambda,residual,r_k\n");
            let mut worst: f64 = 0.0;
            for k in 1..=op.truncation() {
                let res = op.residual(k);
                let r = asym.residuals.get(k - 1).map(|&r| format_float(r)).unwrap_or_default();
                if k <= op.trusted() {
                    worst = worst.max(res);
                }
                let _ = writeln!(csv, "{k},{},{},{r}", format_float(op.eigenvalue(k)), format_float(res));
            }
            write_out(&out, "eigs.csv", &csv, &mut files)?;
            let sum = asym.partial_sums.last().copied().unwrap_or(0.0);
            let _ = writeln!(details, "sum r_k^2 over k <= {} = {}", op.trusted(), format_float(sum));
            let _ = writeln!(details, "asymptotics plateau: {} ({})", asym.verdict, asym.note);
            let pass = worst <= cfg.eigs.residual_tol && op.orthonormality_defect() < 1e-10;
            (pass, verdict_line("eigs", pass, &format!("max trusted residual {worst:.3e}")))
        }
        Command::Saturation { .. } => {
            let params = cfg.params()?;
            let sc = &cfg.saturation;
            let ladder = if sc.initial_modes.is_empty() {
                build_ladder(&params, sc.levels, sc.tol)
            } else {
                let n = params.truncation();
                let mut init = nalgebra::DMatrix::zeros(2 * n, sc.initial_modes.len());
                for (c, &k) in sc.initial_modes.iter().enumerate() {
                    if k == 0 || k > n {
                        return Err(Error::Invalid(format!("initial mode {k} outside 1..={n}")));
                    }
                    init[(k - 1, c)] = 1.0;
                }
                build_ladder_from(&init, &params, sc.levels, sc.tol)
            };
            let v = saturation_verdict(&ladder, &params, sc.tol);
            let mut csv = String::from("level,rank\n");
            for (j, r) in ladder.ranks.iter().enumerate() {
                let _ = writeln!(csv, "{j},{r}");
            }
            write_out(&out, "saturation.csv", &csv, &mut files)?;
            if let Some(d) = &v.missed {
                write_out(&out, "saturation_missed.txt", &write_modal(d), &mut files)?;
            }
            let _ = writeln!(details, "ranks = {:?} ({:?})", ladder.ranks, ladder.status);
            let _ = writeln!(details, "tangent rank = {} codim = {}", v.tangent_rank, v.codim);
            (v.saturating, verdict_line("saturation", v.saturating, &format!("codim {}", v.codim)))
        }
        Command::KappaSweep { .. } => {
            let kc = &cfg.kappa_sweep;
            let sw = kappa_sweep(kc.k_max, kc.lo, kc.hi, kc.samples, cfg.problem.modes)?;
            write_out(&out, "kappa_sweep.csv", &sw.sweep_csv(), &mut files)?;
            write_out(&out, "kappa_crossings.csv", &sw.crossings_csv(), &mut files)?;
            for c in &sw.crossings {
                let _ = writeln!(details, "crossing k={} kappa*={}", c.k, format_float(c.kappa_star));
            }
            let hf = sw.max_hf_error();
            let pass = sw.strictly_increasing && hf <= kc.hf_tol;
            (pass, verdict_line("kappa-sweep", pass, &format!("{} crossings, max HF error {hf:.3e}", sw.crossings.len())))
        }
        Command::MuCheck { .. } => {
            let params = cfg.params()?;
            let mc = &cfg.mu_check;
            let mu = cfg.field(&mc.mu)?;
            let rep = verify_mu_bound(&mu, params.operator(), mc.k_max, mc.tol)?;
            let mut csv = String::from("k,coefficient,scaled\n");
            for r in &rep.rows {
                let _ = writeln!(csv, "{},{},{}", r.k, format_float(r.coefficient), format_float(r.scaled));
            }
            write_out(&out, "mu_check.csv", &csv, &mut files)?;
            if let Some(k) = rep.zero_at {
                let _ = writeln!(details, "structural zero at k = {k}");
            }
            let pass = rep.verdict.is_pass();
            (pass, verdict_line("mu-check", pass, &format!("c_est {} at k={}", format_float(rep.c_est), rep.argmin)))
        }
        Command::MomentDemo { .. } => {
            let params = cfg.params()?;
            let md = &cfg.moment_demo;
            let mu = cfg.field(&md.mu)?;
            let phi = params.phi();
            let target = random_tangent(&mut rng, &phi, md.moments, md.target_norm);
            let res = single_direction_control(&target, &params, &mu, params.truncation(), md.bins)?;
            let mut csv = String::from("k,omega,re_m,im_m,residual\n");
            for (k, ((w, m), r)) in res.spec.frequencies.iter().zip(&res.spec.targets).zip(&res.moment_residuals).enumerate() {
                let _ = writeln!(csv, "{},{},{},{},{}", k + 1, format_float(*w), format_float(m.re), format_float(m.im), format_float(*r));
            }
            write_out(&out, "moment_demo.csv", &csv, &mut files)?;
            write_out(&out, "moment_demo_control.txt", &write_control(&res.control), &mut files)?;
            write_out(&out, "moment_demo_target.txt", &write_modal(&target), &mut files)?;
            if let Some(t) = res.spec.tail_ignored {
                let _ = writeln!(details, "TAIL_IGNORED: {t:.3e}");
            }
            let worst = res.moment_residuals.iter().copied().fold(0.0, f64::max);
            let pass = worst < md.moment_tol && res.terminal_error < md.terminal_tol;
            (pass, verdict_line("moment-demo", pass, &format!("max moment residual {worst:.3e}, terminal error {:.3e}", res.terminal_error)))
        }
        Command::Linctrl { .. } => {
            let params = cfg.params()?;
            let lc = &cfg.linctrl;
            let target = random_tangent(&mut rng, &params.phi(), params.truncation(), lc.target_norm);
            write_out(&out, "linctrl_target.txt", &write_modal(&target), &mut files)?;
            match solve_linearized_control(&target, &params, lc.bins, None, lc.tol) {
                Ok(sol) => {
                    write_out(&out, "linctrl_control.txt", &write_control(&sol.control), &mut files)?;
                    write_out(&out, "linctrl_gram.txt", &sol.report.to_string(), &mut files)?;
                    (true, verdict_line("linctrl", true, &format!("residual {:.3e}", sol.report.residual)))
                }
                Err(Error::ControlDeficient { residual, direction }) => {
                    let d = crate::spectral::ModalState::from_stacked(&direction);
                    write_out(&out, "linctrl_unreachable.txt", &write_modal(&d), &mut files)?;
                    (false, verdict_line("linctrl", false, &format!("CONTROL_DEFICIENT, residual {residual:.3e}")))
                }
                Err(e) => return Err(e),
            }
        }
        Command::Steer { .. } => {
            let params = cfg.params()?;
            let sc = &cfg.steer;
            let phi = params.phi();
            let n = params.truncation();
            let mut endpoint = |path: &str| -> Result<crate::spectral::ModalState> {
                if path.is_empty() {
                    Ok(random_near_ground(&mut rng, &phi, sc.radius))
                } else {
                    read_modal(Path::new(path), n)
                }
            };
            let psi0 = endpoint(&sc.psi0)?;
            let psi1 = endpoint(&sc.psi1)?;
            let opts = SteerOptions { tol: sc.tol, max_iter: sc.max_iter, bins: sc.bins, delta: sc.delta, ..SteerOptions::default() };
            write_out(&out, "steer_psi0.txt", &write_modal(&psi0), &mut files)?;
            write_out(&out, "steer_psi1.txt", &write_modal(&psi1), &mut files)?;
            if sc.two_leg {
                let rep = two_leg_steer(&psi0, &psi1, &params, &opts)?;
                write_out(&out, "steer_control.txt", &write_control(&rep.control), &mut files)?;
                let mut json = serde_json::to_value(&rep).expect("serializable");
                json["control_file"] = "steer_control.txt".into();
                write_out(&out, "steer.json", &serde_json::to_string_pretty(&json).expect("json"), &mut files)?;
                let pass = rep.verdict == SteerVerdict::Converged;
                let mut summary = format!("two-leg {}, end-to-end residual {:.3e}", rep.verdict.label(), rep.end_to_end);
                if let Some(leg) = &rep.failed_leg {
                    summary.push_str(&format!(", failed {leg}"));
                }
                (pass, verdict_line("steer", pass, &summary))
            } else {
                let rep = newton_steer(&psi0, &psi1, &params, &opts)?;
                write_out(&out, "steer_control.txt", &write_control(&rep.final_control), &mut files)?;
                let mut json = serde_json::to_value(&rep).expect("serializable");
                json["control_file"] = "steer_control.txt".into();
                let pass = rep.verdict == SteerVerdict::Converged;
                if pass {
                    let fine = refined_residual(&psi0, &psi1, &rep.final_control, &params, 2)?;
                    json["refined_residual"] = fine.into();
                    let _ = writeln!(details, "2x refined residual = {fine:.3e}");
                }
                write_out(&out, "steer.json", &serde_json::to_string_pretty(&json).expect("json"), &mut files)?;
                for (i, r) in rep.residual_history.iter().enumerate() {
                    let _ = writeln!(details, "iter {i}: residual {r:.3e}");
                }
                (pass, verdict_line("steer", pass, &format!("{} after {} iterations, residual {:.3e}", rep.verdict.label(), rep.iterations, rep.residual())))
            }
        }
        Command::Config { .. } => (true, String::new()),
    };
    Ok(Outcome { pass, verdict, details, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn unknown_key_is_named() {
        match ExperimentConfig::parse("[problem]\nkapa = 1.0\n") {
            Err(Error::Parse(msg)) => assert!(msg.contains("kapa")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = ExperimentConfig::parse("[problem]\nkappa = 1.0\n").unwrap();
        assert_eq!(cfg.problem.kappa, 1.0);
        assert_eq!(cfg.problem.modes, 16);
        assert_eq!(cfg.steer.bins, 128);
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["nlsctrl", "--seed", "9", "kappa-sweep", "--k-max", "2", "--range", "-5", "1"]).unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.kappa_sweep.k_max, 2);
        assert_eq!((cfg.kappa_sweep.lo, cfg.kappa_sweep.hi), (-5.0, 1.0));
    }

    #[test]
    fn unknown_field_name_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.problem.fields = vec!["sinh".into()];
        let e = cfg.params().unwrap_err();
        assert_eq!(error_exit_code(&e), 2);
    }
}
