use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dro_opf::case::{load_case, Case};
use dro_opf::dataset::{ingest_dataset, ForecastErrorDataset};
use dro_opf::dro::{log_grid, RiskConfig};
use dro_opf::linearization::{build_sensitivities, write_csv};
use dro_opf::mpc::*;
use dro_opf::network::build_admittance;
use dro_opf::opf::{DecodedSolution, Formulation};
use dro_opf::qp::{self, Settings, SolveStatus};
use dro_opf::Error;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "dro-opf", version, about = "Data-driven distributionally robust optimal power flow")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one horizon problem and write the decoded plan.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Also write the assembled problem archive.
        #[arg(long)]
        dump: bool,
    },
    /// Run the receding-horizon loop.
    Mpc {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        /// Realized errors, one row per step (stage-0 columns are used).
        /// Without it, rows are resampled from the training data.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Append realized errors to the training window.
        #[arg(long)]
        online: bool,
        #[arg(long, default_value_t = DEFAULT_WINDOW_CAP)]
        window: usize,
    },
    /// Evaluate a plan on validation data.
    Oos {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        validation: Validation,
        /// Pick ε by cross-validation on a log grid over [lo, hi].
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        tune: Option<Vec<f64>>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
    },
    /// Solve and evaluate over grids of ε and ρ.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        validation: Validation,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.001, 0.01, 0.05, 0.1])]
        grid: Vec<f64>,
        /// Risk weights; defaults to --rho.
        #[arg(long, value_delimiter = ',')]
        rhos: Vec<f64>,
    },
    /// Solve a dumped problem file.
    SolveQp {
        path: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Write voltage sensitivities of a distribution case as CSV.
    Linearize {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        v0: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Distribution,
    Transmission,
}

#[derive(Clone, Copy, ValueEnum)]
enum Acct {
    Ac,
    Linearized,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    case: PathBuf,
    /// Forecast-error training CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Support sidecar JSON.
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Kind::Distribution)]
    formulation: Kind,
    /// Wasserstein radius; a comma-separated list gives one per stage.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01])]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    /// First time step of the plan.
    #[arg(long, default_value_t = 0)]
    t0: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Acct::Ac)]
    accounting: Acct,
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Validation {
    /// Validation CSV in the training layout. Without it a random part of
    /// the training data is held out.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    holdout: f64,
}

struct Loaded {
    case: Case,
    formulation: Formulation,
    train: ForecastErrorDataset,
    ctrl: ControllerConfig,
}

impl Common {
    fn load(&self) -> Result<Loaded, Error> {
        let case = load_case(&self.case)?;
        let train = ingest_dataset(&self.dataset, self.support.as_deref())?;
        let formulation = match self.formulation {
            Kind::Distribution => Formulation::Distribution,
            Kind::Transmission => Formulation::Transmission,
        };
        let mut ctrl = ControllerConfig::new(
            formulation,
            self.horizon,
            self.epsilon.clone(),
            RiskConfig::new(self.beta, self.rho)?,
        );
        ctrl.accounting = match self.accounting {
            Acct::Ac => Accounting::Ac,
            Acct::Linearized => Accounting::Linearized,
        };
        ctrl.validate()?;
        std::fs::create_dir_all(&self.out)?;
        Ok(Loaded {
            case,
            formulation,
            train,
            ctrl,
        })
    }
}

fn with_rows(ds: &ForecastErrorDataset, rows: &[usize]) -> Result<ForecastErrorDataset, Error> {
    let supports = (!ds.derived_support).then(|| ds.supports.clone());
    ForecastErrorDataset::new(ds.samples.select_rows(rows), ds.n_xi, supports)
}

/// Training set and validation matrix.
fn split(train: ForecastErrorDataset, v: &Validation, seed: u64) -> Result<(ForecastErrorDataset, DMatrix<f64>), Error> {
    if let Some(path) = &v.validation {
        let val = ingest_dataset(path, None)?;
        return Ok((train, val.samples));
    }
    let n = train.n_samples();
    let held = (v.holdout * n as f64).round() as usize;
    if !(0.0..1.0).contains(&v.holdout) || held == 0 || held >= n {
        return Err(Error::Validation(format!("holdout {} leaves no training or validation samples out of {n}", v.holdout)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, kept) = idx.split_at(held);
    let mut kept = kept.to_vec();
    kept.sort_unstable();
    Ok((with_rows(&train, &kept)?, train.samples.select_rows(val)))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    Ok(())
}

fn solution_json(sol: &DecodedSolution, ctrl: &ControllerConfig) -> serde_json::Value {
    let policies: serde_json::Map<String, serde_json::Value> = sol
        .policies
        .iter()
        .map(|(id, p)| {
            let d: Vec<Vec<f64>> = p.d.row_iter().map(|r| r.iter().copied().collect()).collect();
            (id.to_string(), json!({"d": d, "e": p.e.as_slice()}))
        })
        .collect();
    let first: serde_json::Map<String, serde_json::Value> = sol
        .first_inputs
        .iter()
        .map(|(id, u)| (id.to_string(), json!(u.as_slice())))
        .collect();
    json!({
        "status": sol.status,
        "epsilon": ctrl.epsilon,
        "rho": ctrl.risk.rho,
        "beta": ctrl.risk.beta,
        "horizon": ctrl.horizon,
        "objective": sol.objective,
        "cost_term": sol.cost_term,
        "risk_term": sol.risk_term,
        "first_inputs": first,
        "policies": policies,
        "risk": sol.risk,
    })
}

fn solve(common: &Common, dump: bool) -> Result<u8, Error> {
    let l = common.load()?;
    let plant = Plant::new(&l.case, l.formulation, l.ctrl.v0)?;
    let problem = plant.assemble(&l.ctrl, &l.case.devices, &l.train, l.ctrl.horizon, common.t0)?;
    if dump {
        problem.write_archive(&common.out.join("problem"))?;
    }
    let result = plant.solve(&l.ctrl, &problem)?;
    let sol = dro_opf::opf::decode_solution(&result, &problem)?;
    write_json(&common.out.join("solution.json"), &solution_json(&sol, &l.ctrl))?;
    println!(
        "objective {:.6} (cost {:.6}, risk {:.6})",
        sol.objective, sol.cost_term, sol.risk_term
    );
    Ok(0)
}

fn mpc(common: &Common, steps: usize, scenario: Option<&Path>, online: bool, window: usize) -> Result<u8, Error> {
    let l = common.load()?;
    let n_xi = l.train.n_xi;
    let realized = match scenario {
        Some(p) => {
            let s = ingest_dataset(p, None)?;
            if s.n_xi != n_xi || s.n_samples() < steps {
                return Err(Error::Validation(format!(
                    "scenario has {} rows of {} errors, need {steps} rows of {n_xi}",
                    s.n_samples(),
                    s.n_xi
                )));
            }
            s.samples.view((0, 0), (steps, n_xi)).into_owned()
        }
        None => {
            let mut r = ChaCha8Rng::seed_from_u64(common.seed);
            let n = l.train.n_samples();
            let rows: Vec<usize> = (0..steps).map(|_| r.random_range(0..n)).collect();
            l.train.samples.select_rows(&rows).columns(0, n_xi).into_owned()
        }
    };
    let mut cfg = MpcConfig::new(l.ctrl, steps);
    cfg.start = common.t0;
    cfg.online_update = online;
    cfg.window_cap = window;
    cfg.seed = common.seed;
    let trace = run_mpc(&l.case, &cfg, &l.train, &realized)?;
    trace.write_csv(create(&common.out.join("trace.csv"))?)?;
    let report = report_from_traces(std::slice::from_ref(&trace), cfg.controller.risk.beta)?;
    report.write_json(create(&common.out.join("report.json"))?)?;
    println!(
        "{} steps, total cost {:.6}, violation frequency {:.4}",
        trace.steps.len(),
        trace.total_cost(),
        report.violation_frequency
    );
    match &trace.termination {
        Some(why) => {
            eprintln!("stopped early: {why}");
            Ok(EXIT_INFEASIBLE)
        }
        None => Ok(0),
    }
}

fn oos(common: &Common, v: &Validation, tune: Option<&[f64]>, folds: usize) -> Result<u8, Error> {
    let l = common.load()?;
    let (train, val) = split(l.train, v, common.seed)?;
    let plant = Plant::new(&l.case, l.formulation, l.ctrl.v0)?;
    let mut ctrl = l.ctrl;
    if let Some(&[lo, hi]) = tune {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Validation(format!("tuning range [{lo}, {hi}] must be positive and ordered")));
        }
        let t = tune_epsilon(&plant, &ctrl, &train, common.t0, &log_grid(lo, hi, 7), folds)?;
        write_json(&common.out.join("tuning.json"), &json!(t))?;
        println!("tuned epsilon {:.6}", t.epsilon);
        ctrl = ctrl.with_epsilon(vec![t.epsilon]);
    }
    let (problem, sol) = solve_plan(&plant, &ctrl, &train, common.t0)?;
    let report = evaluate_plan(&plant, &problem, &sol, &val, ctrl.accounting, Some(&train.samples))?;
    report.write_json(create(&common.out.join("report.json"))?)?;
    println!(
        "{} scenarios, mean cost {:.6}, violation frequency {:.4}",
        report.n_scenarios, report.mean_cost, report.violation_frequency
    );
    Ok(0)
}

fn sweep_cmd(common: &Common, v: &Validation, grid: &[f64], rhos: &[f64]) -> Result<u8, Error> {
    let l = common.load()?;
    let (train, val) = split(l.train, v, common.seed)?;
    let plant = Plant::new(&l.case, l.formulation, l.ctrl.v0)?;
    let rhos = if rhos.is_empty() { vec![common.rho] } else { rhos.to_vec() };
    let points = sweep(&plant, &l.ctrl, &train, common.t0, grid, &rhos, &val)?;
    let mut all = create(&common.out.join("sweep.csv"))?;
    writeln!(all, "epsilon,rho,objective,cost_term,risk_term,violation_frequency,oos_cost,oos_cvar")?;
    let mut obj = create(&common.out.join("objective_vs_epsilon.csv"))?;
    writeln!(obj, "rho,epsilon,objective")?;
    let mut vf = create(&common.out.join("violation_vs_epsilon.csv"))?;
    writeln!(vf, "rho,epsilon,violation_frequency")?;
    let mut fr = create(&common.out.join("frontier.csv"))?;
    writeln!(fr, "epsilon,rho,oos_cost,oos_cvar")?;
    for p in &points {
        writeln!(
            all,
            "{},{},{},{},{},{},{},{}",
            p.epsilon, p.rho, p.objective, p.cost_term, p.risk_term, p.violation_frequency, p.oos_cost, p.oos_cvar
        )?;
        writeln!(obj, "{},{},{}", p.rho, p.epsilon, p.objective)?;
        writeln!(vf, "{},{},{}", p.rho, p.epsilon, p.violation_frequency)?;
        writeln!(fr, "{},{},{},{}", p.epsilon, p.rho, p.oos_cost, p.oos_cvar)?;
    }
    println!("{} grid points written to {}", points.len(), common.out.display());
    Ok(0)
}

fn solve_qp(path: &Path, tolerance: f64) -> Result<u8, Error> {
    let problem = qp::dump::load(path)?;
    let r = qp::solve(&problem, &Settings::with_tolerance(tolerance));
    let out = json!({
        "status": r.status,
        "objective": r.objective,
        "iterations": r.iterations,
        "y": r.y,
        "residuals": r.residuals,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(std::io::Error::from)?);
    Ok(match r.status {
        SolveStatus::Optimal | SolveStatus::AlmostOptimal => 0,
        SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible => EXIT_INFEASIBLE,
        _ => 1,
    })
}

fn linearize(case: &Path, v0: f64) -> Result<u8, Error> {
    let case = load_case(case)?;
    let adm = build_admittance(&case.network)?;
    let lin = build_sensitivities(&adm, Complex64::new(v0, 0.0))?;
    for flag in lin.sanity_flags() {
        log::warn!("{flag}");
    }
    write_csv(&lin, std::io::stdout().lock())?;
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Validation(_) | Error::Dimension { .. } | Error::Io(_) | Error::SizeLimit(_) => EXIT_INPUT,
        Error::Solver {
            status: SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible,
            ..
        } => EXIT_INFEASIBLE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.cmd {
        Command::Solve { common, dump } => solve(common, *dump),
        Command::Mpc {
            common,
            steps,
            scenario,
            online,
            window,
        } => mpc(common, *steps, scenario.as_deref(), *online, *window),
        Command::Oos {
            common,
            validation,
            tune,
            folds,
        } => oos(common, validation, tune.as_deref(), *folds),
        Command::Sweep {
            common,
            validation,
            grid,
            rhos,
        } => sweep_cmd(common, validation, grid, rhos),
        Command::SolveQp { path, tolerance } => solve_qp(path, *tolerance),
        Command::Linearize { case, v0 } => linearize(case, *v0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
