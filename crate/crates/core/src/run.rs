//! Batch jobs driven by a JSON configuration; shared by the command-line tool and the C API.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bsvie::{solve_bsvie, BsvieOptions, BsvieProblem, Driver, LinearDriver, MSolution, ZeroDriver};
use crate::control::{
    self, integro_lift, lq_problem, make_caputo_problem, make_sde_problem, AffineIntegro, ControlProblem, ControlSet,
    IntegroBounds, IntegroSpec, Lipschitz, LqCoefficients, OptimizeOptions, QuadraticCost,
};
use crate::error::{Error, Result};
use crate::io::{process_csv, sha256_hex, trace_csv, two_param_binary, write_atomic};
use crate::kernel::{
    control_admissible, critical_weight, svie_margin, svie_stability_constant, ControlKernels, DomainReport,
    DriverKernels, Kernel,
};
use crate::linear::{bsvie_to_bsde, duality_check, variation_of_constants, LinearBsvie, LinearSvieSpec};
use crate::stochastic::{Ensemble, ModelSpec, Process, TimeGrid};
use crate::svie::{solve_svie, AffineScalar, Cell, LinearSvie, MatrixField, SvieProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Domain,
    SimulateSvie,
    SolveBsvie,
    CheckDuality,
    Voc,
    BsdeReduce,
    Optimize,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Domain => "domain",
            Command::SimulateSvie => "simulate-svie",
            Command::SolveBsvie => "solve-bsvie",
            Command::CheckDuality => "check-duality",
            Command::Voc => "voc",
            Command::BsdeReduce => "bsde-reduce",
            Command::Optimize => "optimize",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    pub grid: GridSpec,
    #[serde(default = "tree")]
    pub ensemble: ModelSpec,
    /// Command-specific problem description.
    #[serde(default)]
    pub problem: Value,
}

fn tree() -> ModelSpec {
    ModelSpec::Tree
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn seed(&self) -> Option<u64> {
        match self.ensemble {
            ModelSpec::MonteCarlo { seed, .. } => Some(seed),
            ModelSpec::Tree => None,
        }
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        if self.grid.steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ensemble::build(TimeGrid::new(self.grid.horizon, self.grid.steps)?, self.ensemble.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    Inadmissible,
}

#[derive(Clone, Debug)]
pub struct OutputFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct JobOutput {
    pub command: Command,
    pub status: JobStatus,
    pub summary: Value,
    pub files: Vec<OutputFile>,
}

impl JobOutput {
    fn new(command: Command, summary: Value) -> Self {
        JobOutput { command, status: JobStatus::Ok, summary, files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push(OutputFile { name: name.into(), bytes: bytes.into() });
    }
}

/// Deterministic scalar field on the ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: f64 },
    /// `scale · W(t)^power`, or `scale · W(T)^power` when `terminal`.
    Brownian {
        power: i32,
        #[serde(default)]
        terminal: bool,
        #[serde(default = "unit")]
        scale: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl FieldSpec {
    pub fn materialize(&self, ens: &Ensemble) -> Process {
        let n = ens.steps();
        match *self {
            FieldSpec::Constant { value } => Process::constant(ens, &[value]),
            FieldSpec::Brownian { power, terminal, scale } => Process::from_fn(ens, 1, |i, p, o| {
                let node = if terminal { n } else { i };
                o[0] = scale * ens.w(node, p)[0].powi(power);
            }),
        }
    }
}

fn parse<T: for<'de> Deserialize<'de>>(v: &Value, what: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("{what}: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::Parse(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn run(cfg: &RunConfig) -> Result<JobOutput> {
    let cmd = cfg.command.ok_or_else(|| Error::InvalidParameter("no command given".into()))?;
    match cmd {
        Command::Domain => cmd_domain(cfg),
        Command::SimulateSvie => cmd_simulate(cfg),
        Command::SolveBsvie => cmd_solve(cfg),
        Command::CheckDuality => cmd_duality(cfg),
        Command::Voc => cmd_voc(cfg),
        Command::BsdeReduce => cmd_bsde(cfg),
        Command::Optimize => cmd_optimize(cfg),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSpec {
    #[serde(default = "zero_kernel")]
    b: Kernel,
    #[serde(default = "zero_kernel")]
    sigma: Kernel,
    mu: Option<f64>,
    driver: Option<DriverKernels>,
    eta: Option<f64>,
    lambda: Option<f64>,
    control: Option<ControlKernels>,
}

fn zero_kernel() -> Kernel {
    Kernel::Zero
}

fn cmd_domain(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: DomainSpec = parse(&cfg.problem, "domain problem")?;
    let cw = critical_weight(&spec.b, &spec.sigma)?;
    let mut admissible = true;
    let forward = match spec.mu {
        Some(mu) => {
            let margin = svie_margin(&spec.b, &spec.sigma, mu)?;
            admissible &= mu > cw.rho;
            DomainReport {
                rho_star: cw.rho,
                margin: Some(margin),
                contraction_constant: Some(svie_stability_constant(&spec.b, &spec.sigma, mu)?),
                admissible: mu > cw.rho,
                diagnostic: cw.diagnostic.clone(),
            }
        }
        None => DomainReport {
            rho_star: cw.rho,
            margin: None,
            contraction_constant: None,
            admissible: cw.rho.is_finite() || cw.rho == f64::NEG_INFINITY,
            diagnostic: cw.diagnostic.clone(),
        },
    };
    let mut summary = json!({ "forward": forward });
    if let Some(k) = spec.driver {
        let (eta, lambda) = (spec.eta.unwrap_or(0.0), spec.lambda.unwrap_or(0.0));
        let m = k.margin(eta, lambda)?;
        admissible &= m.admissible();
        summary["backward"] = json!({ "eta": eta, "lambda": lambda, "margin": m, "admissible": m.admissible() });
    }
    if let Some(k) = spec.control {
        let (mu, lambda) = (spec.mu.unwrap_or(0.0), spec.lambda.unwrap_or(0.0));
        let a = control_admissible(&k, mu, lambda)?;
        admissible &= a.ok;
        summary["control"] = serde_json::to_value(&a).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let mut out = JobOutput::new(Command::Domain, summary);
    if !admissible {
        out.status = JobStatus::Inadmissible;
    }
    let bytes = to_json(&out.summary)?;
    out.add("domain.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateSpec {
    coeffs: AffineScalar,
    x0: f64,
    mu: f64,
}

fn cmd_simulate(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: SimulateSpec = parse(&cfg.problem, "simulate problem")?;
    let ens = cfg.ensemble()?;
    let (kb, ks) = spec.coeffs.envelopes();
    let problem = SvieProblem::new(Arc::new(spec.coeffs), Process::constant(&ens, &[spec.x0]), kb, ks, spec.mu);
    let x = solve_svie(&problem, &ens, None)?;
    let mean_terminal = ens.mean(&x.component(ens.steps(), 0));
    let summary = json!({
        "stability_constant": crate::io::fmt_f64(problem.stability_constant()?),
        "mean_terminal": mean_terminal,
        "norm": ens.weighted_sq_norm(&x, -spec.mu).1,
    });
    let mut out = JobOutput::new(Command::SimulateSvie, summary);
    out.add("x.csv", process_csv(&x, &ens, &["x".into()]));
    let bytes = to_json(&out.summary)?;
    out.add("summary.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DriverSpec {
    Zero,
    Linear { a: f64, b1: f64, b2: f64 },
}

impl DriverSpec {
    fn build(&self) -> Arc<dyn Driver> {
        match *self {
            DriverSpec::Zero => Arc::new(ZeroDriver(1)),
            DriverSpec::Linear { a, b1, b2 } => Arc::new(LinearDriver::scalar(a, b1, b2)),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BsvieSpec {
    driver: DriverSpec,
    psi: FieldSpec,
    lambda: f64,
    eta: f64,
    #[serde(default)]
    options: BsvieOptions,
}

fn solve_from(spec: &BsvieSpec, ens: &Ensemble) -> Result<MSolution> {
    let p = BsvieProblem::new(spec.driver.build(), spec.psi.materialize(ens), spec.lambda, spec.eta);
    solve_bsvie(&p, ens, &spec.options)
}

fn add_solution(out: &mut JobOutput, sol: &MSolution, ens: &Ensemble) -> Result<()> {
    out.add("y.csv", process_csv(&sol.y, ens, &["y".into()]));
    let (header, bytes) = two_param_binary(&sol.z, ens);
    out.add("z.bin", bytes);
    out.add("z.json", to_json(&header)?);
    Ok(())
}

fn cmd_solve(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: BsvieSpec = parse(&cfg.problem, "BSVIE problem")?;
    let ens = cfg.ensemble()?;
    let sol = solve_from(&spec, &ens)?;
    let summary = json!({
        "diagnostics": sol.diagnostics,
        "mean_y0": ens.mean(&sol.y.component(0, 0)),
        "norm": sol.norm(&ens, spec.eta),
    });
    let mut out = JobOutput::new(Command::SolveBsvie, summary);
    add_solution(&mut out, &sol, &ens)?;
    let bytes = to_json(&out.summary)?;
    out.add("diagnostics.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DualitySpec {
    c: f64,
    d: f64,
    phi: FieldSpec,
    psi: FieldSpec,
    mu: f64,
    eta: f64,
    lambda: f64,
    #[serde(default)]
    options: BsvieOptions,
}

fn cmd_duality(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: DualitySpec = parse(&cfg.problem, "duality problem")?;
    let ens = cfg.ensemble()?;
    let fwd = LinearSvieSpec {
        eq: LinearSvie::scalar(spec.c, spec.d),
        kc: Kernel::constant(spec.c.abs()),
        kd: Kernel::constant(spec.d.abs()),
    };
    let (phi, psi) = (spec.phi.materialize(&ens), spec.psi.materialize(&ens));
    let rep = duality_check(&fwd, &phi, &psi, spec.mu, spec.eta, spec.lambda, &ens, &spec.options)?;
    let summary = json!({ "lhs": rep.lhs, "rhs": rep.rhs, "gap": rep.gap });
    let mut out = JobOutput::new(Command::CheckDuality, summary);
    out.add("x.csv", process_csv(&rep.x, &ens, &["x".into()]));
    out.add("y.csv", process_csv(&rep.solution.y, &ens, &["y".into()]));
    let bytes = to_json(&out.summary)?;
    out.add("duality.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocSpec {
    a: f64,
    b: f64,
    lambda: f64,
    eta: f64,
    psi: FieldSpec,
    #[serde(default = "series_tol")]
    series_tol: f64,
    #[serde(default = "yes")]
    cross_check: bool,
    #[serde(default)]
    options: BsvieOptions,
}

fn series_tol() -> f64 {
    1e-12
}

fn yes() -> bool {
    true
}

fn cmd_voc(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: VocSpec = parse(&cfg.problem, "variation-of-constants problem")?;
    let ens = cfg.ensemble()?;
    let lin = LinearBsvie::scalar(spec.a, spec.b, spec.lambda, spec.eta);
    let psi = spec.psi.materialize(&ens);
    let res = variation_of_constants(&lin, &psi, &ens, spec.series_tol, spec.cross_check.then_some(&spec.options))?;
    let summary = json!({
        "gap": res.gap,
        "terms": res.resolvent.term_norms.len(),
        "max_ratio": res.resolvent.max_ratio(),
        "ratio_bound": res.resolvent.ratio_bound,
    });
    let mut out = JobOutput::new(Command::Voc, summary);
    out.add("y.csv", process_csv(&res.y, &ens, &["y".into()]));
    let bytes = to_json(&out.summary)?;
    out.add("voc.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BsdeSpec {
    #[serde(flatten)]
    bsvie: BsvieSpec,
    mu: f64,
}

fn cmd_bsde(cfg: &RunConfig) -> Result<JobOutput> {
    let v = &cfg.problem;
    let mu = v.get("mu").and_then(Value::as_f64).ok_or_else(|| Error::Parse("bsde problem: missing mu".into()))?;
    let mut rest = v.clone();
    if let Some(o) = rest.as_object_mut() {
        o.remove("mu");
    }
    let spec = BsdeSpec { bsvie: parse(&rest, "bsde problem")?, mu };
    let ens = cfg.ensemble()?;
    let sol = solve_from(&spec.bsvie, &ens)?;
    let red = bsvie_to_bsde(&sol, spec.bsvie.lambda, spec.mu, &ens)?;
    let summary = json!({ "residual_norm": red.residual_norm, "diagnostics": sol.diagnostics });
    let mut out = JobOutput::new(Command::BsdeReduce, summary);
    out.add("cy.csv", process_csv(&red.cy, &ens, &["cy".into()]));
    out.add("cz.csv", process_csv(&red.cz, &ens, &[]));
    out.add("residual.csv", process_csv(&red.residual, &ens, &["r".into()]));
    let bytes = to_json(&out.summary)?;
    out.add("bsde.json", bytes);
    Ok(out)
}

/// `A(t,s) = scale · e^{-rate (t-s)}` with envelope `|scale| e^{-rate τ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ExpField {
    pub scale: f64,
    #[serde(default)]
    pub rate: f64,
}

impl ExpField {
    fn field(self) -> Arc<dyn MatrixField> {
        Arc::new(move |c: &Cell, out: &mut [f64]| out[0] = self.scale * (-self.rate * (c.t - c.s)).exp())
    }

    fn kernel(self) -> Kernel {
        if self.scale == 0.0 {
            Kernel::Zero
        } else {
            Kernel::exponential(self.rate, self.scale.abs())
        }
    }
}

/// Named control problem families.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemForm {
    Lq {
        coeffs: LqCoefficients,
        cost: QuadraticCost,
        x0: Vec<f64>,
        mu: f64,
        lambda: f64,
        #[serde(default)]
        set: ControlSet,
    },
    Caputo {
        alpha: f64,
        coeffs: LqCoefficients,
        lipschitz: Option<Lipschitz>,
        cost: QuadraticCost,
        x0: Vec<f64>,
        lambda: f64,
        #[serde(default)]
        set: ControlSet,
    },
    Sde {
        coeffs: LqCoefficients,
        lipschitz: Option<Lipschitz>,
        cost: QuadraticCost,
        x0: Vec<f64>,
        mu: f64,
        lambda: f64,
        #[serde(default)]
        set: ControlSet,
    },
    Integro {
        coeffs: AffineIntegro,
        /// `A1..A4`.
        memory: [ExpField; 4],
        cost: QuadraticCost,
        x0: f64,
        mu: f64,
        lambda: f64,
    },
    Custom {
        name: String,
        #[serde(default)]
        params: Value,
    },
}

type FormBuilder = dyn Fn(&Value) -> Result<ControlProblem> + Send + Sync;

fn registry() -> &'static Mutex<HashMap<String, Arc<FormBuilder>>> {
    static REG: OnceLock<Mutex<HashMap<String, Arc<FormBuilder>>>> = OnceLock::new();
    REG.get_or_init(Default::default)
}

/// Makes `{"form": "custom", "name": name, "params": ...}` resolvable.
pub fn register_form(name: &str, builder: impl Fn(&Value) -> Result<ControlProblem> + Send + Sync + 'static) {
    registry().lock().unwrap().insert(name.to_string(), Arc::new(builder));
}

impl ProblemForm {
    pub fn build(&self) -> Result<ControlProblem> {
        match self {
            ProblemForm::Lq { coeffs, cost, x0, mu, lambda, set } => {
                Ok(lq_problem(coeffs.clone(), cost.clone(), x0.clone(), *mu, *lambda)?.with_set(set.clone()))
            }
            ProblemForm::Caputo { alpha, coeffs, lipschitz, cost, x0, lambda, set } => {
                coeffs.validate()?;
                let lips = lipschitz.unwrap_or_else(|| coeffs.lipschitz());
                let p = make_caputo_problem(*alpha, Arc::new(coeffs.clone()), lips, Arc::new(cost.clone()), x0.clone(), *lambda)?;
                Ok(p.with_set(set.clone()).with_convex(control::quadratic_block_psd(cost)))
            }
            ProblemForm::Sde { coeffs, lipschitz, cost, x0, mu, lambda, set } => {
                coeffs.validate()?;
                let lips = lipschitz.unwrap_or_else(|| coeffs.lipschitz());
                let p = make_sde_problem(Arc::new(coeffs.clone()), lips, Arc::new(cost.clone()), x0.clone(), *mu, *lambda);
                Ok(p.with_set(set.clone()).with_convex(control::quadratic_block_psd(cost)))
            }
            ProblemForm::Integro { coeffs, memory, cost, x0, mu, lambda } => {
                let (lbx, lbu, lsx, lsu, l) = coeffs.lipschitz();
                let spec = IntegroSpec {
                    coeffs: Arc::new(*coeffs),
                    a: memory.map(ExpField::field),
                    bounds: IntegroBounds { lbx, lbu, lsx, lsu, l, k: memory.map(ExpField::kernel) },
                };
                Ok(integro_lift(spec, Arc::new(cost.clone()), vec![*x0], *mu, *lambda)?.problem)
            }
            ProblemForm::Custom { name, params } => {
                let b = registry().lock().unwrap().get(name).cloned();
                match b {
                    Some(b) => b(params),
                    None => Err(Error::InvalidParameter(format!("no registered problem form '{name}'"))),
                }
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeSpec {
    problem: ProblemForm,
    /// Constant initial control.
    #[serde(default)]
    u0: Vec<f64>,
    #[serde(default)]
    options: OptimizeOptions,
}

fn cmd_optimize(cfg: &RunConfig) -> Result<JobOutput> {
    let spec: OptimizeSpec = parse(&cfg.problem, "control problem")?;
    let ens = cfg.ensemble()?;
    let p = spec.problem.build()?;
    let l = p.control_dim();
    let u0 = if spec.u0.is_empty() { vec![0.0; l] } else { spec.u0.clone() };
    if u0.len() != l {
        return Err(Error::Dimension(format!("u0 has length {}, expected {l}", u0.len())));
    }
    let res = control::optimize(&p, &Process::constant(&ens, &u0), &ens, &spec.options)?;
    let x = control::state(&p, &res.u, &ens)?;
    let summary = json!({ "status": res.status, "iterations": res.trace.len(), "report": res.report });
    let mut out = JobOutput::new(Command::Optimize, summary);
    out.add("u.csv", process_csv(&res.u, &ens, &[]));
    out.add("x.csv", process_csv(&x, &ens, &[]));
    out.add("trace.csv", trace_csv(&res.trace));
    let bytes = to_json(&out.summary)?;
    out.add("report.json", bytes);
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
}

/// Enough to re-run the job: the effective configuration is stored next to the outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub status: JobStatus,
    pub config_file: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub versions: HashMap<String, String>,
    pub outputs: Vec<ManifestEntry>,
}

/// Writes every output, the effective configuration and the manifest atomically into `dir`.
pub fn write_outputs(cfg: &RunConfig, job: &JobOutput, dir: &Path) -> Result<Manifest> {
    let config = to_json(cfg)?;
    write_atomic(&dir.join("config.json"), &config)?;
    let mut outputs = Vec::new();
    for f in &job.files {
        write_atomic(&dir.join(&f.name), &f.bytes)?;
        outputs.push(ManifestEntry { name: f.name.clone(), sha256: sha256_hex(&f.bytes) });
    }
    let mut versions = HashMap::new();
    versions.insert("volterra-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let manifest = Manifest {
        command: job.command,
        status: job.status,
        config_file: "config.json".into(),
        config_sha256: sha256_hex(&config),
        seed: cfg.seed(),
        versions,
        outputs,
    };
    write_atomic(&dir.join("manifest.json"), &to_json(&manifest)?)?;
    Ok(manifest)
}

/// Process exit code: 1 input/output, 2 inadmissible, 3 solver failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse(_) | Error::InvalidParameter(_) | Error::Dimension(_) => 1,
        Error::Inadmissible(_) => 2,
        Error::NonConvergence(_) | Error::Numerical(_) | Error::MemoryBudget { .. } => 3,
    }
}
