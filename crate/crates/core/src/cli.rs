//! Command-line front end.
//!
//! Every subcommand reads a JSON config, runs inside a rayon pool sized by
//! `--threads` (or `SPLITINFER_THREADS`) and writes one JSON report
//! atomically. Exit codes: 0 success, 1 usage or config error, 2 runtime
//! failure.

use crate::adaptive::{adaptive_ci, AdaptiveConfig};
use crate::compare::{compare_to_baseline, compare_two_learners, CompareConfig, DEFAULT_MC_DRAWS};
use crate::data::{ingest_csv, CsvOptions, Dataset, MissingPolicy, Propensity, Roles};
use crate::error::{Error, Result};
use crate::gates::{run_gates, GatesConfig};
use crate::inference::{estimate, DeltaSpec};
use crate::learners::{builtin, train_all, ExternalLearner, ExternalSpec, Learner};
use crate::moments::{builtin_moment, evaluate_splits, observations};
use crate::repro::{measure_from, sigma_d_hat, TestType};
use crate::rng::{derive_seed, TAG_MC};
use crate::sim::{run_grid, synthetic_base, ExperimentGrid};
use crate::splits::generate_plan;
use crate::zestim::{Variant, DEFAULT_TOL};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: &str = "1.0.0";

/// Version string written into every report. Readers accept any report with
/// the same major version and ignore fields they do not know.
pub fn report_schema_version() -> &'static str {
    SCHEMA_VERSION
}

/// Accept a parsed report if its `schema_version` shares our major version.
pub fn check_report_version(report: &Value) -> Result<()> {
    let major = |s: &str| s.split('.').next().and_then(|m| m.parse::<u64>().ok());
    let found = report.get("schema_version").and_then(Value::as_str);
    match found.and_then(major) {
        Some(m) if Some(m) == major(SCHEMA_VERSION) => Ok(()),
        _ => Err(Error::InvalidArgument(format!(
            "report schema_version {} is not compatible with {SCHEMA_VERSION}",
            found.unwrap_or("(missing)")
        ))),
    }
}

/// `{:.16e}`: 17 significant digits, round-trips every finite `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

struct FixedFloats(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for FixedFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(format_float(v).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with fixed float formatting and a trailing newline.
pub fn to_json_string(v: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats(serde_json::ser::PrettyFormatter::new()));
    v.serialize(&mut ser).expect("serializing a Value cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

/// Write through a temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearnerConfig {
    Builtin(String),
    External { external: ExternalSpec },
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::Builtin("ols".into())
    }
}

impl LearnerConfig {
    pub fn build(&self) -> Result<Box<dyn Learner>> {
        match self {
            LearnerConfig::Builtin(name) => builtin(name),
            LearnerConfig::External { external } => Ok(Box::new(ExternalLearner::spawn(external)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV path, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generate the synthetic base dataset instead of reading a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    pub schema: Roles,
    #[serde(default)]
    pub missing: MissingPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub b: Option<usize>,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { m: 10, k: 3, b: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareBlock {
    /// Learner trained once on the full sample and used as the baseline.
    pub baseline: LearnerConfig,
    /// When set, compare `learner` and this learner on shared splits instead.
    pub other: Option<LearnerConfig>,
    pub mc_draws: usize,
    pub slack: f64,
}

impl Default for CompareBlock {
    fn default() -> Self {
        Self { baseline: LearnerConfig::Builtin("mean".into()), other: None, mc_draws: DEFAULT_MC_DRAWS, slack: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveBlock {
    pub enabled: bool,
    pub c_gamma: f64,
    pub gamma_n: Option<f64>,
    pub points: usize,
}

impl Default for AdaptiveBlock {
    fn default() -> Self {
        let d = AdaptiveConfig::default();
        Self { enabled: false, c_gamma: d.c_gamma, gamma_n: d.gamma_n, points: d.points }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproBlock {
    pub beta: f64,
    pub tau: f64,
    pub test_type: TestType,
}

impl Default for ReproBlock {
    fn default() -> Self {
        Self { beta: 0.2, tau: 0.0, test_type: TestType::Right }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub emit_plan: bool,
    pub emit_sigma: bool,
}

fn default_moment() -> String {
    "mse".into()
}
fn default_alpha() -> f64 {
    0.05
}
fn default_h() -> DeltaSpec {
    DeltaSpec::Identity
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the subcommand when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub data: DataConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    /// Ensemble members for `gates`; defaults to `[learner]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub learners: Vec<LearnerConfig>,
    #[serde(default = "default_moment")]
    pub moment: String,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_h")]
    pub h: DeltaSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub compare: CompareBlock,
    #[serde(default)]
    pub adaptive: AdaptiveBlock,
    #[serde(default)]
    pub repro: ReproBlock,
    #[serde(default)]
    pub gates: GatesConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn invalid(pointer: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid { pointer: pointer.into(), message: message.into() }
}

impl RunConfig {
    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("/alpha", "must lie in (0, 1)"));
        }
        if self.plan.m == 0 {
            return Err(invalid("/plan/M", "must be at least 1"));
        }
        if self.plan.k == 0 {
            return Err(invalid("/plan/K", "must be at least 1"));
        }
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(invalid("/data", "exactly one of `path` and `synthetic` is required"));
        }
        if !(self.repro.beta > 0.0 && self.repro.beta < 0.5) {
            return Err(invalid("/repro/beta", "must lie in (0, 0.5)"));
        }
        if let Some(m) = &self.method {
            if !["estimate", "compare", "gates", "repro"].contains(&m.as_str()) {
                return Err(invalid("/method", format!("unknown method `{m}`")));
            }
        }
        Ok(())
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        s.push('/');
        match seg {
            Segment::Seq { index } => s.push_str(&index.to_string()),
            Segment::Map { key } => s.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => s.push_str(variant),
            Segment::Unknown => s.push('?'),
        }
    }
    s
}

/// Parse JSON text into `T`, reporting the failing location as a JSON pointer.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        let inner = e.into_inner();
        let pointer = if inner.is_syntax() || inner.is_eof() { String::new() } else { pointer };
        invalid(&pointer, inner.to_string())
    })
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid("", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn load_data(cfg: &DataConfig, base_dir: &Path) -> Result<Dataset> {
    if let Some(s) = &cfg.synthetic {
        let d = synthetic_base(s.n, s.seed)?;
        let r = &cfg.schema;
        let mut names: Vec<String> = vec![r.outcome.clone()];
        names.extend(r.treatment.iter().cloned());
        names.extend(r.group.iter().cloned());
        names.extend(r.covariates.iter().cloned());
        if let Some(Propensity::Column(c)) = &r.propensity {
            names.push(c.clone());
        }
        let cols = names.iter().map(|c| Ok(d.column(c)?.to_vec())).collect::<Result<Vec<_>>>()?;
        return Dataset::from_columns(names, cols, r.clone());
    }
    let p = cfg.path.as_ref().expect("checked");
    let p = if p.is_relative() { base_dir.join(p) } else { p.clone() };
    let opts = CsvOptions { missing_policy: cfg.missing, ..Default::default() };
    ingest_csv(&p, &cfg.schema, &opts)
}

#[derive(Parser)]
#[command(name = "splitinfer", version, about = "Split-sample inference on data-dependent model properties")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    emit_plan: bool,
    #[arg(long)]
    emit_sigma: bool,
    /// Attach the adaptive interval (estimate only).
    #[arg(long)]
    adaptive: bool,
    /// Report path; overrides `output.path`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SimArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    grid: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for results.csv, summary.json and report.json.
    #[arg(long, default_value = "sim_out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    Estimate(Common),
    Compare(Common),
    Gates(Common),
    Repro(Common),
    Simulate(SimArgs),
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn threads_from(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    if let Some(t) = flag {
        return if t == 0 { Err("--threads must be at least 1".into()) } else { Ok(Some(t)) };
    }
    match std::env::var("SPLITINFER_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(format!("SPLITINFER_THREADS must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(None),
    }
}

/// Entry point. `argv[0]` is the program name.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match &cli.cmd {
        Cmd::Estimate(c) | Cmd::Compare(c) | Cmd::Gates(c) | Cmd::Repro(c) => c.threads,
        Cmd::Simulate(s) => s.threads,
        Cmd::ValidateConfig { .. } => None,
    };
    let threads = match threads_from(threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli.cmd)) {
        Ok(()) => 0,
        Err(e @ Error::ConfigInvalid { .. }) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Estimate(c) => run_method("estimate", c),
        Cmd::Compare(c) => run_method("compare", c),
        Cmd::Gates(c) => run_method("gates", c),
        Cmd::Repro(c) => run_method("repro", c),
        Cmd::Simulate(s) => simulate(s),
        Cmd::ValidateConfig { config } => {
            let text =
                std::fs::read_to_string(config).map_err(|e| invalid("", format!("cannot read {}: {e}", config.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| invalid("", e.to_string()))?;
            if v.get("dgp").is_some() {
                parse_config::<ExperimentGrid>(&text)?;
            } else {
                parse_config::<RunConfig>(&text)?.check()?;
            }
            println!("ok");
            Ok(())
        }
    }
}

/// A report under construction: result blocks plus reasons for nulls.
struct Report {
    body: serde_json::Map<String, Value>,
    reasons: Vec<(String, String)>,
}

impl Report {
    fn new(command: &str, seed: u64, config: Value) -> Self {
        let mut body = serde_json::Map::new();
        body.insert("schema_version".into(), json!(SCHEMA_VERSION));
        body.insert("command".into(), json!(command));
        body.insert("seed".into(), json!(seed));
        body.insert("config".into(), config);
        Self { body, reasons: vec![] }
    }

    fn put<T: Serialize>(&mut self, key: &str, v: &T) -> Result<()> {
        self.body.insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    fn reason(&mut self, pointer: &str, code: &str) {
        self.reasons.push((pointer.into(), code.into()));
    }

    fn finish(mut self) -> Value {
        let mut nulls = Vec::new();
        let mut root = Value::Object(std::mem::take(&mut self.body));
        collect_nulls(&root, String::new(), &mut nulls);
        let listed: Vec<Value> = nulls
            .into_iter()
            .filter(|p| !p.starts_with("/config"))
            .map(|p| {
                let code = self
                    .reasons
                    .iter()
                    .find(|(q, _)| p == *q || p.starts_with(&format!("{q}/")))
                    .map(|(_, c)| c.clone())
                    .unwrap_or_else(|| "non_finite".into());
                json!({"pointer": p, "reason": code})
            })
            .collect();
        root["null_reasons"] = Value::Array(listed);
        root
    }
}

fn collect_nulls(v: &Value, at: String, out: &mut Vec<String>) {
    match v {
        Value::Null => out.push(at),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| collect_nulls(x, format!("{at}/{i}"), out)),
        Value::Object(o) => o.iter().for_each(|(k, x)| collect_nulls(x, format!("{at}/{k}"), out)),
        _ => {}
    }
}

fn run_method(command: &str, args: &Common) -> Result<()> {
    let mut cfg: RunConfig = read_config(&args.config)?;
    cfg.check()?;
    if let Some(m) = &cfg.method {
        if m != command {
            return Err(invalid("/method", format!("config is for `{m}` but the subcommand is `{command}`")));
        }
    }
    if let Some(s) = args.seed {
        cfg.plan.seed = s;
    }
    cfg.output.emit_plan |= args.emit_plan;
    cfg.output.emit_sigma |= args.emit_sigma;
    cfg.adaptive.enabled |= args.adaptive;
    if let Some(o) = &args.out {
        cfg.output.path = Some(o.clone());
    }
    let out_path = cfg.output.path.clone().unwrap_or_else(|| PathBuf::from(format!("{command}_report.json")));
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let seed = cfg.plan.seed;
    let d = load_data(&cfg.data, &base_dir)?;
    let mut report = Report::new(command, seed, serde_json::to_value(&cfg)?);
    report.put("n", &d.n())?;
    report.put("dropped_rows", &d.dropped())?;

    if command == "gates" {
        let members: Vec<LearnerConfig> = if cfg.learners.is_empty() { vec![cfg.learner.clone()] } else { cfg.learners.clone() };
        let built = members.iter().map(LearnerConfig::build).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&dyn Learner> = built.iter().map(|b| b.as_ref()).collect();
        let gcfg = GatesConfig { seed, alpha: cfg.alpha, ..cfg.gates.clone() };
        let r = run_gates(&gcfg, &refs, &d)?;
        report.put("learners", &refs.iter().map(|l| l.name()).collect::<Vec<_>>())?;
        report.put("gates", &r.gates)?;
        report.put("het_test", &r.het_test)?;
        return emit(report, &out_path);
    }

    let plan = generate_plan(d.n(), cfg.plan.m, cfg.plan.k, cfg.plan.b, seed)?;
    let mf = builtin_moment(&cfg.moment, &d)?;
    let learner = cfg.learner.build()?;
    let models = train_all(&plan, &d, learner.as_ref(), seed)?;
    let obs = evaluate_splits(&models, &plan, &d)?;
    let (z, rep) = estimate(cfg.variant, mf.as_ref(), &plan, &obs, &cfg.h, cfg.alpha, DEFAULT_TOL)?;
    report.put("learner", &learner.name())?;
    report.put("estimate", &rep)?;
    report.put("solver", &z.diagnostics)?;
    if cfg.output.emit_plan {
        report.put("plan", &plan)?;
    } else {
        report.put("plan", &Value::Null)?;
        report.reason("/plan", "not_requested");
    }

    match command {
        "estimate" => {
            if cfg.adaptive.enabled {
                let acfg = AdaptiveConfig {
                    c_gamma: cfg.adaptive.c_gamma,
                    gamma_n: cfg.adaptive.gamma_n,
                    points: cfg.adaptive.points,
                    ..Default::default()
                };
                let a = adaptive_ci(mf.as_ref(), &obs, d.n(), rep.h_hat, rep.sigma_hat, &acfg, cfg.alpha)?;
                report.put("adaptive", &a)?;
            }
        }
        "compare" => {
            let ccfg = CompareConfig {
                alpha: cfg.alpha,
                mc_draws: cfg.compare.mc_draws,
                seed: derive_seed(seed, &[TAG_MC]),
                slack: cfg.compare.slack,
            };
            match &cfg.compare.other {
                Some(other) => {
                    let lb = other.build()?;
                    let obs_b = evaluate_splits(&train_all(&plan, &d, lb.as_ref(), seed)?, &plan, &d)?;
                    let r = compare_two_learners(mf.as_ref(), &cfg.h, &obs, &obs_b, d.n(), &ccfg, DEFAULT_TOL)?;
                    report.put("other_learner", &lb.name())?;
                    report.put("comparison", &r)?;
                }
                None => {
                    let base = cfg.compare.baseline.build()?;
                    let all: Vec<usize> = (0..d.n()).collect();
                    let bm = base.train(&d, &all, derive_seed(seed, &[0]))?;
                    let base_obs = observations(bm.as_ref(), &d, &all)?;
                    let r = compare_to_baseline(
                        mf.as_ref(),
                        &cfg.h,
                        &obs,
                        &base_obs,
                        rep.h_hat,
                        rep.sigma_hat,
                        &ccfg,
                        DEFAULT_TOL,
                        cfg.output.emit_sigma,
                    )?;
                    if !cfg.output.emit_sigma {
                        report.reason("/comparison/sigma", "not_requested");
                    }
                    report.put("baseline", &base.name())?;
                    report.put("comparison", &r)?;
                }
            }
        }
        "repro" => {
            if cfg.variant != Variant::Two {
                return Err(invalid("/variant", "repro is defined at the variant-2 estimate"));
            }
            let comps = sigma_d_hat(mf.as_ref(), &plan, &obs, &rep.theta_hat, &cfg.h, cfg.repro.tau)?;
            let m = measure_from(&comps, cfg.repro.beta, cfg.repro.test_type)?;
            report.put("components", &comps)?;
            report.put("repro", &m)?;
        }
        _ => unreachable!("subcommand set is closed"),
    }
    emit(report, &out_path)
}

fn emit(report: Report, path: &Path) -> Result<()> {
    let v = report.finish();
    write_atomic(path, to_json_string(&v).as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn simulate(args: &SimArgs) -> Result<()> {
    let path = args.grid.as_ref().or(args.config.as_ref()).expect("clap enforces one of --grid/--config");
    let mut grid: ExperimentGrid = read_config(path)?;
    if let Some(s) = args.seed {
        grid.seed = s;
    }
    if grid.iterations == 0 {
        return Err(invalid("/iterations", "must be at least 1"));
    }
    let summary = run_grid(&grid, &args.out)?;
    let mut report = Report::new("simulate", grid.seed, serde_json::to_value(&grid)?);
    report.put("summary", &summary.cells)?;
    report.put("failures", &summary.failures)?;
    report.put("results_csv", &"results.csv")?;
    emit(report, &args.out.join("report.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_17_digits() {
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
        let s = to_json_string(&json!({"a": 1.5, "b": 2}));
        assert!(s.contains("1.5000000000000000e0") && s.contains("\"b\": 2"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"], json!(1.5));
    }

    #[test]
    fn pointer_for_unknown_and_bad_fields() {
        let e =
            parse_config::<RunConfig>(r#"{"data": {"synthetic": {"n": 10}, "schema": {"outcome": "y"}}, "plan": {"M": "x"}}"#)
                .unwrap_err();
        match e {
            Error::ConfigInvalid { pointer, .. } => assert_eq!(pointer, "/plan/M"),
            e => panic!("{e}"),
        }
        let e = parse_config::<RunConfig>(r#"{"data": {"synthetic": {"n": 10}, "schema": {"outcome": "y"}}, "bogus": 1}"#)
            .unwrap_err();
        assert!(matches!(e, Error::ConfigInvalid { .. }));
        let e = parse_config::<RunConfig>("{ not json").unwrap_err();
        assert!(matches!(e, Error::ConfigInvalid { pointer, .. } if pointer.is_empty()));
    }

    #[test]
    fn defaults_fill_in() {
        let c: RunConfig =
            parse_config(r#"{"data": {"synthetic": {"n": 100}, "schema": {"outcome": "y", "covariates": ["x1"]}}}"#).unwrap();
        c.check().unwrap();
        assert_eq!((c.plan.m, c.plan.k, c.variant, c.moment.as_str()), (10, 3, Variant::Two, "mse"));
        assert_eq!(report_schema_version(), "1.0.0");
    }

    #[test]
    fn report_version_compatibility() {
        assert!(check_report_version(&json!({"schema_version": "1.7.2", "new_block": {}})).is_ok());
        assert!(check_report_version(&json!({"schema_version": "2.0.0"})).is_err());
        assert!(check_report_version(&json!({})).is_err());
    }

    #[test]
    fn null_reasons_listed() {
        let mut r = Report::new("estimate", 1, json!({"x": null}));
        r.put("plan", &Value::Null).unwrap();
        r.reason("/plan", "not_requested");
        r.put("v", &f64::NAN).unwrap();
        let v = r.finish();
        let reasons = v["null_reasons"].as_array().unwrap();
        assert_eq!(reasons.len(), 2);
        assert!(reasons.contains(&json!({"pointer": "/plan", "reason": "not_requested"})));
        assert!(reasons.contains(&json!({"pointer": "/v", "reason": "non_finite"})));
    }

    #[test]
    fn usage_errors_exit_1() {
        let argv = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        assert_eq!(run(&argv("splitinfer frobnicate")), 1);
        assert_eq!(run(&argv("splitinfer estimate")), 1);
    }
}
