//! Config-driven batch runs behind the `nnfvi` binary.
//!
//! Every command reads a JSON config, writes CSV files into an output
//! directory and returns normally or with an [`Error`]. Each CSV starts with
//! a `# config_hash=<sha256>` comment line followed by a header row whose
//! column names carry their units. Wall-clock times go to a separate
//! `timings.csv`, so the result files are byte-identical across reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fvi::{exact_dp, run_nnfvi, FittedValueSet, FviConfig};
use crate::mcd::{
    random_instance, select_action, select_action_bruteforce, Engine, McdConfig, RandomInstanceConfig, SelectionProblem,
    SelectionResult,
};
use crate::mcip::{build_mcip_mdp, sensitivity_sweep, McipInstance, McipLattice, SweepConfig, SyntheticConfig};
use crate::rng::derive_seed;

/// Where an MCIP instance comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    /// `tiny` or `case_study`.
    Builtin(String),
    /// A JSON instance file, relative to the config file.
    Path(PathBuf),
    Synthetic { seed: u64, #[serde(flatten)] shape: SyntheticConfig },
}

impl InstanceSource {
    pub fn load(&self, base: &Path) -> Result<McipInstance> {
        match self {
            InstanceSource::Builtin(name) => match name.as_str() {
                "tiny" => Ok(McipInstance::tiny()),
                "case_study" => Ok(McipInstance::case_study()),
                other => Err(Error::InvalidInput(format!("unknown builtin instance '{other}' (tiny, case_study)"))),
            },
            InstanceSource::Path(p) => McipInstance::from_json(&fs::read_to_string(base.join(p))?),
            InstanceSource::Synthetic { seed, shape } => McipInstance::synthetic(*seed, shape),
        }
    }
}

impl Default for InstanceSource {
    fn default() -> Self {
        InstanceSource::Builtin("tiny".into())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FviRunConfig {
    pub instance: InstanceSource,
    pub fvi: FviConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSuite {
    pub name: String,
    pub instances: usize,
    pub shape: RandomInstanceConfig,
}

impl Default for BenchSuite {
    fn default() -> Self {
        Self { name: "suite".into(), instances: 10, shape: RandomInstanceConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McdBenchConfig {
    pub seed: u64,
    pub suites: Vec<BenchSuite>,
    pub engines: Vec<Engine>,
    /// Stopping rule shared by the decomposition engines.
    pub stop: McdConfig,
}

impl Default for McdBenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suites: Vec::new(),
            engines: vec![Engine::BruteForce, Engine::LShaped, Engine::Mcd],
            stop: McdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseStudyConfig {
    pub instance: InstanceSource,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpOracleConfig {
    pub instance: InstanceSource,
    /// A fitted value set (as written by `fvi-run`) to compare against.
    pub values: Option<PathBuf>,
}

/// Overrides applied from the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub engine: Option<Engine>,
}

/// Hex SHA-256 of the config as canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Parses a config file; unknown fields are rejected.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// A CSV document: a hash comment line, a header and records.
struct CsvOut {
    buf: csv::Writer<Vec<u8>>,
    hash_line: String,
}

impl CsvOut {
    fn new(hash: &str, header: &[&str]) -> Result<Self> {
        let mut buf = csv::Writer::from_writer(Vec::new());
        buf.write_record(header)?;
        Ok(Self { buf, hash_line: format!("# config_hash={hash}\n") })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<()> {
        self.buf.write_record(fields.into_iter().collect::<Vec<_>>())?;
        Ok(())
    }

    fn into_bytes(self) -> Result<Vec<u8>> {
        let body = self.buf.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut out = self.hash_line.into_bytes();
        out.extend(body);
        Ok(out)
    }

    fn write(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.into_bytes()?)
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn money(v: f64) -> String {
    format!("{v:.6}")
}

struct Timings {
    out: CsvOut,
}

impl Timings {
    fn new(hash: &str) -> Result<Self> {
        Ok(Self { out: CsvOut::new(hash, &["stage", "seconds"])? })
    }

    fn record(&mut self, stage: impl Into<String>, start: Instant) -> Result<()> {
        self.out.row([stage.into(), format!("{:.6}", start.elapsed().as_secs_f64())])
    }
}

/// Runs NN-FVI and writes `fvi_run.csv`, `values.json` and `timings.csv`.
pub fn cmd_fvi_run(config_path: &Path, out: &Path, overrides: Overrides) -> Result<()> {
    let mut cfg: FviRunConfig = load_config(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.fvi.seed = seed;
    }
    if let Some(engine) = overrides.engine {
        cfg.fvi.selection.engine = engine;
    }
    let inst = cfg.instance.load(&base_dir(config_path))?;
    let hash = config_hash(&(&cfg, &inst))?;
    fs::create_dir_all(out)?;
    let mut timings = Timings::new(&hash)?;

    let start = Instant::now();
    let spec = build_mcip_mdp(&inst)?;
    let values = run_nnfvi(&spec, &cfg.fvi)?;
    timings.record("nnfvi", start)?;

    let mut csv = CsvOut::new(
        &hash,
        &["row", "period", "value_currency", "training_loss_currency_sq", "target_mean_currency", "targets_out_of_bounds", "action"],
    )?;
    for fit in &values.fits {
        csv.row([
            "net".into(),
            fit.period.to_string(),
            String::new(),
            format!("{:.10e}", fit.loss),
            money(fit.target_mean),
            fit.out_of_bounds.to_string(),
            String::new(),
        ])?;
    }
    csv.row([
        "initial_value".into(),
        "1".into(),
        money(values.initial_value),
        String::new(),
        String::new(),
        String::new(),
        join(&values.initial_action),
    ])?;
    csv.write(&out.join("fvi_run.csv"))?;
    write_atomic(&out.join("values.json"), values.to_json()?.as_bytes())?;
    timings.out.write(&out.join("timings.csv"))
}

fn join(a: &[i64]) -> String {
    a.iter().map(i64::to_string).collect::<Vec<_>>().join(" ")
}

/// One engine's result on one benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub suite: String,
    pub instance: usize,
    pub result: SelectionResult,
    pub stop_label: String,
    /// `100·(optimum − objective) / |optimum|`.
    pub gap_pct: f64,
    pub seconds: f64,
}

/// Runs every engine on every suite instance. The brute-force optimum is
/// the gap reference.
pub fn run_mcd_bench(cfg: &McdBenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.stop.validate()?;
    let mut records = Vec::new();
    for (si, suite) in cfg.suites.iter().enumerate() {
        for k in 0..suite.instances {
            let inst = random_instance(derive_seed(cfg.seed, &[si as u64, k as u64]), &suite.shape)?;
            let ctx = inst.context()?;
            let problem = SelectionProblem { ctx: &ctx, reward: &inst.reward, discount: inst.spec.discount };
            let optimum = select_action_bruteforce(&problem, cfg.stop.enumeration_cap)?.objective;
            for &engine in &cfg.engines {
                let run_cfg = McdConfig { engine, ..cfg.stop };
                let start = Instant::now();
                let result = select_action(&problem, &run_cfg, None)?;
                let seconds = start.elapsed().as_secs_f64();
                let stop_label = if engine == Engine::BruteForce { "enumeration".into() } else { run_cfg.stop_label() };
                let gap_pct = 100.0 * (optimum - result.objective) / optimum.abs().max(1e-12);
                records.push(BenchRecord { suite: suite.name.clone(), instance: k, result, stop_label, gap_pct, seconds });
            }
        }
    }
    Ok(records)
}

/// Writes `mcd_bench.csv` (per run), `mcd_summary.csv` (per suite and
/// algorithm), `mcd_traces.csv` and `timings.csv`.
pub fn cmd_mcd_bench(config_path: &Path, out: &Path, overrides: Overrides) -> Result<()> {
    let mut cfg: McdBenchConfig = load_config(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(engine) = overrides.engine {
        cfg.engines = vec![engine];
    }
    let hash = config_hash(&cfg)?;
    fs::create_dir_all(out)?;
    let records = run_mcd_bench(&cfg)?;

    let mut runs = CsvOut::new(
        &hash,
        &["suite", "instance", "algorithm", "stop_criterion", "iterations", "objective_currency", "upper_bound_currency", "relative_gap_pct", "action"],
    )?;
    let mut traces = CsvOut::new(
        &hash,
        &["suite", "instance", "algorithm", "iteration", "lower_bound_currency", "upper_bound_currency", "action"],
    )?;
    let mut timings = CsvOut::new(&hash, &["suite", "instance", "algorithm", "cpu_seconds"])?;
    for r in &records {
        runs.row([
            r.suite.clone(),
            r.instance.to_string(),
            r.result.engine.to_string(),
            r.stop_label.clone(),
            r.result.iterations.to_string(),
            money(r.result.objective),
            money(r.result.upper_bound),
            format!("{:.6}", r.gap_pct),
            join(&r.result.action),
        ])?;
        for t in &r.result.trace {
            traces.row([
                r.suite.clone(),
                r.instance.to_string(),
                r.result.engine.to_string(),
                t.iteration.to_string(),
                money(t.lower_bound),
                money(t.upper_bound),
                join(&t.action),
            ])?;
        }
        timings.row([r.suite.clone(), r.instance.to_string(), r.result.engine.to_string(), format!("{:.6}", r.seconds)])?;
    }

    let mut summary = CsvOut::new(
        &hash,
        &["suite", "algorithm", "stop_criterion", "instances", "mean_iterations", "mean_objective_currency", "mean_gap_pct", "max_gap_pct"],
    )?;
    for suite in &cfg.suites {
        for &engine in &cfg.engines {
            let group: Vec<&BenchRecord> =
                records.iter().filter(|r| r.suite == suite.name && r.result.engine == engine).collect();
            if group.is_empty() {
                continue;
            }
            let n = group.len() as f64;
            summary.row([
                suite.name.clone(),
                engine.to_string(),
                group[0].stop_label.clone(),
                group.len().to_string(),
                format!("{:.2}", group.iter().map(|r| r.result.iterations as f64).sum::<f64>() / n),
                money(group.iter().map(|r| r.result.objective).sum::<f64>() / n),
                format!("{:.6}", group.iter().map(|r| r.gap_pct).sum::<f64>() / n),
                format!("{:.6}", group.iter().map(|r| r.gap_pct).fold(f64::NEG_INFINITY, f64::max)),
            ])?;
        }
    }
    runs.write(&out.join("mcd_bench.csv"))?;
    summary.write(&out.join("mcd_summary.csv"))?;
    traces.write(&out.join("mcd_traces.csv"))?;
    timings.write(&out.join("timings.csv"))
}

/// Runs the sensitivity sweep and writes `case_study.csv` and `timings.csv`.
pub fn cmd_case_study(config_path: &Path, out: &Path, overrides: Overrides) -> Result<()> {
    let mut cfg: CaseStudyConfig = load_config(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.sweep.seed = seed;
    }
    if let Some(engine) = overrides.engine {
        cfg.sweep.fvi.selection.engine = engine;
    }
    let inst = cfg.instance.load(&base_dir(config_path))?;
    let hash = config_hash(&(&cfg, &inst))?;
    fs::create_dir_all(out)?;
    let mut timings = Timings::new(&hash)?;
    let start = Instant::now();
    let rows = sensitivity_sweep(&inst, &cfg.sweep)?;
    timings.record("sweep", start)?;

    let mut csv = CsvOut::new(
        &hash,
        &[
            "discount",
            "salvage_ratio",
            "inflexible_capacity",
            "inflexible_enpv_currency",
            "inflexible_se_currency",
            "flexible_enpv_currency",
            "flexible_se_currency",
            "vof_currency",
            "vof_se_currency",
            "improvement_pct",
        ],
    )?;
    for r in &rows {
        csv.row([
            r.discount.to_string(),
            r.salvage_ratio.to_string(),
            join(&r.inflexible_capacity),
            money(r.inflexible_enpv),
            money(r.inflexible_se),
            money(r.flexible_enpv),
            money(r.flexible_se),
            money(r.vof),
            money(r.vof_se),
            format!("{:.4}", r.improvement_pct),
        ])?;
    }
    csv.write(&out.join("case_study.csv"))?;
    timings.out.write(&out.join("timings.csv"))
}

/// Exact DP over the lattice. Writes `dp_values.csv` and `dp_summary.csv`;
/// the summary includes the gap to a supplied fitted value set.
pub fn cmd_dp_oracle(config_path: &Path, out: &Path, _overrides: Overrides) -> Result<()> {
    let cfg: DpOracleConfig = load_config(config_path)?;
    let base = base_dir(config_path);
    let inst = cfg.instance.load(&base)?;
    let values = match &cfg.values {
        Some(p) => Some(FittedValueSet::from_json(&fs::read_to_string(base.join(p))?)?),
        None => None,
    };
    let hash = config_hash(&(&cfg, &inst, &values))?;
    fs::create_dir_all(out)?;
    let mut timings = Timings::new(&hash)?;
    let start = Instant::now();
    let tables = exact_dp(&McipLattice::new(&inst)?)?;
    timings.record("exact_dp", start)?;

    let mut header: Vec<String> = vec!["period".into()];
    header.extend((0..inst.facilities).map(|n| format!("capacity_{n}_units")));
    header.extend((0..inst.customers).map(|i| format!("demand_{i}_units")));
    header.push("value_currency".into());
    header.extend((0..inst.facilities).map(|n| format!("action_{n}_units")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table_csv = CsvOut::new(&hash, &header_refs)?;
    tables.write_csv(&mut table_csv.buf)?;
    table_csv.write(&out.join("dp_values.csv"))?;

    let x1 = build_mcip_mdp(&inst)?.initial_state;
    let exact = tables.value(1, &x1).ok_or_else(|| Error::InvalidInput("initial state is off the lattice".into()))?;
    let mut summary = CsvOut::new(&hash, &["dp_value_currency", "fvi_value_currency", "gap_pct", "dp_action"])?;
    let (fvi, gap) = match &values {
        Some(v) => (money(v.initial_value), format!("{:.6}", 100.0 * (v.initial_value - exact).abs() / exact.abs().max(1e-12))),
        None => (String::new(), String::new()),
    };
    summary.row([money(exact), fvi, gap, join(tables.action(1, &x1).unwrap_or(&[]))])?;
    summary.write(&out.join("dp_summary.csv"))?;
    timings.out.write(&out.join("timings.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = McdBenchConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn csv_starts_with_hash_line() {
        let mut c = CsvOut::new("abc", &["x_units", "y_seconds"]).unwrap();
        c.row(["1".to_string(), "2".to_string()]).unwrap();
        let text = String::from_utf8(c.into_bytes().unwrap()).unwrap();
        assert_eq!(text, "# config_hash=abc\nx_units,y_seconds\n1,2\n");
    }

    #[test]
    fn instance_sources_parse() {
        let s: InstanceSource = serde_json::from_str(r#"{"builtin": "tiny"}"#).unwrap();
        assert_eq!(s.load(Path::new(".")).unwrap(), McipInstance::tiny());
        let s: InstanceSource = serde_json::from_str(r#"{"synthetic": {"seed": 3, "customers": 1}}"#).unwrap();
        assert_eq!(s.load(Path::new(".")).unwrap().customers, 1);
        let s: InstanceSource = serde_json::from_str(r#"{"builtin": "nope"}"#).unwrap();
        assert!(s.load(Path::new(".")).is_err());
    }

    #[test]
    fn empty_bench_has_no_records() {
        assert!(run_mcd_bench(&McdBenchConfig::default()).unwrap().is_empty());
    }
}
