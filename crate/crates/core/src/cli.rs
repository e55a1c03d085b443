//! Command-line front end: configuration, dispatch and report files.
//!
//! A run directory holds `samples.csv` (one row per sample), `summary.json`
//! (aggregates and hashes), two histogram CSVs, `manifest.toml` (the full
//! effective configuration) and, with `--dump-xyz`, one XYZ file per sample.
//! Every file carries the configuration hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::IdentityDecoder;
use crate::error::{Error, Result};
use crate::geomstate::{AtomLabels, NormalSource, PointState};
use crate::guidance::{GuidanceConfig, RadiusOfGyration};
use crate::metrics::{
    energy_above_ground_state, force_rms, min_pair_distance, spsa_cosine_diagnostic, Aggregates,
    Histogram, SampleRecord,
};
use crate::sampler::{EvoConfig, Mode, RunConfig, Sampler};
use crate::schedule::{NoiseSchedule, ScheduleKind, DEFAULT_STEPS};
use crate::testbed::{Testbed, TestbedSpec};
use crate::toyoracle::{
    radius_of_gyration, CountingOracle, Oracle, OracleEval, Relaxation, Relaxer, ToyPotential,
};
use crate::xtb::{parse_xyz, write_xyz_commented, XtbConfig, XtbOracle, BOHR_PER_ANGSTROM};

pub const SAMPLES_SCHEMA: &str = "ogd-samples/1";
pub const SUMMARY_SCHEMA: &str = "ogd-summary/1";
pub const HISTOGRAM_SCHEMA: &str = "ogd-histogram/1";
pub const RELAX_SCHEMA: &str = "ogd-relax/1";
pub const SWEEP_SCALES: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OracleChoice {
    #[default]
    Toy,
    Xtb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxConfig {
    pub max_iters: usize,
    /// Force RMS at which a relaxation counts as converged.
    pub tol: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dump_xyz: bool,
    pub jobs: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ogd-out"),
            dump_xyz: false,
            jobs: None,
        }
    }
}

/// File form of a run. Every field has a default, so an empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub n_samples: usize,
    pub steps: usize,
    pub n_features: usize,
    /// Element symbol written to XYZ files and handed to xTB.
    pub element: String,
    /// Shortest allowed distance for a sample to count as valid.
    pub min_dist: f64,
    pub oracle: OracleChoice,
    pub schedule: ScheduleKind,
    pub guidance: GuidanceConfig,
    pub evo: EvoConfig,
    pub system: TestbedSpec,
    pub relax: RelaxConfig,
    pub xtb: XtbConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unguided,
            seed: 0,
            n_samples: 16,
            steps: DEFAULT_STEPS,
            n_features: 0,
            element: "C".into(),
            min_dist: 0.5,
            oracle: OracleChoice::Toy,
            schedule: ScheduleKind::default(),
            guidance: GuidanceConfig::default(),
            evo: EvoConfig::default(),
            system: TestbedSpec::default(),
            relax: RelaxConfig::default(),
            xtb: XtbConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hashes {
    pub config: String,
    pub schedule: String,
    pub oracle: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config types serialize to json"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::build(self.schedule, self.steps)?;
        self.run_config().validate(self.steps)?;
        self.system.validate()?;
        if self.relax.tol.is_nan() || self.relax.tol <= 0.0 || self.relax.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "relax.tol must be > 0 and relax.max_iters >= 1".into(),
            ));
        }
        if self.element.trim().is_empty() || self.element.contains(char::is_whitespace) {
            return Err(Error::InvalidParameter(format!(
                "element `{}` is not a symbol",
                self.element
            )));
        }
        if self.output.jobs == Some(0) {
            return Err(Error::InvalidParameter("jobs must be >= 1".into()));
        }
        if self.oracle == OracleChoice::Xtb {
            self.xtb.validate()?;
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            n_samples: self.n_samples,
            n_atoms: self.system.n_atoms,
            n_features: self.n_features,
            seed: self.seed,
            mode: self.mode,
            guidance: self.guidance.clone(),
            evo: Some(self.evo),
        }
    }

    /// The xTB section with the environment override applied.
    pub fn effective_xtb(&self) -> XtbConfig {
        self.xtb.clone().with_env_override()
    }

    pub fn hashes(&self) -> Hashes {
        let mut hashed = self.clone();
        hashed.output = OutputConfig::default();
        hashed.xtb = self.effective_xtb();
        Hashes {
            config: json_hash(&hashed),
            schedule: json_hash(&(self.schedule, self.steps)),
            oracle: self.oracle_hash(),
        }
    }

    fn oracle_hash(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            oracle: OracleChoice,
            n_atoms: usize,
            bond_length: f64,
            spring: f64,
            element: &'a str,
            xtb: Option<XtbConfig>,
        }
        json_hash(&Identity {
            oracle: self.oracle,
            n_atoms: self.system.n_atoms,
            bond_length: self.system.bond_length,
            spring: self.system.spring,
            element: &self.element,
            xtb: (self.oracle == OracleChoice::Xtb).then(|| self.effective_xtb()),
        })
    }
}

/// The energy model a run is scored against.
#[derive(Debug, Clone)]
pub enum SystemOracle {
    Toy(ToyPotential),
    Xtb(XtbOracle),
}

impl SystemOracle {
    pub fn build(cfg: &ExperimentConfig, testbed: &Testbed) -> Result<Self> {
        Ok(match cfg.oracle {
            OracleChoice::Toy => SystemOracle::Toy(testbed.potential.clone()),
            OracleChoice::Xtb => SystemOracle::Xtb(XtbOracle::new(
                cfg.effective_xtb(),
                Some(AtomLabels::uniform(&cfg.element, cfg.system.n_atoms)),
            )?),
        })
    }
}

impl Oracle for SystemOracle {
    fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval {
        match self {
            SystemOracle::Toy(p) => p.evaluate(positions),
            SystemOracle::Xtb(x) => x.evaluate(positions),
        }
    }
}

impl Relaxer for SystemOracle {
    fn relax(&self, positions: &DMatrix<f64>, max_iters: usize, tol: f64) -> Relaxation {
        match self {
            SystemOracle::Toy(p) => Relaxer::relax(p, positions, max_iters, tol),
            SystemOracle::Xtb(x) => x.relax(positions, max_iters, tol),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub hashes: Hashes,
    pub mode: Option<Mode>,
    pub scale: Option<f64>,
    pub property_scale: Option<f64>,
    pub seed: Option<u64>,
    pub target: Option<f64>,
    pub n_atoms: usize,
    pub oracle_calls: usize,
    pub pooled_sq_sum: f64,
    pub pooled_count: usize,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

/// The subset of a summary that `report` needs; tolerant of NaN aggregates
/// (written as `null`).
#[derive(Debug, Deserialize)]
struct SummaryHead {
    hashes: Hashes,
    mode: Option<Mode>,
    target: Option<f64>,
    n_atoms: usize,
    oracle_calls: usize,
    pooled_sq_sum: Option<f64>,
    pooled_count: usize,
}

pub struct RunOutcome {
    pub states: Vec<PointState>,
    pub records: Vec<SampleRecord>,
    pub summary: RunSummary,
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Scores one final sample.
pub fn score_sample<R: Relaxer + ?Sized>(
    index: usize,
    positions: &DMatrix<f64>,
    oracle: &R,
    relax: &RelaxConfig,
    min_dist: f64,
) -> (SampleRecord, f64) {
    let eval = oracle.evaluate(positions);
    let gap = energy_above_ground_state(oracle, positions, relax.max_iters, relax.tol);
    let valid = gap.relaxation_converged && min_pair_distance(positions) > min_dist;
    let record = SampleRecord {
        index,
        force_rms: force_rms(&eval.gradient),
        energy: eval.energy,
        energy_above_gs: gap.value,
        property_value: radius_of_gyration(positions).0,
        valid,
    };
    (record, eval.gradient.norm_squared())
}

/// Samples and scores a run without touching the filesystem.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let testbed = cfg.system.build()?;
    let schedule = NoiseSchedule::build(cfg.schedule, cfg.steps)?;
    let oracle = CountingOracle::new(SystemOracle::build(cfg, &testbed)?);
    let run = cfg.run_config();
    let sampler = Sampler::new(
        &schedule,
        &testbed.denoiser,
        &IdentityDecoder,
        Some(&oracle),
        Some(&RadiusOfGyration),
        &run,
    )?;
    let (states, scored) = with_pool(cfg.output.jobs, || -> Result<_> {
        let states = sampler.run()?;
        let scored: Vec<(SampleRecord, f64)> = states
            .par_iter()
            .enumerate()
            .map(|(i, s)| score_sample(i, s.positions(), oracle.inner(), &cfg.relax, cfg.min_dist))
            .collect();
        Ok((states, scored))
    })??;
    let pooled_sq_sum = scored.iter().map(|(_, sq)| sq).sum::<f64>();
    let records: Vec<SampleRecord> = scored.into_iter().map(|(r, _)| r).collect();
    let pooled_count = 3 * cfg.system.n_atoms * records.len();
    let target = Some(cfg.guidance.target);
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        hashes: cfg.hashes(),
        mode: Some(cfg.mode),
        scale: Some(cfg.guidance.scale),
        property_scale: Some(cfg.guidance.property_scale),
        seed: Some(cfg.seed),
        target,
        n_atoms: cfg.system.n_atoms,
        oracle_calls: oracle.calls(),
        pooled_sq_sum,
        pooled_count,
        aggregates: Aggregates::from_records(&records, target, pooled_sq_sum, pooled_count),
        sources: Vec::new(),
    };
    Ok(RunOutcome {
        states,
        records,
        summary,
    })
}

fn header_line(schema: &str, hashes: &Hashes, extra: &str) -> String {
    format!(
        "# {schema} config={} schedule={} oracle={}{extra}\n",
        hashes.config, hashes.schedule, hashes.oracle
    )
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn samples_csv(records: &[SampleRecord], hashes: &Hashes) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in records {
        wtr.serialize(r).map_err(csv_error)?;
    }
    let body = wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = header_line(SAMPLES_SCHEMA, hashes, "");
    if records.is_empty() {
        out.push_str("index,force_rms,energy,energy_above_gs,property_value,valid\n");
    }
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(out)
}

pub fn read_samples_csv(text: &str) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(csv_error)).collect()
}

fn histogram_csv(h: &Histogram, hashes: &Hashes, quantity: &str) -> String {
    let mut out = header_line(
        HISTOGRAM_SCHEMA,
        hashes,
        &format!(" quantity={quantity} non_finite={}", h.non_finite),
    );
    out.push_str("bin_start,count\n");
    for (edge, count) in h.edges.iter().zip(&h.counts) {
        out.push_str(&format!("{edge},{count}\n"));
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    hashes: &'a Hashes,
    config: &'a ExperimentConfig,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn summary_json(summary: &RunSummary) -> String {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    text
}

fn write_reports(
    dir: &Path,
    records: &[SampleRecord],
    summary: &RunSummary,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("samples.csv"), &samples_csv(records, &summary.hashes)?)?;
    write_file(&dir.join("summary.json"), &summary_json(summary))?;
    let agg = &summary.aggregates;
    write_file(
        &dir.join("histogram_force_rms.csv"),
        &histogram_csv(&agg.force_rms_histogram, &summary.hashes, "force_rms"),
    )?;
    write_file(
        &dir.join("histogram_energy_above_gs.csv"),
        &histogram_csv(&agg.energy_above_gs_histogram, &summary.hashes, "energy_above_gs"),
    )?;
    Ok(())
}

/// Writes every file of a run directory.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome, command: &str) -> Result<()> {
    write_reports(dir, &outcome.records, &outcome.summary)?;
    let hashes = &outcome.summary.hashes;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        hashes,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join("manifest.toml"), &format!("# ogd run manifest\n{text}"))?;
    if cfg.output.dump_xyz {
        let xyz_dir = dir.join("xyz");
        fs::create_dir_all(&xyz_dir)?;
        let labels = AtomLabels::uniform(&cfg.element, cfg.system.n_atoms);
        for (i, state) in outcome.states.iter().enumerate() {
            let positions = match cfg.oracle {
                OracleChoice::Xtb => state.positions() / BOHR_PER_ANGSTROM,
                OracleChoice::Toy => state.positions().clone(),
            };
            let comment = format!("config={} index={i}", hashes.config);
            let text = write_xyz_commented(&labels, &positions, &comment)?;
            write_file(&xyz_dir.join(format!("sample_{i:05}.xyz")), &text)?;
        }
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "ogd", version, about = "Oracle-guided diffusion sampling of 3D point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw samples in any mode and write a run directory.
    Sample(RunArgs),
    /// Repeat a run over a grid of guidance scales.
    Sweep(SweepArgs),
    /// Compare SPSA estimates with analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Relax XYZ geometries and report the energy released.
    Relax(RelaxArgs),
    /// Merge saved runs into one report.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub property_scale: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub skip: Option<usize>,
    #[arg(long)]
    pub clean_steps: Option<usize>,
    #[arg(long)]
    pub clean_lr: Option<f64>,
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long)]
    pub probes: Option<usize>,
    /// Number of samples.
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleChoice>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dump_xyz: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.mode => cfg.mode);
        set!(self.scale => cfg.guidance.scale);
        set!(self.property_scale => cfg.guidance.property_scale);
        set!(self.zeta => cfg.guidance.zeta);
        set!(self.window => cfg.guidance.window);
        set!(self.skip => cfg.guidance.skip);
        set!(self.clean_steps => cfg.guidance.clean_steps);
        set!(self.clean_lr => cfg.guidance.clean_lr);
        set!(self.target => cfg.guidance.target);
        set!(self.probes => cfg.guidance.probes);
        set!(self.n => cfg.n_samples);
        set!(self.atoms => cfg.system.n_atoms);
        set!(self.steps => cfg.steps);
        set!(self.seed => cfg.seed);
        set!(self.oracle => cfg.oracle);
        set!(self.out => cfg.output.dir);
        if self.jobs.is_some() {
            cfg.output.jobs = self.jobs;
        }
        if self.dump_xyz {
            cfg.output.dump_xyz = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated guidance scales.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fixture {
    /// `0.5 * sum_k w_k x_k^2` with weights 1, 2, 3 cycling over components.
    Quadratic,
    /// Energy of the all-pairs harmonic testbed cluster.
    Harmonic,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    #[arg(long, default_value_t = 10)]
    pub states: usize,
    #[arg(long, default_value_t = 5)]
    pub atoms: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub zeta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Fixture::Quadratic)]
    pub fixture: Fixture,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for `gradcheck.json`; stdout only if unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RelaxArgs {
    /// XYZ files, or directories searched for `*.xyz`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleChoice>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Run directories to merge.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_status(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::InvalidSpec(_)
        | Error::ExecutableMissing(_)
        | Error::LabelMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Sample(args) => cmd_sample(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Relax(args) => cmd_relax(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn cmd_sample(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let outcome = run_experiment(&cfg)?;
    write_run(&cfg.output.dir, &cfg, &outcome, "sample")?;
    let agg = &outcome.summary.aggregates;
    println!(
        "{} samples, mode {}, mean force RMS {:.6e}, mean energy above ground state {:.6e}, oracle calls {}",
        agg.n_samples, cfg.mode, agg.mean_force_rms, agg.mean_energy_above_gs, outcome.summary.oracle_calls
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    scale: f64,
    dir: String,
    config_hash: String,
    mean_force_rms: f64,
    median_force_rms: f64,
    mean_energy_above_gs: f64,
    property_mae: Option<f64>,
    validity: f64,
    oracle_calls: usize,
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.run.resolve()?;
    let scales = args.scales.clone().unwrap_or_else(|| SWEEP_SCALES.to_vec());
    if scales.is_empty() {
        return Err(Error::InvalidParameter("scales must not be empty".into()));
    }
    let root = base.output.dir.clone();
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in &scales {
        let mut cfg = base.clone();
        cfg.guidance.scale = scale;
        let name = format!("scale-{scale:e}");
        cfg.output.dir = root.join(&name);
        cfg.validate()?;
        let outcome = run_experiment(&cfg)?;
        write_run(&cfg.output.dir, &cfg, &outcome, "sweep")?;
        let agg = &outcome.summary.aggregates;
        rows.push(SweepRow {
            scale,
            dir: name,
            config_hash: outcome.summary.hashes.config.clone(),
            mean_force_rms: agg.mean_force_rms,
            median_force_rms: agg.median_force_rms,
            mean_energy_above_gs: agg.mean_energy_above_gs,
            property_mae: agg.property_mae,
            validity: agg.validity,
            oracle_calls: outcome.summary.oracle_calls,
        });
        println!("scale {scale:e}: mean force RMS {:.6e}", agg.mean_force_rms);
    }
    let hashes = base.hashes();
    let mut csv_out = header_line("ogd-sweep/1", &hashes, "");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        wtr.serialize(row).map_err(csv_error)?;
    }
    csv_out.push_str(&String::from_utf8(wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?).expect("utf-8"));
    write_file(&root.join("comparison.csv"), &csv_out)?;
    let json = serde_json::json!({
        "schema": "ogd-sweep/1",
        "hashes": hashes,
        "mode": base.mode,
        "runs": rows,
    });
    write_file(
        &root.join("comparison.json"),
        &format!("{}\n", serde_json::to_string_pretty(&json).expect("json")),
    )?;
    Ok(())
}

/// Gradient-check report, as printed and saved by `gradcheck`.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub fixture: Fixture,
    pub states: usize,
    pub probes: usize,
    pub zeta: f64,
    pub min_mean_estimate_cosine: f64,
    pub median_per_probe_cosine: f64,
    pub max_rel_error: f64,
    pub degenerate_states: usize,
}

fn quadratic_weights(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 3, |i, c| 1.0 + ((3 * i + c) % 3) as f64)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<GradcheckSummary> {
    if args.probes == 0 || args.states == 0 || args.atoms == 0 {
        return Err(Error::InvalidParameter(
            "probes, states and atoms must be >= 1".into(),
        ));
    }
    if args.zeta.is_nan() || args.zeta <= 0.0 {
        return Err(Error::InvalidParameter("zeta must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let diag = match args.fixture {
        Fixture::Quadratic => {
            let w = quadratic_weights(args.atoms);
            let states: Vec<DMatrix<f64>> =
                (0..args.states).map(|_| rng.position_block(args.atoms)).collect();
            let objective = |x: &DMatrix<f64>| Some(0.5 * x.component_mul(x).dot(&w));
            let gradient = |x: &DMatrix<f64>| x.component_mul(&w);
            with_pool(args.jobs, || {
                spsa_cosine_diagnostic(objective, gradient, &states, args.probes, args.zeta, false, &mut rng)
            })?
        }
        Fixture::Harmonic => {
            let bed = TestbedSpec {
                n_atoms: args.atoms.max(2),
                ..Default::default()
            }
            .build()?;
            let states: Vec<DMatrix<f64>> = (0..args.states)
                .map(|_| &bed.reference + rng.position_block(bed.spec.n_atoms) * 0.3)
                .collect();
            let pot = &bed.potential;
            let objective = |x: &DMatrix<f64>| {
                let e = pot.evaluate(x);
                e.converged.then_some(e.energy)
            };
            let gradient = |x: &DMatrix<f64>| pot.evaluate(x).gradient;
            with_pool(args.jobs, || {
                spsa_cosine_diagnostic(objective, gradient, &states, args.probes, args.zeta, false, &mut rng)
            })?
        }
    };
    Ok(GradcheckSummary {
        fixture: args.fixture,
        states: args.states,
        probes: args.probes,
        zeta: args.zeta,
        min_mean_estimate_cosine: diag.min_mean_estimate(),
        median_per_probe_cosine: diag.median_per_probe(),
        max_rel_error: diag.max_rel_error(),
        degenerate_states: diag.degenerate_states,
    })
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let summary = gradcheck(args)?;
    let text = format!(
        "{}\n",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("gradcheck.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn collect_xyz(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
                .collect();
            found.sort();
            files.extend(found);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(Error::Config(format!("{}: no such file", input.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no xyz inputs found".into()));
    }
    Ok(files)
}

#[derive(Debug, Serialize)]
struct RelaxRow {
    file: String,
    n_atoms: usize,
    energy: f64,
    relaxed_energy: f64,
    energy_above_gs: f64,
    force_rms_before: f64,
    force_rms_after: f64,
    converged: bool,
    iterations: usize,
}

fn cmd_relax(args: &RelaxArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = args.oracle {
        cfg.oracle = o;
    }
    if let Some(m) = args.max_iters {
        cfg.relax.max_iters = m;
    }
    if let Some(t) = args.tol {
        cfg.relax.tol = t;
    }
    if args.jobs.is_some() {
        cfg.output.jobs = args.jobs;
    }
    let files = collect_xyz(&args.inputs)?;
    let mut inputs = Vec::with_capacity(files.len());
    for path in &files {
        let text = fs::read_to_string(path)?;
        let (labels, positions) =
            parse_xyz(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        inputs.push((path.clone(), labels, positions));
    }
    let n = inputs[0].2.nrows();
    if inputs.iter().any(|(_, _, p)| p.nrows() != n) {
        return Err(Error::Config("all inputs must have the same atom count".into()));
    }
    cfg.system.n_atoms = n;
    if cfg.oracle == OracleChoice::Xtb {
        cfg.element = inputs[0].1 .0[0].clone();
    }
    cfg.validate()?;
    let testbed = cfg.system.build()?;
    let oracle = SystemOracle::build(&cfg, &testbed)?;
    let unit = match cfg.oracle {
        OracleChoice::Xtb => BOHR_PER_ANGSTROM,
        OracleChoice::Toy => 1.0,
    };
    let results: Vec<(RelaxRow, Relaxation)> = with_pool(cfg.output.jobs, || {
        inputs
            .par_iter()
            .map(|(path, _, positions)| {
                let positions = positions * unit;
                let before = oracle.evaluate(&positions);
                let relaxed = oracle.relax(&positions, cfg.relax.max_iters, cfg.relax.tol);
                let after = oracle.evaluate(&relaxed.positions);
                let row = RelaxRow {
                    file: path.display().to_string(),
                    n_atoms: positions.nrows(),
                    energy: before.energy,
                    relaxed_energy: relaxed.energy,
                    energy_above_gs: before.energy - relaxed.energy,
                    force_rms_before: force_rms(&before.gradient),
                    force_rms_after: force_rms(&after.gradient),
                    converged: relaxed.converged && before.converged,
                    iterations: relaxed.iterations,
                };
                (row, relaxed)
            })
            .collect()
    })?;

    let hashes = cfg.hashes();
    fs::create_dir_all(&args.out)?;
    let relaxed_dir = args.out.join("relaxed");
    fs::create_dir_all(&relaxed_dir)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for ((row, relaxed), (path, labels, _)) in results.iter().zip(&inputs) {
        wtr.serialize(row).map_err(csv_error)?;
        let name = path.file_name().map(|s| s.to_owned()).unwrap_or_default();
        let comment = format!("config={} relaxed", hashes.config);
        let text = write_xyz_commented(labels, &(&relaxed.positions / unit), &comment)?;
        write_file(&relaxed_dir.join(name), &text)?;
    }
    let mut out = header_line(RELAX_SCHEMA, &hashes, "");
    out.push_str(&String::from_utf8(wtr.into_inner().map_err(|e| Error::Parse(e.to_string()))?).expect("utf-8"));
    write_file(&args.out.join("relax.csv"), &out)?;
    let converged = results.iter().filter(|(r, _)| r.converged).count();
    println!("relaxed {} structures, {converged} converged", results.len());
    Ok(())
}

/// Merges run directories that share schedule and oracle hashes.
pub fn merge_runs(runs: &[PathBuf]) -> Result<(Vec<SampleRecord>, RunSummary)> {
    let mut heads = Vec::with_capacity(runs.len());
    let mut records = Vec::new();
    for dir in runs {
        let text = fs::read_to_string(dir.join("summary.json"))?;
        let head: SummaryHead = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", dir.display())))?;
        let text = fs::read_to_string(dir.join("samples.csv"))?;
        for mut r in read_samples_csv(&text)? {
            r.index = records.len();
            records.push(r);
        }
        heads.push(head);
    }
    let first = &heads[0];
    for (head, dir) in heads.iter().zip(runs).skip(1) {
        if head.hashes.schedule != first.hashes.schedule {
            return Err(Error::Config(format!(
                "refusing to merge {}: schedule hash differs",
                dir.display()
            )));
        }
        if head.hashes.oracle != first.hashes.oracle {
            return Err(Error::Config(format!(
                "refusing to merge {}: oracle hash differs",
                dir.display()
            )));
        }
        if head.n_atoms != first.n_atoms {
            return Err(Error::Config(format!(
                "refusing to merge {}: atom count differs",
                dir.display()
            )));
        }
    }
    let same = |f: fn(&SummaryHead) -> Option<String>| {
        let v = f(first);
        heads.iter().all(|h| f(h) == v)
    };
    let mode = same(|h| h.mode.map(|m| m.to_string())).then_some(first.mode).flatten();
    let target = same(|h| h.target.map(|t| t.to_string())).then_some(first.target).flatten();
    let pooled_sq_sum = heads.iter().map(|h| h.pooled_sq_sum.unwrap_or(f64::NAN)).sum();
    let pooled_count = heads.iter().map(|h| h.pooled_count).sum();
    let joined: Vec<&str> = heads.iter().map(|h| h.hashes.config.as_str()).collect();
    let hashes = Hashes {
        config: sha256_hex(joined.join(",").as_bytes()),
        schedule: first.hashes.schedule.clone(),
        oracle: first.hashes.oracle.clone(),
    };
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        hashes,
        mode,
        scale: None,
        property_scale: None,
        seed: None,
        target,
        n_atoms: first.n_atoms,
        oracle_calls: heads.iter().map(|h| h.oracle_calls).sum(),
        pooled_sq_sum,
        pooled_count,
        aggregates: Aggregates::from_records(&records, target, pooled_sq_sum, pooled_count),
        sources: runs.iter().map(|p| p.display().to_string()).collect(),
    };
    Ok((records, summary))
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (records, summary) = merge_runs(&args.runs)?;
    write_reports(&args.out, &records, &summary)?;
    println!(
        "merged {} runs, {} samples, mean force RMS {:.6e}",
        args.runs.len(),
        records.len(),
        summary.aggregates.mean_force_rms
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[guidance]\nsclae = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sclae"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert_eq!(exit_status(&err), 2);
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            "mode = \"bilevel-noisy\"\nsteps = 50\n[schedule]\nkind = \"constant\"\nbeta = 0.01\n\
             [guidance]\nscale = 0.1\nwindow = 10\n[system]\nn_atoms = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::BilevelNoisy);
        assert_eq!(cfg.schedule, ScheduleKind::Constant { beta: 0.01 });
        assert_eq!(cfg.guidance.window, 10);
        assert_eq!(cfg.system.n_atoms, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file_values() {
        let args = RunArgs {
            scale: Some(0.5),
            n: Some(3),
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.guidance.scale, 0.5);
        assert_eq!(cfg.n_samples, 3);
    }

    #[test]
    fn output_location_does_not_change_the_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        b.output.jobs = Some(3);
        assert_eq!(a.hashes(), b.hashes());
        b.seed = 1;
        assert_ne!(a.hashes().config, b.hashes().config);
        assert_eq!(a.hashes().schedule, b.hashes().schedule);
    }

    #[test]
    fn samples_csv_round_trips() {
        let records = vec![
            SampleRecord {
                index: 0,
                force_rms: 0.25,
                energy: 1.5,
                energy_above_gs: 1.5,
                property_value: 0.9,
                valid: true,
            },
            SampleRecord {
                index: 1,
                force_rms: f64::NAN,
                energy: f64::NAN,
                energy_above_gs: -0.0,
                property_value: 1e-300,
                valid: false,
            },
        ];
        let hashes = ExperimentConfig::default().hashes();
        let text = samples_csv(&records, &hashes).unwrap();
        assert!(text.starts_with("# ogd-samples/1 config="));
        let back = read_samples_csv(&text).unwrap();
        assert_eq!(back[0], records[0]);
        assert!(back[1].force_rms.is_nan());
        assert_eq!(back[1].property_value, 1e-300);
    }

    #[test]
    fn quadratic_gradcheck_fixture() {
        let summary = gradcheck(&GradcheckArgs {
            probes: 20_000,
            states: 3,
            atoms: 4,
            zeta: 1e-6,
            seed: 1,
            fixture: Fixture::Quadratic,
            jobs: None,
            out: None,
        })
        .unwrap();
        assert!(summary.min_mean_estimate_cosine > 0.97, "{summary:?}");
    }
}
