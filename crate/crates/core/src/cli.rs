//! The `rectflow` command line: `train`, `sample`, `compare`, `verify` and
//! `plot`, each driven by a JSON run configuration.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numeric or
//! runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::{ConditionalDataset, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::field::{CountingField, VelocityField};
use crate::guidance::GuidanceStrategy;
use crate::model::{self, MlpVelocityField, ModelSpec, TrainingMeta};
use crate::numerics::RngStream;
use crate::plot::{render_svg, PlotOptions};
use crate::report::{self, write_file};
use crate::sampler::{sample, SampleOutput, SamplerConfig};
use crate::training::{train, OracleProbes, TrainConfig};
use crate::verify::{self, BoundEstimates, DeviationPoint, Region};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed stream for held-out reference data.
const DATA_STREAM: u64 = 0xDA7A;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// The full run configuration. Unknown keys are rejected everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_guidance")]
    pub guidance: GuidanceStrategy,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Checkpoint path; defaults to `<output_dir>/model.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_guidance() -> GuidanceStrategy {
    GuidanceStrategy::None
}

fn default_gamma() -> f64 {
    1.0
}

fn default_projections() -> usize {
    64
}

fn default_reference_points() -> usize {
    5000
}

fn default_manifold_t() -> f64 {
    0.5
}

fn default_bank_size() -> usize {
    20_000
}

/// Strategies to compare on shared seeds, optionally at several step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default)]
    pub strategies: Vec<GuidanceStrategy>,
    /// Adds `rect_cfgpp` with each `lambda_max` (and `gamma`).
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Adds `cfg` with each `omega`.
    #[serde(default)]
    pub omega_grid: Vec<f64>,
    /// Step counts; each gets its own block. Defaults to the sampler's.
    #[serde(default)]
    pub nfe: Vec<usize>,
    #[serde(default = "default_reference_points")]
    pub reference_points: usize,
    #[serde(default = "default_projections")]
    pub n_projections: usize,
    #[serde(default = "default_manifold_t")]
    pub manifold_t: f64,
    #[serde(default = "default_bank_size")]
    pub bank_size: usize,
}

impl CompareConfig {
    pub fn all_strategies(&self) -> Vec<GuidanceStrategy> {
        let mut out = self.strategies.clone();
        out.extend(self.lambda_grid.iter().map(|&l| GuidanceStrategy::rect(l, self.gamma)));
        out.extend(self.omega_grid.iter().map(|&omega| GuidanceStrategy::Cfg { omega }));
        out
    }
}

fn default_probes() -> usize {
    10_000
}

fn default_lemma_states() -> usize {
    2000
}

fn default_dts() -> Vec<f64> {
    vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0]
}

fn default_margin() -> f64 {
    1.0
}

fn default_deviation_times() -> Vec<f64> {
    vec![1.0, 0.75, 0.5, 0.25, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    #[serde(default = "default_lemma_states")]
    pub lemma_states: usize,
    #[serde(default = "default_dts")]
    pub dts: Vec<f64>,
    /// Padding around the sampled states when building the probe region.
    #[serde(default = "default_margin")]
    pub region_margin: f64,
    #[serde(default = "default_deviation_times")]
    pub deviation_times: Vec<f64>,
    #[serde(default = "default_projections")]
    pub n_projections: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_probes: default_probes(),
            lemma_states: default_lemma_states(),
            dts: default_dts(),
            region_margin: default_margin(),
            deviation_times: default_deviation_times(),
            n_projections: default_projections(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Seeds are propagated into the sub-configs.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.apply_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.build()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.guidance.validate()?;
        if let Some(c) = &self.compare {
            for s in c.all_strategies() {
                s.validate()?;
            }
            if c.nfe.contains(&0) {
                return Err(Error::Config("compare.nfe entries must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.ckpt"))
    }
}

/// Map an error onto the documented exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } | Error::StrategyFailed { .. } | Error::NanLoss { .. } | Error::Schedule { .. } => {
            EXIT_RUNTIME
        }
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rectflow",
    version,
    about = "Toy rectified-flow training, guided sampling and bound checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a velocity field and write the checkpoint and loss curve.
    Train(RunArgs),
    /// Sample from a checkpoint with the configured guidance rule.
    Sample(RunArgs),
    /// Run several guidance rules on shared seeds and tabulate metrics.
    Compare(RunArgs),
    /// Estimate bound constants and check the stability statements.
    Verify(RunArgs),
    /// Render a trajectory CSV to SVG.
    Plot {
        /// Trajectory CSV written by `sample`.
        trajectory: PathBuf,
        /// Output SVG path.
        #[arg(long, default_value = "trajectory.svg")]
        out: PathBuf,
        /// Comma-separated steps to draw, one panel each.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Draw each chain's path.
        #[arg(long)]
        paths: bool,
        /// Run configuration whose dataset supplies the target stars.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name) and run. Returns the exit
/// code; diagnostics go to standard error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_run(args: &RunArgs) -> Result<RunConfig> {
    let mut c = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        c.apply_seed(seed);
    }
    if let Some(out) = &args.out {
        c.output_dir = out.clone();
    }
    Ok(c)
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train(a) => cmd_train(&load_run(&a)?),
        Command::Sample(a) => cmd_sample(&load_run(&a)?),
        Command::Compare(a) => cmd_compare(&load_run(&a)?),
        Command::Verify(a) => cmd_verify(&load_run(&a)?),
        Command::Plot {
            trajectory,
            out,
            steps,
            paths,
            config,
        } => cmd_plot(&trajectory, &out, steps, paths, config.as_deref()),
    }
}

fn oracle_probes(dataset: &ConditionalDataset, seed: u64) -> Result<Option<OracleProbes>> {
    match dataset.kind() {
        DatasetKind::GaussianSingle | DatasetKind::GaussianMixture => {
            Ok(Some(OracleProbes::sample(dataset, 10_000, seed)?))
        }
        _ => Ok(None),
    }
}

/// Train from scratch and write `model.ckpt` and `loss.csv`.
pub fn cmd_train(c: &RunConfig) -> Result<String> {
    let dataset = c.dataset.build()?;
    let mut field = MlpVelocityField::new(dataset.dim(), dataset.num_labels(), &c.model, c.seed)?;
    let probes = oracle_probes(&dataset, c.seed)?;
    let rep = train(&mut field, &dataset, &c.train, probes.as_ref())?;
    let meta = TrainingMeta {
        epochs: c.train.epochs as u64,
        final_loss: rep.final_loss().unwrap_or(f64::NAN),
        seed: c.seed,
    };
    let ckpt = c.checkpoint_path();
    write_file(&ckpt, &model::save(&field, &meta))?;

    let rmse: std::collections::BTreeMap<usize, f64> = rep.oracle_rmse.iter().copied().collect();
    let rows: Vec<Vec<String>> = rep
        .loss
        .iter()
        .map(|(e, l)| {
            vec![
                e.to_string(),
                format!("{l}"),
                rmse.get(e).map(|r| format!("{r}")).unwrap_or_default(),
            ]
        })
        .collect();
    let mut buf = Vec::new();
    report::write_table(&mut buf, &["epoch".into(), "loss".into(), "oracle_rmse".into()], &rows)?;
    write_file(&c.output_dir.join("loss.csv"), &buf)?;

    let mut summary = format!("trained {} epochs, final loss {}", c.train.epochs, meta.final_loss);
    if let Some(p) = &probes {
        summary += &format!(", oracle rmse {}", p.rmse(&field)?);
    }
    Ok(format!("{summary}; wrote {}", ckpt.display()))
}

/// Load the configured checkpoint and check it matches the dataset.
pub fn load_checkpoint(c: &RunConfig, dataset: &ConditionalDataset) -> Result<MlpVelocityField> {
    let path = c.checkpoint_path();
    let bytes =
        std::fs::read(&path).map_err(|e| Error::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let (field, _) = model::load(&bytes)?;
    if field.dim() != dataset.dim() || field.num_labels() != dataset.num_labels() {
        return Err(Error::Input(format!(
            "checkpoint is for d={}, K={} but the dataset has d={}, K={}",
            field.dim(),
            field.num_labels(),
            dataset.dim(),
            dataset.num_labels()
        )));
    }
    Ok(field)
}

/// Write `samples.csv`, plus `trajectory.csv` when recording.
pub fn cmd_sample(c: &RunConfig) -> Result<String> {
    let dataset = c.dataset.build()?;
    let field = load_checkpoint(c, &dataset)?;
    let out = sample(&field, &c.guidance, &c.sampler)?;
    let mut buf = Vec::new();
    report::final_points_csv(&mut buf, &out.chains, dataset.dim())?;
    let samples = c.output_dir.join("samples.csv");
    write_file(&samples, &buf)?;
    let mut summary = format!(
        "sampled {} chains with {}; wrote {}",
        out.chains.len(),
        c.guidance.label(),
        samples.display()
    );
    if c.sampler.record_trajectory {
        let mut buf = Vec::new();
        report::trajectory_csv(&mut buf, &out.chains, dataset.dim())?;
        let path = c.output_dir.join("trajectory.csv");
        write_file(&path, &buf)?;
        summary += &format!(" and {}", path.display());
    }
    if !out.failed.is_empty() {
        summary += &format!(" ({} chains dropped as non-finite)", out.failed.len());
    }
    Ok(summary)
}

/// One strategy's metrics in a compare block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub strategy: GuidanceStrategy,
    pub nfe_total: u64,
    /// Mean over labels of the per-label sliced Wasserstein distance.
    pub sw_to_data: f64,
    pub energy_distance: f64,
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub manifold_p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareBlock {
    pub n_steps: usize,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub n_chains: usize,
    pub blocks: Vec<CompareBlock>,
}

/// `n` held-out data points with labels cycling through `0..K`.
pub fn reference_data(dataset: &ConditionalDataset, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
    let k = dataset.num_labels();
    let root = RngStream::new(seed, DATA_STREAM);
    (0..n)
        .map(|i| {
            let y = i % k;
            let mut rng = root.split(i as u64);
            Ok((dataset.sample_data(y, &mut rng)?, y))
        })
        .collect()
}

/// Mean over labels of `SW(samples | y, data | y)`; labels absent from
/// either set are skipped.
pub fn per_label_sw(
    samples: &[(Vec<f64>, usize)],
    data: &[(Vec<f64>, usize)],
    num_labels: usize,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for y in 0..num_labels {
        let a: Vec<Vec<f64>> = samples.iter().filter(|p| p.1 == y).map(|p| p.0.clone()).collect();
        let b: Vec<Vec<f64>> = data.iter().filter(|p| p.1 == y).map(|p| p.0.clone()).collect();
        if a.len() < 2 || b.len() < 2 {
            continue;
        }
        total += verify::sliced_wasserstein(&a, &b, n_projections, seed)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input(
            "no label has enough points for a sliced Wasserstein estimate".into(),
        ));
    }
    Ok(total / used as f64)
}

/// 95th percentile of nearest-neighbour distances from each chain's state
/// at the grid time nearest `t` to the ideal path of its own label.
pub fn manifold_p95(
    out: &SampleOutput,
    dataset: &ConditionalDataset,
    t: f64,
    bank_size: usize,
    seed: u64,
) -> Result<f64> {
    let trajectories = out.trajectories();
    let states = verify::states_at(&trajectories, t);
    let t_used = trajectories
        .first()
        .map(|tr| tr.states[verify::nearest_step(tr, t)].0)
        .ok_or_else(|| Error::Input("manifold distance needs recorded trajectories".into()))?;
    let mut dists = Vec::with_capacity(states.len());
    for y in 0..dataset.num_labels() {
        let pts: Vec<Vec<f64>> = states.iter().filter(|s| s.1 == y).map(|s| s.0.clone()).collect();
        if pts.is_empty() {
            continue;
        }
        let bank = verify::manifold_bank(dataset, y, t_used, bank_size, seed)?;
        dists.extend(verify::nearest_distances(&pts, &bank)?);
    }
    Ok(verify::summarize(dists)?.p95)
}

/// Run every strategy on shared seeds at each step count.
pub fn run_compare<F: VelocityField>(
    field: &F,
    dataset: &ConditionalDataset,
    c: &RunConfig,
    spec: &CompareConfig,
) -> Result<CompareReport> {
    let strategies = spec.all_strategies();
    if strategies.len() < 2 {
        return Err(Error::Config("compare needs at least two strategies".into()));
    }
    let nfe = if spec.nfe.is_empty() {
        vec![c.sampler.n_steps]
    } else {
        spec.nfe.clone()
    };
    let data = reference_data(dataset, spec.reference_points, c.seed)?;
    let data_points: Vec<Vec<f64>> = data.iter().map(|d| d.0.clone()).collect();
    let counting = CountingField::new(field);
    let mut blocks = Vec::with_capacity(nfe.len());
    for &n_steps in &nfe {
        let cfg = SamplerConfig {
            n_steps,
            time_grid: None,
            record_trajectory: true,
            record_reference: false,
            ..c.sampler.clone()
        };
        let mut rows = Vec::with_capacity(strategies.len());
        for s in &strategies {
            counting.reset();
            let out = sample(&counting, s, &cfg).map_err(|e| match e {
                Error::Numeric { step } => Error::StrategyFailed {
                    strategy: s.label(),
                    step,
                },
                other => other,
            })?;
            let nfe_total = counting.count();
            let samples: Vec<(Vec<f64>, usize)> =
                out.chains.iter().map(|ch| (ch.final_point.clone(), ch.label)).collect();
            let points: Vec<Vec<f64>> = samples.iter().map(|p| p.0.clone()).collect();
            let devs: Vec<f64> = out
                .trajectories()
                .iter()
                .flat_map(|tr| tr.diagnostics.iter().map(|d| d.deviation_from_conditional))
                .collect();
            rows.push(CompareRow {
                name: s.label(),
                strategy: s.clone(),
                nfe_total,
                sw_to_data: per_label_sw(&samples, &data, dataset.num_labels(), spec.n_projections, c.seed)?,
                energy_distance: verify::energy_distance(&points, &data_points)?,
                mean_deviation: devs.iter().sum::<f64>() / devs.len().max(1) as f64,
                max_deviation: devs.iter().cloned().fold(0.0, f64::max),
                manifold_p95: manifold_p95(&out, dataset, spec.manifold_t, spec.bank_size, c.seed)?,
            });
        }
        blocks.push(CompareBlock { n_steps, rows });
    }
    Ok(CompareReport {
        seed: c.seed,
        n_chains: c.sampler.n_chains,
        blocks,
    })
}

/// Write `compare.json` and `compare.csv`.
pub fn cmd_compare(c: &RunConfig) -> Result<String> {
    let spec = c
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `compare` section".into()))?;
    let dataset = c.dataset.build()?;
    let field = load_checkpoint(c, &dataset)?;
    let rep = run_compare(&field, &dataset, c, spec)?;
    write_file(&c.output_dir.join("compare.json"), report::to_json(&rep)?.as_bytes())?;
    let header: Vec<String> = [
        "n_steps",
        "strategy",
        "nfe_total",
        "sw_to_data",
        "energy_distance",
        "mean_deviation",
        "max_deviation",
        "manifold_p95",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = rep
        .blocks
        .iter()
        .flat_map(|b| {
            b.rows.iter().map(move |r| {
                vec![
                    b.n_steps.to_string(),
                    r.name.clone(),
                    r.nfe_total.to_string(),
                    format!("{}", r.sw_to_data),
                    format!("{}", r.energy_distance),
                    format!("{}", r.mean_deviation),
                    format!("{}", r.max_deviation),
                    format!("{}", r.manifold_p95),
                ]
            })
        })
        .collect();
    let mut buf = Vec::new();
    report::write_table(&mut buf, &header, &rows)?;
    write_file(&c.output_dir.join("compare.csv"), &buf)?;
    Ok(format!(
        "compared {} strategies over {} step counts; wrote {}",
        rep.blocks.first().map_or(0, |b| b.rows.len()),
        rep.blocks.len(),
        c.output_dir.join("compare.json").display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub dt: Option<f64>,
    pub max_lhs: f64,
    pub max_ratio: f64,
    pub violation_rate: f64,
}

impl From<&verify::BoundReport> for BoundSummary {
    fn from(r: &verify::BoundReport) -> Self {
        Self {
            dt: r.dt,
            max_lhs: r.max_lhs,
            max_ratio: r.max_ratio,
            violation_rate: r.violation_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Section {
    pub per_dt: Vec<BoundSummary>,
    pub per_dt_common_time: Vec<BoundSummary>,
    pub slope: f64,
    pub common_time_slope: f64,
    pub slope_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Section {
    pub strategy: String,
    pub n_chains: usize,
    pub n_steps: usize,
    pub identity_max_rel_err: f64,
    pub identity_pass: bool,
    pub reference_max_err: f64,
    pub reference_pass: bool,
    pub max_deviation: f64,
    pub bound: BoundSummary,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaIntegralSection {
    pub numeric: f64,
    pub analytic: f64,
    pub abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub estimates: BoundEstimates,
    pub lemma1: Lemma1Section,
    pub prop1: Prop1Section,
    pub alpha_integral: Option<AlphaIntegralSection>,
    pub deviation_curve: Vec<DeviationPoint>,
    pub pass: bool,
}

/// Run every check against a field.
pub fn run_verify<F: VelocityField>(field: &F, dataset: &ConditionalDataset, c: &RunConfig) -> Result<VerifyReport> {
    let v = &c.verify;
    let labels: Vec<usize> = (0..dataset.num_labels()).collect();
    let sampler = SamplerConfig {
        record_trajectory: true,
        record_reference: true,
        ..c.sampler.clone()
    };
    let out = sample(field, &c.guidance, &sampler)?;
    let trajectories = out.trajectories();
    let grid = sampler.grid()?;
    let mids: Vec<f64> = grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let region = Region::around(
        trajectories
            .iter()
            .flat_map(|tr| tr.states.iter().map(|s| s.1.as_slice())),
        v.region_margin,
    )?;
    let mut times = grid.clone();
    times.extend(&mids);
    let estimates = verify::estimate_bounds(field, &region, &times, &labels, v.n_probes, c.seed)?;

    let t_lo = v.dts.iter().cloned().fold(0.0, f64::max) / 2.0;
    let states = verify::on_path_states(dataset, &labels, v.lemma_states, t_lo, 1.0, c.seed)?;
    let mut per_dt = Vec::new();
    let mut per_dt_common = Vec::new();
    for &dt in &v.dts {
        let r = verify::check_lemma1(field, &states, dt, estimates.lipschitz, estimates.v_max)?;
        per_dt.push(BoundSummary::from(&r.literal));
        per_dt_common.push(BoundSummary::from(&r.common_time));
    }
    let max_lhs: Vec<f64> = per_dt.iter().map(|b| b.max_lhs).collect();
    let common: Vec<f64> = per_dt_common.iter().map(|b| b.max_lhs).collect();
    let slope = verify::loglog_slope(&v.dts, &max_lhs);
    let lemma1 = Lemma1Section {
        slope,
        common_time_slope: verify::loglog_slope(&v.dts, &common),
        slope_pass: (0.7..=1.3).contains(&slope),
        per_dt,
        per_dt_common_time: per_dt_common,
    };

    let p = verify::check_prop1(&trajectories, estimates.b)?;
    let prop1 = Prop1Section {
        strategy: c.guidance.label(),
        n_chains: trajectories.len(),
        n_steps: grid.len() - 1,
        identity_max_rel_err: p.identity_max_rel_err,
        identity_pass: p.identity_pass,
        reference_max_err: p.reference_max_err,
        reference_pass: p.reference_pass,
        max_deviation: p.max_deviation,
        bound: BoundSummary::from(&p.bound),
        pass: p.pass,
    };

    let alpha_integral = match &c.guidance {
        GuidanceStrategy::RectCfgpp { lambda_max, gamma, .. } => {
            let a = verify::alpha_integral(*lambda_max, *gamma);
            Some(AlphaIntegralSection {
                numeric: a.numeric,
                analytic: a.analytic,
                abs_err: a.abs_err,
                pass: a.abs_err <= 1e-10,
            })
        }
        _ => None,
    };

    let deviation_curve =
        verify::distributional_deviation(&trajectories, dataset, &v.deviation_times, v.n_projections, c.seed)?;
    let pass = lemma1.slope_pass && prop1.pass && alpha_integral.as_ref().is_none_or(|a| a.pass);
    Ok(VerifyReport {
        seed: c.seed,
        estimates,
        lemma1,
        prop1,
        alpha_integral,
        deviation_curve,
        pass,
    })
}

/// Write `verify.json` and `deviation.csv`.
pub fn cmd_verify(c: &RunConfig) -> Result<String> {
    let dataset = c.dataset.build()?;
    let field = load_checkpoint(c, &dataset)?;
    let rep = run_verify(&field, &dataset, c)?;
    write_file(&c.output_dir.join("verify.json"), report::to_json(&rep)?.as_bytes())?;
    let rows: Vec<Vec<String>> = rep
        .deviation_curve
        .iter()
        .map(|p| {
            vec![
                format!("{}", p.t),
                format!("{}", p.sw),
                p.kl.map(|k| format!("{k}")).unwrap_or_default(),
            ]
        })
        .collect();
    let mut buf = Vec::new();
    report::write_table(&mut buf, &["t".into(), "sw".into(), "kl".into()], &rows)?;
    write_file(&c.output_dir.join("deviation.csv"), &buf)?;
    Ok(format!(
        "verify {}: lemma-1 slope {:.3}, prop-1 identity error {:.2e}, bound violations {}",
        if rep.pass { "passed" } else { "FAILED" },
        rep.lemma1.slope,
        rep.prop1.identity_max_rel_err,
        rep.prop1.bound.violation_rate
    ))
}

/// Render a trajectory CSV to SVG.
pub fn cmd_plot(
    trajectory: &Path,
    out: &Path,
    steps: Vec<usize>,
    paths: bool,
    config: Option<&Path>,
) -> Result<String> {
    let text = std::fs::read_to_string(trajectory)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", trajectory.display())))?;
    let (_, rows) = report::read_trajectory_csv(&text)?;
    let targets = match config {
        Some(p) => RunConfig::load(p)?.dataset.build()?.label_centers(),
        None => Vec::new(),
    };
    let svg = render_svg(&rows, &PlotOptions { steps, paths, targets });
    write_file(out, svg.as_bytes())?;
    Ok(format!("wrote {}", out.display()))
}
