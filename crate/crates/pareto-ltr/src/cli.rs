//! JSON-configured experiment commands behind the `pareto-ltr` binary.
//!
//! One config document drives every command; reruns with the same config
//! and seed produce byte-identical outputs (no clocks, no host paths in
//! any artifact). Each JSON artifact embeds a provenance header carrying
//! the tool version, the effective seed, and the config it ran with.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{
    coverage_report, ingest_csv, write_csv_file, Dataset, Granularity, InteractionLog,
    NegativeRule, RankerScorer, TeacherFile, WorldConfig, WorldFile, DIM_ITEM, DIM_MATERIAL,
    WORLD_FILE_VERSION,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, spearman, EvalProtocol};
use crate::ranker::{Checkpoint, RankerParams};
use crate::seeds::derive_seed;
use crate::solver::{frank_wolfe_solve, GramMatrix, SolverOptions, SolverResult};
use crate::trainer::{
    ablation_sweep, build_dataset, fit, memory_strength_sweep, SweepTable, TrainConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const LOG_CSV: &str = "log.csv";
pub const WORLD_JSON: &str = "world.json";
pub const TEACHER_JSON: &str = "teacher.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TRENDS_JSON: &str = "ablation_trends.json";
pub const SWEEP_L_CSV: &str = "sweep_l.csv";
pub const SWEEP_L_TRENDS_JSON: &str = "sweep_l_trends.json";
pub const COVERAGE_CSV: &str = "coverage.csv";
pub const COVERAGE_JSON: &str = "coverage.json";
pub const SOLVER_RESULT_JSON: &str = "solver_result.json";

/// Where the interaction data comes from: a seeded synthetic world or a
/// CSV log on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    World(WorldConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        rule: NegativeRule,
    },
}

/// The experiment document. Unknown keys anywhere are rejected at load
/// time. `seed` may be overridden by `--seed`; the effective seed is
/// stamped into the training config and the world before any work.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Default output directory when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    /// Fixed weights for `ablate` (defaults to 0.5..=1.0 by tenths).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation_alphas: Option<Vec<f64>>,
    /// Retention values for `sweep-l` (defaults to 0.1..=0.9 by tenths).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_sweep: Option<Vec<f64>>,
    /// Coverage granularities: dimension names or `"item"` (defaults to
    /// item_fp and material_fp).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_granularities: Option<Vec<String>>,
}

impl ExperimentConfig {
    /// Parses and validates a config document, then stamps the effective
    /// seed through every seeded component.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {path:?}: {e}")))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::InvalidConfig(format!("config schema error: {e}")))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        if let DataConfig::World(w) = &mut cfg.data {
            w.seed = derive_seed(cfg.seed, "world");
        }
        cfg.train.validate()?;
        cfg.eval.validate()?;
        if let DataConfig::Csv { rule, .. } = &cfg.data {
            rule.validate()?;
        }
        Ok(cfg)
    }
}

/// Header embedded in every JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Provenance {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

fn require_world<'a>(cfg: &'a ExperimentConfig, what: &str) -> Result<&'a WorldConfig> {
    match &cfg.data {
        DataConfig::World(w) => Ok(w),
        DataConfig::Csv { .. } => Err(Error::InvalidConfig(format!(
            "{what} needs a synthetic world: CSV logs carry no teacher model"
        ))),
    }
}

fn dataset_from(cfg: &ExperimentConfig, what: &str) -> Result<Dataset> {
    let world_cfg = require_world(cfg, what)?;
    build_dataset(world_cfg, &cfg.eval, NegativeRule::default())
}

fn load_log(cfg: &ExperimentConfig) -> Result<(InteractionLog, NegativeRule)> {
    match &cfg.data {
        DataConfig::World(_) => {
            let data = dataset_from(cfg, "log simulation")?;
            Ok((data.log, data.rule))
        }
        DataConfig::Csv { path, rule } => {
            let (log, report) = ingest_csv(path, rule)?;
            println!(
                "ingested {} rows ({} skipped) from {}",
                report.rows_ok,
                report.rows_skipped,
                path.display()
            );
            Ok((log, *rule))
        }
    }
}

fn write_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = out_dir.join(name);
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    Ok(path)
}

fn ensure_out(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::InvalidInput(format!("cannot create {out_dir:?}: {e}")))
}

/// `simulate`: generate the world and its log; write the CSV and the
/// world/teacher containers.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    let data = dataset_from(cfg, "simulate")?;
    write_csv_file(&data.log, &out_dir.join(LOG_CSV))?;
    write_json(
        out_dir,
        WORLD_JSON,
        &WorldFile {
            format_version: WORLD_FILE_VERSION,
            world: data.world.clone(),
        },
    )?;
    write_json(
        out_dir,
        TEACHER_JSON,
        &TeacherFile {
            format_version: WORLD_FILE_VERSION,
            teacher: data.teacher.clone(),
        },
    )?;
    println!(
        "simulated {} rows into {}",
        data.log.len(),
        out_dir.join(LOG_CSV).display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    provenance: Provenance,
    steps: usize,
    solver_invocations: u64,
    initial_val: crate::metrics::EvalReport,
    epochs: Vec<crate::trainer::EpochReport>,
    final_test: crate::metrics::EvalReport,
}

/// `train`: fit on the world's log; write checkpoints, the step curve,
/// and a summary.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    let data = dataset_from(cfg, "train")?;
    let result = fit(&data, &cfg.train, &cfg.eval)?;
    for report in &result.epochs {
        println!(
            "epoch {}: L_LTR={:.4} L_FG={:.4} alpha=({:.3},{:.3}) val ndcg@10={:.4} fsr={:.4}",
            report.epoch,
            report.mean_loss_ltr,
            report.mean_loss_fg,
            report.mean_alpha_ltr,
            report.mean_alpha_fg,
            report.val.ndcg_at_10,
            report.val.fast_slip_rate,
        );
    }

    write_json(out_dir, CHECKPOINT_JSON, &result.params.to_checkpoint())?;
    for (epoch, ckpt) in &result.checkpoints {
        write_json(out_dir, &format!("checkpoint_epoch_{epoch}.json"), ckpt)?;
    }

    let mut curve = csv::Writer::from_path(out_dir.join(CURVE_CSV))?;
    curve.write_record([
        "step",
        "loss_ltr",
        "loss_fg",
        "alpha_ltr",
        "alpha_fg",
        "combined_norm_sq",
        "grad_norm_ltr",
        "grad_norm_fg",
        "dir_dot_ltr",
        "dir_dot_fg",
        "skipped",
        "fg_underflow",
    ])?;
    for r in &result.curve {
        curve.write_record([
            r.step.to_string(),
            r.loss_ltr.to_string(),
            r.loss_fg.to_string(),
            r.alpha_ltr.to_string(),
            r.alpha_fg.to_string(),
            r.combined_norm_sq.to_string(),
            r.grad_norm_ltr.to_string(),
            r.grad_norm_fg.to_string(),
            r.dir_dot_ltr.to_string(),
            r.dir_dot_fg.to_string(),
            r.skipped.to_string(),
            r.fg_underflow.to_string(),
        ])?;
    }
    curve.flush()?;

    let summary = TrainSummary {
        provenance: Provenance::of(cfg),
        steps: result.curve.len(),
        solver_invocations: result.solver_invocations,
        initial_val: result.initial_val,
        epochs: result.epochs,
        final_test: result.final_test,
    };
    let path = write_json(out_dir, SUMMARY_JSON, &summary)?;
    println!("summary written to {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalOutput {
    provenance: Provenance,
    report: crate::metrics::EvalReport,
}

/// `eval`: score a checkpoint on the test split of the world's log.
pub fn cmd_eval(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    if !checkpoint.exists() {
        return Err(Error::InvalidInput(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let data = dataset_from(cfg, "eval")?;
    let raw = fs::read_to_string(checkpoint)?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)?;
    let params = RankerParams::from_checkpoint(&ckpt)?;

    let fractions = [
        cfg.train.split.train,
        cfg.train.split.val,
        cfg.train.split.test,
    ];
    let (_, _, test) = crate::dataio::split_by_time(&data.log, fractions)?;
    let mut impressions = crate::dataio::impressions_from_records(
        &test.records,
        data.world.config.num_items,
        cfg.eval.candidate_pool_size,
        cfg.train.seed,
        "test-pools",
    );
    if cfg.train.max_eval_impressions > 0 {
        impressions.truncate(cfg.train.max_eval_impressions);
    }
    let report = evaluate(
        &RankerScorer {
            params: &params,
            world: &data.world,
        },
        &data.teacher,
        &impressions,
        &cfg.eval,
        &data.world,
        derive_seed(cfg.train.seed, "test-outcomes"),
    )?;
    let out = EvalOutput {
        provenance: Provenance::of(cfg),
        report,
    };
    let path = write_json(out_dir, EVAL_REPORT_JSON, &out)?;
    println!("{}", serde_json::to_string(&out.report)?);
    println!("report written to {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrendReport {
    provenance: Provenance,
    /// Spearman correlation of each metric against the swept knob,
    /// computed over the swept rows only.
    spearman_ndcg: f64,
    spearman_fast_slip: f64,
    spearman_ctr: f64,
    spearman_recall: f64,
}

fn trends(
    cfg: &ExperimentConfig,
    table: &SweepTable,
    knob: impl Fn(&crate::trainer::SweepRow) -> Option<f64>,
) -> Result<TrendReport> {
    let mut xs = Vec::new();
    let mut ndcg = Vec::new();
    let mut fsr = Vec::new();
    let mut ctr = Vec::new();
    let mut recall = Vec::new();
    for row in &table.rows {
        if let Some(x) = knob(row) {
            xs.push(x);
            ndcg.push(row.ndcg_at_10);
            fsr.push(row.fast_slip_rate);
            ctr.push(row.ctr);
            recall.push(row.recall_10_1);
        }
    }
    Ok(TrendReport {
        provenance: Provenance::of(cfg),
        spearman_ndcg: spearman(&xs, &ndcg)?,
        spearman_fast_slip: spearman(&xs, &fsr)?,
        spearman_ctr: spearman(&xs, &ctr)?,
        spearman_recall: spearman(&xs, &recall)?,
    })
}

const DEFAULT_ABLATION_ALPHAS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const DEFAULT_RETENTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// `ablate`: fixed-weight sweep plus one adaptive run; writes the table
/// and the metric-vs-weight trend flags.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    let data = dataset_from(cfg, "ablate")?;
    let alphas = cfg
        .ablation_alphas
        .clone()
        .unwrap_or_else(|| DEFAULT_ABLATION_ALPHAS.to_vec());
    let table = ablation_sweep(&data, &alphas, &cfg.train, &cfg.eval)?;
    let mut file = fs::File::create(out_dir.join(ABLATION_CSV))?;
    table.to_csv(&mut file)?;
    let trend = trends(cfg, &table, |r| r.alpha_ltr)?;
    write_json(out_dir, ABLATION_TRENDS_JSON, &trend)?;
    println!(
        "ablation over {} weights written to {} (ndcg trend {:+.3}, fast-slip trend {:+.3})",
        alphas.len(),
        out_dir.join(ABLATION_CSV).display(),
        trend.spearman_ndcg,
        trend.spearman_fast_slip,
    );
    Ok(())
}

/// `sweep-l`: one adaptive fit per retention value; writes the table and
/// the metric-vs-retention trend flags.
pub fn cmd_sweep_l(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    let data = dataset_from(cfg, "sweep-l")?;
    let retentions = cfg
        .retention_sweep
        .clone()
        .unwrap_or_else(|| DEFAULT_RETENTIONS.to_vec());
    let table = memory_strength_sweep(&data, &retentions, &cfg.train, &cfg.eval)?;
    let mut file = fs::File::create(out_dir.join(SWEEP_L_CSV))?;
    table.to_csv(&mut file)?;
    let trend = trends(cfg, &table, |r| r.retention_l)?;
    write_json(out_dir, SWEEP_L_TRENDS_JSON, &trend)?;
    println!(
        "retention sweep over {} values written to {} (ndcg trend {:+.3}, fast-slip trend {:+.3})",
        retentions.len(),
        out_dir.join(SWEEP_L_CSV).display(),
        trend.spearman_ndcg,
        trend.spearman_fast_slip,
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CoverageOutput {
    provenance: Provenance,
    table: crate::dataio::CoverageTable,
}

/// `coverage`: general vs personalized feedback coverage per granularity
/// and window, over either data source.
pub fn cmd_coverage(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    ensure_out(out_dir)?;
    let (log, rule) = load_log(cfg)?;
    let granularities: Vec<Granularity> = match &cfg.coverage_granularities {
        Some(names) => names
            .iter()
            .map(|n| {
                if n == "item" {
                    Granularity::Item
                } else {
                    Granularity::Dim(n.clone())
                }
            })
            .collect(),
        None => vec![
            Granularity::Dim(DIM_ITEM.into()),
            Granularity::Dim(DIM_MATERIAL.into()),
        ],
    };
    let table = coverage_report(&log, &cfg.train.forgetting.windows, &granularities, &rule)?;
    let mut file = fs::File::create(out_dir.join(COVERAGE_CSV))?;
    table.to_csv(&mut file)?;
    write_json(
        out_dir,
        COVERAGE_JSON,
        &CoverageOutput {
            provenance: Provenance::of(cfg),
            table,
        },
    )?;
    println!(
        "coverage table written to {}",
        out_dir.join(COVERAGE_CSV).display()
    );
    Ok(())
}

/// Accepted shapes for the solver's matrix file: a bare matrix or the
/// serialized [`GramMatrix`].
#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixFile {
    Wrapped { m: Vec<Vec<f64>> },
    Bare(Vec<Vec<f64>>),
}

/// `solver`: run the min-norm solver on a Gram matrix from a JSON file.
/// The result prints to stdout and, when an output directory is given,
/// lands in `solver_result.json`.
pub fn cmd_solver(
    cfg: Option<&ExperimentConfig>,
    matrix_path: &Path,
    out_dir: Option<&Path>,
) -> Result<SolverResult> {
    let raw = fs::read_to_string(matrix_path)
        .map_err(|e| Error::InvalidInput(format!("cannot read matrix {matrix_path:?}: {e}")))?;
    let rows = match serde_json::from_str::<MatrixFile>(&raw)
        .map_err(|e| Error::InvalidInput(format!("bad matrix JSON: {e}")))?
    {
        MatrixFile::Wrapped { m } => m,
        MatrixFile::Bare(m) => m,
    };
    let matrix = GramMatrix::from_rows(rows)?;
    let opts: SolverOptions = cfg.map(|c| c.train.solver).unwrap_or_default();
    let result = frank_wolfe_solve(&matrix, &opts)?;
    println!("{}", serde_json::to_string(&result)?);
    if let Some(out_dir) = out_dir {
        ensure_out(out_dir)?;
        write_json(out_dir, SOLVER_RESULT_JSON, &result)?;
    }
    Ok(result)
}
