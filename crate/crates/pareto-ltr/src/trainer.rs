//! The training loop: per-objective losses and gradients, adaptive
//! preference weights from the min-norm solver (or fixed weights for
//! ablations), and Adam updates on the aggregated direction. Also the
//! experiment drivers sweeping fixed weights and retention values.
//!
//! Per step, the ranking loss sums over candidate pairs within each
//! impression and the penalty loss over all candidates in the batch; both
//! gradients are taken over the full flat parameter vector, embeddings
//! included, and the solver re-runs every step on their 2x2 Gram matrix.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    generate_world, impressions_from_records, simulate_logs, split_by_time, Dataset, RankerScorer,
};
use crate::error::{Error, Result};
use crate::forgetting::{
    CountKey, DimensionComponent, DimensionWeights, GatherMode, HistoryIndex, MemoryCurve,
    RatePreprocess, TimeWindows,
};
use crate::metrics::{evaluate, EvalProtocol, EvalReport, Impression};
use crate::optim::{Adam, AdamConfig};
use crate::ranker::{backward, forward_batch, ltr_loss, FeatureRecord, RankerParams};
use crate::seeds::{derive_seed, derive_seed_indexed};
use crate::solver::{solve_gradients, GradientSet, SolverOptions};

/// Below this penalty loss the step falls back to pure ranking weights to
/// avoid chasing a vanishing objective.
pub const FG_UNDERFLOW: f64 = 1e-12;

/// How the per-step preference weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Solve the min-norm problem on the two gradients every step.
    Pareto,
    /// Fixed `(alpha_ltr, 1 - alpha_ltr)`.
    FixedAlpha { alpha_ltr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.90,
            val: 0.05,
            test: 0.05,
        }
    }
}

/// How per-candidate penalty weights are derived from history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// One retention curve, history keyed on the item itself.
    Offline { retention_l: f64 },
    /// Per-dimension curves and mixing weights, history keyed on each
    /// dimension's cluster id.
    Online { dims: BTreeMap<String, OnlineDim> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineDim {
    pub lambda: f64,
    pub retention_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgettingSettings {
    pub windows: TimeWindows,
    pub gathering: GatherMode,
    pub preprocess: RatePreprocess,
    pub penalty: PenaltyMode,
}

impl Default for ForgettingSettings {
    fn default() -> Self {
        Self {
            windows: TimeWindows::default_windows(),
            gathering: GatherMode::General,
            preprocess: RatePreprocess::Identity,
            penalty: PenaltyMode::Offline { retention_l: 0.7 },
        }
    }
}

/// Scorer sizes. The defaults are desk-scale; the production-like profile
/// (embedding 16, hidden [128, 64, 32]) is one config edit away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSizes {
    pub embedding_dim: usize,
    pub hidden: [usize; 3],
}

impl Default for RankerSizes {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden: [32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub impressions_per_step: usize,
    pub candidates_per_impression: usize,
    pub epochs: usize,
    pub seed: u64,
    pub forgetting: ForgettingSettings,
    pub solver: SolverOptions,
    pub split: SplitFractions,
    pub ranker: RankerSizes,
    /// Emit a checkpoint every this many epochs (0 = none mid-training).
    pub checkpoint_every_epochs: usize,
    /// Cap on validation/test impressions (0 = use the whole split).
    pub max_eval_impressions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pareto,
            learning_rate: 0.001,
            impressions_per_step: 32,
            candidates_per_impression: 10,
            epochs: 1,
            seed: 0,
            forgetting: ForgettingSettings::default(),
            solver: SolverOptions::default(),
            split: SplitFractions::default(),
            ranker: RankerSizes::default(),
            checkpoint_every_epochs: 0,
            max_eval_impressions: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let TrainMode::FixedAlpha { alpha_ltr } = self.mode {
            if !(0.0..=1.0).contains(&alpha_ltr) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_ltr must lie in [0,1], got {alpha_ltr}"
                )));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.impressions_per_step == 0 || self.candidates_per_impression == 0 {
            return Err(Error::InvalidConfig(
                "batch sizes must be at least 1".into(),
            ));
        }
        let f = [self.split.train, self.split.val, self.split.test];
        if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions {f:?} must be positive and sum to 1"
            )));
        }
        self.forgetting.preprocess.validate()?;
        match &self.forgetting.penalty {
            PenaltyMode::Offline { retention_l } => {
                MemoryCurve::from_retention(*retention_l)?;
            }
            PenaltyMode::Online { dims } => {
                build_dimension_weights(dims)?;
            }
        }
        Ok(())
    }
}

fn build_dimension_weights(dims: &BTreeMap<String, OnlineDim>) -> Result<DimensionWeights> {
    DimensionWeights::new(
        dims.iter()
            .map(|(name, d)| {
                Ok((
                    name.clone(),
                    DimensionComponent {
                        lambda: d.lambda,
                        curve: MemoryCurve::from_retention(d.retention_l)?,
                    },
                ))
            })
            .collect::<Result<_>>()?,
    )
}

/// Everything observable about one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_ltr: f64,
    pub loss_fg: f64,
    pub alpha_ltr: f64,
    pub alpha_fg: f64,
    /// Squared norm of the aggregated direction `a1*g1 + a2*g2`.
    pub combined_norm_sq: f64,
    pub grad_norm_ltr: f64,
    pub grad_norm_fg: f64,
    /// Inner products of the direction with each objective gradient;
    /// nonnegative values certify a common-descent step.
    pub dir_dot_ltr: f64,
    pub dir_dot_fg: f64,
    pub direction_norm: f64,
    /// True when the batch carried no gradient signal and was skipped.
    pub skipped: bool,
    /// True when the penalty loss underflowed and weights fell back to
    /// pure ranking.
    pub fg_underflow: bool,
}

/// Per-objective losses and the penalty weights behind them.
#[derive(Debug, Clone)]
pub struct ObjectiveLosses {
    pub loss_ltr: f64,
    pub loss_fg: f64,
    pub penalty_weights: Vec<f64>,
}

struct BatchComputation {
    loss_ltr: f64,
    loss_fg: f64,
    penalty_weights: Vec<f64>,
    records: Vec<FeatureRecord>,
    dp_ltr: Vec<f64>,
    dp_fg: Vec<f64>,
    cache: crate::ranker::ForwardCache,
    any_active_pair: bool,
}

enum PenaltyComputer {
    Offline(MemoryCurve),
    Online(DimensionWeights),
}

/// Single-writer training state over a borrowed dataset.
pub struct Trainer<'a> {
    data: &'a Dataset,
    config: TrainConfig,
    params: RankerParams,
    adam: Adam,
    history: HistoryIndex,
    penalty: PenaltyComputer,
    solver_invocations: u64,
    steps: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ranker_config = data
            .world
            .ranker_config(config.ranker.embedding_dim, config.ranker.hidden);
        let params = RankerParams::init_seeded(ranker_config, derive_seed(config.seed, "params"))?;
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            params.param_count(),
        );
        let mut interactions = data.log.interactions(&data.rule);
        interactions.sort_by_key(|it| it.timestamp);
        let history = HistoryIndex::build(&interactions)?;
        let penalty = match &config.forgetting.penalty {
            PenaltyMode::Offline { retention_l } => {
                PenaltyComputer::Offline(MemoryCurve::from_retention(*retention_l)?)
            }
            PenaltyMode::Online { dims } => {
                PenaltyComputer::Online(build_dimension_weights(dims)?)
            }
        };
        Ok(Self {
            data,
            config,
            params,
            adam,
            history,
            penalty,
            solver_invocations: 0,
            steps: 0,
        })
    }

    pub fn params(&self) -> &RankerParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// How many times the min-norm solver actually ran (stays at zero in
    /// fixed-weight mode).
    pub fn solver_invocations(&self) -> u64 {
        self.solver_invocations
    }

    #[cfg(test)]
    fn params_mut(&mut self) -> &mut RankerParams {
        &mut self.params
    }

    /// Penalty weight for one candidate at one moment.
    pub fn penalty_weight(&self, user: u64, item: u64, timestamp: i64) -> Result<f64> {
        let windows = &self.config.forgetting.windows;
        let gathering = self.config.forgetting.gathering;
        let f = &self.config.forgetting.preprocess;
        match &self.penalty {
            PenaltyComputer::Offline(curve) => {
                let rates = self.history.fast_slip_rates(
                    &CountKey::Item(item),
                    timestamp,
                    windows,
                    gathering,
                    Some(user),
                )?;
                crate::forgetting::penalty_weight_offline(&rates, windows, curve, f)
            }
            PenaltyComputer::Online(dimw) => {
                let dims = self.data.world.dims_of(item);
                let mut per_dim = BTreeMap::new();
                for name in dimw.names() {
                    let cluster = *dims.get(name).ok_or_else(|| {
                        Error::InvalidConfig(format!("world has no dimension {name:?}"))
                    })?;
                    let rates = self.history.fast_slip_rates(
                        &CountKey::Cluster { dim: name, cluster },
                        timestamp,
                        windows,
                        gathering,
                        Some(user),
                    )?;
                    per_dim.insert(name.clone(), rates);
                }
                crate::forgetting::penalty_weight_online(&per_dim, windows, dimw, f)
            }
        }
    }

    fn compute_batch(&self, batch: &[Impression]) -> Result<BatchComputation> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut records = Vec::new();
        let mut teacher_scores = Vec::new();
        let mut penalty_weights = Vec::new();
        let mut spans = Vec::new();
        for imp in batch {
            let start = records.len();
            for &item in &imp.candidates {
                records.push(self.data.world.feature_record(imp.user_id, item));
                teacher_scores.push(self.data.teacher_score(imp.user_id, item)?);
                penalty_weights.push(self.penalty_weight(imp.user_id, item, imp.timestamp)?);
            }
            spans.push(start..records.len());
        }

        let (scored, cache) = forward_batch(&self.params, &records)?;
        let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();

        // Both losses consume the same squashed output p = sigmoid(s).
        // Feeding p (not the raw score) to the pairwise loss anchors the
        // absolute score level: with raw scores the loss is translation
        // invariant and the penalty can sink every score uniformly at
        // zero ranking cost, which decouples the two objectives.
        let mut loss_ltr = 0.0;
        let mut dp_ltr = vec![0.0; records.len()];
        let mut any_active_pair = false;
        for span in &spans {
            let q = &teacher_scores[span.clone()];
            if q.len() < 2 {
                continue;
            }
            if q.iter().any(|&a| q.iter().any(|&b| a > b)) {
                any_active_pair = true;
            }
            let (l, g) = ltr_loss(&probs[span.clone()], q)?;
            loss_ltr += l;
            for (dst, src) in dp_ltr[span.clone()].iter_mut().zip(g) {
                *dst += src;
            }
        }

        let (loss_fg, dp_fg) = crate::forgetting::forgetting_loss(&penalty_weights, &probs)?;

        if !loss_ltr.is_finite() || !loss_fg.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged at step {}: ltr={loss_ltr} fg={loss_fg}",
                self.steps
            )));
        }

        Ok(BatchComputation {
            loss_ltr,
            loss_fg,
            penalty_weights,
            records,
            dp_ltr,
            dp_fg,
            cache,
            any_active_pair,
        })
    }

    /// Per-objective losses for a batch, without touching any state.
    pub fn objective_losses(&self, batch: &[Impression]) -> Result<ObjectiveLosses> {
        let b = self.compute_batch(batch)?;
        Ok(ObjectiveLosses {
            loss_ltr: b.loss_ltr,
            loss_fg: b.loss_fg,
            penalty_weights: b.penalty_weights,
        })
    }

    /// One optimization step over a batch of impressions.
    pub fn train_step(&mut self, batch: &[Impression]) -> Result<StepReport> {
        let step = self.steps;
        self.steps += 1;
        let b = self.compute_batch(batch)?;

        let all_weights_zero = b.penalty_weights.iter().all(|&w| w == 0.0);
        if !b.any_active_pair && all_weights_zero {
            return Ok(StepReport {
                step,
                loss_ltr: b.loss_ltr,
                loss_fg: b.loss_fg,
                alpha_ltr: 1.0,
                alpha_fg: 0.0,
                combined_norm_sq: 0.0,
                grad_norm_ltr: 0.0,
                grad_norm_fg: 0.0,
                dir_dot_ltr: 0.0,
                dir_dot_fg: 0.0,
                direction_norm: 0.0,
                skipped: true,
                fg_underflow: false,
            });
        }

        let zeros = vec![0.0; b.records.len()];
        let g_ltr = backward(&self.params, &b.records, &b.cache, &zeros, &b.dp_ltr)?;
        let g_fg = backward(&self.params, &b.records, &b.cache, &zeros, &b.dp_fg)?;

        let mut fg_underflow = false;
        let (alpha_ltr, alpha_fg) = match self.config.mode {
            TrainMode::FixedAlpha { alpha_ltr } => (alpha_ltr, 1.0 - alpha_ltr),
            TrainMode::Pareto => {
                if b.loss_fg < FG_UNDERFLOW {
                    fg_underflow = true;
                    warn!("step {step}: penalty loss underflowed ({}), using alpha = (1, 0)", b.loss_fg);
                    (1.0, 0.0)
                } else {
                    let grads = GradientSet::new(vec![g_ltr.clone(), g_fg.clone()])?;
                    let result = solve_gradients(&grads, &self.config.solver)?;
                    self.solver_invocations += 1;
                    (result.alpha.as_slice()[0], result.alpha.as_slice()[1])
                }
            }
        };

        let direction = aggregate_direction(alpha_ltr, alpha_fg, &g_ltr, &g_fg);
        let dir_dot_ltr = dot(&direction, &g_ltr);
        let dir_dot_fg = dot(&direction, &g_fg);
        let combined_norm_sq = dot(&direction, &direction);

        let delta = self.adam.step(&direction)?;
        self.params.apply_delta(&delta, 1.0)?;

        Ok(StepReport {
            step,
            loss_ltr: b.loss_ltr,
            loss_fg: b.loss_fg,
            alpha_ltr,
            alpha_fg,
            combined_norm_sq,
            grad_norm_ltr: dot(&g_ltr, &g_ltr).sqrt(),
            grad_norm_fg: dot(&g_fg, &g_fg).sqrt(),
            dir_dot_ltr,
            dir_dot_fg,
            direction_norm: combined_norm_sq.sqrt(),
            skipped: false,
            fg_underflow,
        })
    }
}

/// `alpha_1 * g1 + alpha_2 * g2`, the update direction fed to Adam.
pub(crate) fn aggregate_direction(a1: f64, a2: f64, g1: &[f64], g2: &[f64]) -> Vec<f64> {
    g1.iter().zip(g2).map(|(x, y)| a1 * x + a2 * y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Validation metrics and mean preference weights after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub val: EvalReport,
    pub mean_alpha_ltr: f64,
    pub mean_alpha_fg: f64,
    pub mean_loss_ltr: f64,
    pub mean_loss_fg: f64,
}

/// Everything a training run produced.
#[derive(Debug)]
pub struct FitResult {
    pub params: RankerParams,
    pub curve: Vec<StepReport>,
    pub initial_val: EvalReport,
    pub epochs: Vec<EpochReport>,
    pub final_test: EvalReport,
    pub checkpoints: Vec<(usize, crate::ranker::Checkpoint)>,
    pub solver_invocations: u64,
}

/// Trains over time-ordered impressions derived from the train split,
/// evaluating on the validation split per epoch and on the test split at
/// the end. Deterministic given `(config.seed, dataset)`.
pub fn fit(data: &Dataset, config: &TrainConfig, protocol: &EvalProtocol) -> Result<FitResult> {
    config.validate()?;
    protocol.validate()?;
    let fractions = [config.split.train, config.split.val, config.split.test];
    let (train, val, test) = split_by_time(&data.log, fractions)?;

    let num_items = data.world.config.num_items;
    let train_impressions = impressions_from_records(
        &train.records,
        num_items,
        config.candidates_per_impression,
        config.seed,
        "train-candidates",
    );
    let cap = |mut imps: Vec<Impression>| {
        if config.max_eval_impressions > 0 {
            imps.truncate(config.max_eval_impressions);
        }
        imps
    };
    let val_impressions = cap(impressions_from_records(
        &val.records,
        num_items,
        protocol.candidate_pool_size,
        config.seed,
        "val-pools",
    ));
    let test_impressions = cap(impressions_from_records(
        &test.records,
        num_items,
        protocol.candidate_pool_size,
        config.seed,
        "test-pools",
    ));

    let mut trainer = Trainer::new(data, config.clone())?;
    let eval_seed = derive_seed(config.seed, "eval-outcomes");
    let initial_val = evaluate(
        &RankerScorer {
            params: trainer.params(),
            world: &data.world,
        },
        &data.teacher,
        &val_impressions,
        protocol,
        &data.world,
        eval_seed,
    )?;

    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..config.epochs {
        let mut alpha_sum = (0.0, 0.0);
        let mut loss_sum = (0.0, 0.0);
        let mut counted = 0usize;
        for batch in train_impressions.chunks(config.impressions_per_step) {
            let report = trainer.train_step(batch)?;
            if !report.skipped {
                alpha_sum.0 += report.alpha_ltr;
                alpha_sum.1 += report.alpha_fg;
                loss_sum.0 += report.loss_ltr;
                loss_sum.1 += report.loss_fg;
                counted += 1;
            }
            curve.push(report);
        }
        let val_report = evaluate(
            &RankerScorer {
                params: trainer.params(),
                world: &data.world,
            },
            &data.teacher,
            &val_impressions,
            protocol,
            &data.world,
            eval_seed,
        )?;
        let denom = counted.max(1) as f64;
        epochs.push(EpochReport {
            epoch,
            val: val_report,
            mean_alpha_ltr: alpha_sum.0 / denom,
            mean_alpha_fg: alpha_sum.1 / denom,
            mean_loss_ltr: loss_sum.0 / denom,
            mean_loss_fg: loss_sum.1 / denom,
        });
        if config.checkpoint_every_epochs > 0 && (epoch + 1) % config.checkpoint_every_epochs == 0
        {
            checkpoints.push((epoch, trainer.params().to_checkpoint()));
        }
    }

    let final_test = evaluate(
        &RankerScorer {
            params: trainer.params(),
            world: &data.world,
        },
        &data.teacher,
        &test_impressions,
        protocol,
        &data.world,
        derive_seed(config.seed, "test-outcomes"),
    )?;

    Ok(FitResult {
        solver_invocations: trainer.solver_invocations(),
        params: trainer.params,
        curve,
        initial_val,
        epochs,
        final_test,
        checkpoints,
    })
}

/// One row of a sweep table: the run's knob plus its test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub alpha_ltr: Option<f64>,
    pub retention_l: Option<f64>,
    pub ndcg_at_10: f64,
    pub fast_slip_rate: f64,
    pub ctr: f64,
    pub recall_10_1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self, out: &mut dyn std::io::Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "label",
            "alpha_ltr",
            "retention_l",
            "ndcg_at_10",
            "fast_slip_rate",
            "ctr",
            "recall_10_1",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.label.clone(),
                r.alpha_ltr.map(|v| v.to_string()).unwrap_or_default(),
                r.retention_l.map(|v| v.to_string()).unwrap_or_default(),
                r.ndcg_at_10.to_string(),
                r.fast_slip_rate.to_string(),
                r.ctr.to_string(),
                r.recall_10_1.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn sweep_row(label: String, alpha: Option<f64>, l: Option<f64>, report: &EvalReport) -> SweepRow {
    SweepRow {
        label,
        alpha_ltr: alpha,
        retention_l: l,
        ndcg_at_10: report.ndcg_at_10,
        fast_slip_rate: report.fast_slip_rate,
        ctr: report.ctr,
        recall_10_1: report.recall_10_1,
    }
}

/// Fixed-weight ablation: one fit per `alpha_ltr` plus one adaptive run.
/// Weights below 0.5 are rejected (the penalty loss underflows there and
/// runs collapse). Each run gets an independent derived seed; duplicate
/// alphas become independent duplicate rows.
pub fn ablation_sweep(
    data: &Dataset,
    alphas: &[f64],
    config: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<SweepTable> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("no ablation weights given".into()));
    }
    for &a in alphas {
        if !(0.5..=1.0).contains(&a) {
            return Err(Error::InvalidInput(format!(
                "ablation alpha_ltr must lie in [0.5, 1.0], got {a}"
            )));
        }
    }
    let mut table = SweepTable::default();
    for (idx, &a) in alphas.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.mode = TrainMode::FixedAlpha { alpha_ltr: a };
        cfg.seed = derive_seed_indexed(config.seed, "ablation-run", idx as u64);
        let result = fit(data, &cfg, protocol)?;
        table
            .rows
            .push(sweep_row(format!("alpha_{a}"), Some(a), None, &result.final_test));
    }
    let mut cfg = config.clone();
    cfg.mode = TrainMode::Pareto;
    cfg.seed = derive_seed(config.seed, "ablation-pareto");
    let result = fit(data, &cfg, protocol)?;
    table
        .rows
        .push(sweep_row("pareto".into(), None, None, &result.final_test));
    Ok(table)
}

/// Retention sweep: one adaptive fit per one-day retention value, with
/// the penalty forced to the single-curve form at that retention.
pub fn memory_strength_sweep(
    data: &Dataset,
    retentions: &[f64],
    config: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<SweepTable> {
    if retentions.is_empty() {
        return Err(Error::InvalidInput("no retention values given".into()));
    }
    for &l in retentions {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::InvalidInput(format!(
                "retention must lie in (0,1), got {l}"
            )));
        }
    }
    let mut table = SweepTable::default();
    for (idx, &l) in retentions.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.mode = TrainMode::Pareto;
        cfg.forgetting.penalty = PenaltyMode::Offline { retention_l: l };
        cfg.seed = derive_seed_indexed(config.seed, "retention-run", idx as u64);
        let result = fit(data, &cfg, protocol)?;
        table
            .rows
            .push(sweep_row(format!("l_{l}"), None, Some(l), &result.final_test));
    }
    Ok(table)
}

/// Generates the world and simulates its log in one call.
pub fn build_dataset(
    world_config: &crate::dataio::WorldConfig,
    protocol: &EvalProtocol,
    rule: crate::dataio::NegativeRule,
) -> Result<Dataset> {
    rule.validate()?;
    let (world, teacher) = generate_world(world_config)?;
    let log = simulate_logs(&world, &teacher, world_config.num_impressions, protocol)?;
    Ok(Dataset {
        world,
        teacher,
        log,
        rule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{NegativeRule, WorldConfig};
    use crate::ranker::RankerParams;

    fn tiny_protocol() -> EvalProtocol {
        EvalProtocol {
            candidate_pool_size: 20,
            prerank_cut: 5,
            final_cut: 1,
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = WorldConfig {
            num_users: 20,
            num_items: 50,
            latent_dim: 4,
            num_user_segments: 2,
            num_material_clusters: 5,
            num_item_clusters: 5,
            num_industry_clusters: 3,
            propensity_low: 0.1,
            propensity_high: 0.7,
            num_impressions: 400,
            horizon_days: 5.0,
            seed,
            ..WorldConfig::default()
        };
        build_dataset(&cfg, &tiny_protocol(), NegativeRule::default()).unwrap()
    }

    fn tiny_config(seed: u64, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            epochs: 1,
            impressions_per_step: 16,
            candidates_per_impression: 5,
            ranker: RankerSizes {
                embedding_dim: 4,
                hidden: [8, 8, 4],
            },
            ..TrainConfig::default()
        }
    }

    fn batches(data: &Dataset, config: &TrainConfig, n: usize) -> Vec<Vec<Impression>> {
        let imps = impressions_from_records(
            &data.log.records,
            data.world.config.num_items,
            config.candidates_per_impression,
            config.seed,
            "test-batches",
        );
        imps.chunks(config.impressions_per_step)
            .take(n)
            .map(|c| c.to_vec())
            .collect()
    }

    #[test]
    fn aggregate_direction_is_exact() {
        let g1 = vec![1.0, -2.0, 0.5];
        let g2 = vec![0.25, 4.0, -1.0];
        let d = aggregate_direction(0.75, 0.25, &g1, &g2);
        for i in 0..3 {
            assert_eq!(d[i], 0.75 * g1[i] + 0.25 * g2[i]);
        }
    }

    #[test]
    fn fixed_alpha_one_bypasses_solver_and_matches_pure_ltr() {
        let data = tiny_dataset(1);
        let config = tiny_config(2, TrainMode::FixedAlpha { alpha_ltr: 1.0 });
        let mut trainer = Trainer::new(&data, config.clone()).unwrap();
        for batch in batches(&data, &config, 5) {
            let r = trainer.train_step(&batch).unwrap();
            assert_eq!(r.alpha_ltr, 1.0);
            assert_eq!(r.alpha_fg, 0.0);
            // direction == g_ltr exactly, so the norms coincide bitwise
            assert_eq!(r.direction_norm, r.grad_norm_ltr);
        }
        assert_eq!(trainer.solver_invocations(), 0);
    }

    #[test]
    fn pareto_steps_keep_alpha_on_simplex_and_satisfy_identities() {
        let data = tiny_dataset(3);
        let config = tiny_config(4, TrainMode::Pareto);
        let mut trainer = Trainer::new(&data, config.clone()).unwrap();
        let mut solver_steps = 0;
        for batch in batches(&data, &config, 8) {
            let r = trainer.train_step(&batch).unwrap();
            assert!(!r.skipped);
            assert!((r.alpha_ltr + r.alpha_fg - 1.0).abs() < 1e-9);
            assert!(r.alpha_ltr >= 0.0 && r.alpha_fg >= 0.0);
            if !r.fg_underflow {
                solver_steps += 1;
            }
            // Bilinear identity: d.d == a1*(d.g1) + a2*(d.g2).
            let recomputed = r.alpha_ltr * r.dir_dot_ltr + r.alpha_fg * r.dir_dot_fg;
            let scale = r.combined_norm_sq.abs().max(1.0);
            assert!(
                (recomputed - r.combined_norm_sq).abs() < 1e-9 * scale,
                "aggregation identity violated: {recomputed} vs {}",
                r.combined_norm_sq
            );
            // Common-descent: the direction does not oppose either
            // objective where the step is not stationary.
            if r.combined_norm_sq > config.solver.stat_tol && !r.fg_underflow {
                assert!(r.dir_dot_ltr >= -1e-8, "dir.g_ltr = {}", r.dir_dot_ltr);
                assert!(r.dir_dot_fg >= -1e-8, "dir.g_fg = {}", r.dir_dot_fg);
            }
        }
        assert_eq!(trainer.solver_invocations(), solver_steps);
        assert!(solver_steps > 0);
    }

    #[test]
    fn tied_teacher_and_zero_weights_skip_the_step() {
        let mut data = tiny_dataset(5);
        // Zero teacher: every pair tied. Empty log: every weight zero.
        for u in data.teacher.user_latent.iter_mut() {
            u.iter_mut().for_each(|v| *v = 0.0);
        }
        data.teacher.item_bias.iter_mut().for_each(|v| *v = 0.0);
        data.log.records.clear();
        let config = tiny_config(6, TrainMode::Pareto);
        let mut trainer = Trainer::new(&data, config).unwrap();
        let before = trainer.params().flat().to_vec();
        let batch = vec![Impression {
            user_id: 1,
            timestamp: 1_600_000_000,
            candidates: vec![1, 2, 3],
        }];
        let r = trainer.train_step(&batch).unwrap();
        assert!(r.skipped);
        assert_eq!(r.loss_ltr, 0.0);
        assert_eq!(trainer.params().flat(), before.as_slice());
        assert_eq!(trainer.solver_invocations(), 0);
    }

    #[test]
    fn zero_direction_leaves_parameters_unchanged() {
        let mut data = tiny_dataset(7);
        // Zero teacher kills the ranking gradient; fixed alpha = 1 zeroes
        // the penalty contribution, so the whole direction is zero.
        for u in data.teacher.user_latent.iter_mut() {
            u.iter_mut().for_each(|v| *v = 0.0);
        }
        data.teacher.item_bias.iter_mut().for_each(|v| *v = 0.0);
        let config = tiny_config(8, TrainMode::FixedAlpha { alpha_ltr: 1.0 });
        let mut trainer = Trainer::new(&data, config.clone()).unwrap();
        let before = trainer.params().flat().to_vec();
        for batch in batches(&data, &config, 2) {
            let r = trainer.train_step(&batch).unwrap();
            assert!(!r.skipped, "penalty weights exist, step must run");
            assert_eq!(r.direction_norm, 0.0);
        }
        assert_eq!(trainer.params().flat(), before.as_slice());
    }

    #[test]
    fn diverging_losses_abort_with_diagnostic() {
        let data = tiny_dataset(9);
        let config = tiny_config(10, TrainMode::Pareto);
        let mut trainer = Trainer::new(&data, config.clone()).unwrap();
        // Poison the head bias: every score becomes NaN.
        let n = trainer.params().param_count();
        let mut poison = vec![0.0; n];
        poison[n - 1] = f64::NAN;
        trainer.params_mut().apply_delta(&poison, 1.0).unwrap();
        let batch = &batches(&data, &config, 1)[0];
        match trainer.train_step(batch) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected a NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn fit_is_deterministic_and_respects_epochs() {
        let data = tiny_dataset(11);
        let mut config = tiny_config(12, TrainMode::Pareto);
        config.epochs = 2;
        config.checkpoint_every_epochs = 1;
        let a = fit(&data, &config, &tiny_protocol()).unwrap();
        let b = fit(&data, &config, &tiny_protocol()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(
            serde_json::to_string(&a.curve).unwrap(),
            serde_json::to_string(&b.curve).unwrap()
        );
        assert_eq!(a.epochs.len(), 2);
        assert_eq!(a.checkpoints.len(), 2);
        // Mean preference weights live on the simplex.
        for e in &a.epochs {
            assert!((e.mean_alpha_ltr + e.mean_alpha_fg - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let data = tiny_dataset(13);
        let mut config = tiny_config(14, TrainMode::Pareto);
        config.epochs = 0;
        let result = fit(&data, &config, &tiny_protocol()).unwrap();
        let expected = RankerParams::init_seeded(
            data.world
                .ranker_config(config.ranker.embedding_dim, config.ranker.hidden),
            derive_seed(config.seed, "params"),
        )
        .unwrap();
        assert_eq!(result.params, expected);
        assert!(result.curve.is_empty());
        assert!(result.epochs.is_empty());
    }

    #[test]
    fn fit_rejects_logs_too_small_to_split() {
        let mut data = tiny_dataset(15);
        data.log.records.truncate(2);
        let config = tiny_config(16, TrainMode::Pareto);
        assert!(fit(&data, &config, &tiny_protocol()).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = TrainConfig::default();
        c.mode = TrainMode::FixedAlpha { alpha_ltr: 1.5 };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.split.val = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.forgetting.penalty = PenaltyMode::Offline { retention_l: 1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_sweep_shapes_and_bounds() {
        let data = tiny_dataset(17);
        let mut config = tiny_config(18, TrainMode::Pareto);
        config.max_eval_impressions = 10;
        assert!(ablation_sweep(&data, &[0.4], &config, &tiny_protocol()).is_err());
        assert!(ablation_sweep(&data, &[], &config, &tiny_protocol()).is_err());
        let table = ablation_sweep(&data, &[1.0], &config, &tiny_protocol()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].alpha_ltr, Some(1.0));
        assert_eq!(table.rows[1].label, "pareto");

        // Duplicate entries become independent duplicate rows.
        let table = ablation_sweep(&data, &[0.8, 0.8], &config, &tiny_protocol()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[0].alpha_ltr, table.rows[1].alpha_ltr);
    }

    #[test]
    fn retention_sweep_validates_and_runs() {
        let data = tiny_dataset(19);
        let mut config = tiny_config(20, TrainMode::Pareto);
        config.max_eval_impressions = 10;
        assert!(memory_strength_sweep(&data, &[0.0], &config, &tiny_protocol()).is_err());
        assert!(memory_strength_sweep(&data, &[1.0], &config, &tiny_protocol()).is_err());
        let table = memory_strength_sweep(&data, &[0.5], &config, &tiny_protocol()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].retention_l, Some(0.5));
    }

    #[test]
    fn online_penalty_mode_trains() {
        let data = tiny_dataset(21);
        let mut config = tiny_config(22, TrainMode::Pareto);
        let mut dims = BTreeMap::new();
        dims.insert(
            crate::dataio::DIM_ITEM.to_string(),
            OnlineDim {
                lambda: 0.6,
                retention_l: 0.7,
            },
        );
        dims.insert(
            crate::dataio::DIM_MATERIAL.to_string(),
            OnlineDim {
                lambda: 0.4,
                retention_l: 0.5,
            },
        );
        config.forgetting.penalty = PenaltyMode::Online { dims };
        config.forgetting.preprocess = RatePreprocess::ClippedPower { gamma: 0.5 };
        let mut trainer = Trainer::new(&data, config.clone()).unwrap();
        for batch in batches(&data, &config, 3) {
            let r = trainer.train_step(&batch).unwrap();
            assert!(r.loss_fg.is_finite());
        }
    }

    #[test]
    fn objective_losses_match_worked_example_shape() {
        // One impression, 2 candidates, teacher (2,1), zero params so
        // s = (0,0) and p = (0.5,0.5): L_LTR = ln 2. With zero history,
        // weights are zero and L_FG = 0.
        let mut data = tiny_dataset(23);
        data.log.records.clear();
        for (i, u) in data.teacher.user_latent.iter_mut().enumerate() {
            u.iter_mut().for_each(|v| *v = 0.0);
            let _ = i;
        }
        for (i, v) in data.teacher.item_latent.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = 0.0);
            data.teacher.item_bias[i] = if i == 1 { 2.0 } else { 1.0 };
        }
        let mut config = tiny_config(24, TrainMode::Pareto);
        config.ranker = RankerSizes {
            embedding_dim: 2,
            hidden: [2, 2, 2],
        };
        let data2 = Dataset {
            world: data.world.clone(),
            teacher: data.teacher.clone(),
            log: data.log.clone(),
            rule: data.rule,
        };
        let trainer = Trainer::new(&data2, config).unwrap();
        // Zero out the params for a deterministic forward pass.
        let zero = RankerParams::zeros(trainer.params().config().clone()).unwrap();
        let trainer = Trainer {
            params: zero,
            ..trainer
        };
        let batch = vec![Impression {
            user_id: 0,
            timestamp: 1_600_000_000,
            candidates: vec![1, 2],
        }];
        let losses = trainer.objective_losses(&batch).unwrap();
        assert!((losses.loss_ltr - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(losses.loss_fg, 0.0);
        assert_eq!(losses.penalty_weights, vec![0.0, 0.0]);
    }
}
