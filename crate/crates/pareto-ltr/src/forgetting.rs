//! Negative-feedback rates, memory decay, and the penalty loss.
//!
//! For a candidate shown at time `now`, earlier interactions are bucketed
//! into cumulative time windows and each window's fast-slip rate is the
//! fraction of negative labels among interactions no older than the
//! window. Rates are then combined into a penalty weight by discounting
//! each window with the exponential memory-retention curve
//! `R(t) = exp(-t/S)`: recent aversion weighs more than old aversion. The
//! penalty loss `-sum_i w_i * log(1 - p_i)` pushes the model's scores for
//! penalized candidates down, hardest for candidates it currently ranks
//! high.
//!
//! All times are canonically in days; `strength_s` is tied to the
//! one-day retention `L` by `S = -1/ln(L)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// the penalty log, which diverges at 1.
pub const PROB_CLAMP: f64 = 1e-7;

/// Feedback polarity of one interaction. `Negative` is a fast-slip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Neutral,
}

/// One timestamped feedback event. `dims` optionally carries cluster
/// identifiers per dimension name (e.g. material fingerprint, item
/// fingerprint, industry) for multi-dimension penalty weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    /// Seconds since epoch; never negative.
    pub timestamp: i64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dims: BTreeMap<String, u64>,
}

/// Strictly increasing cumulative window lengths, in days.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeWindows {
    days: Vec<f64>,
}

impl TimeWindows {
    pub fn from_days(days: Vec<f64>) -> Result<Self> {
        if days.is_empty() {
            return Err(Error::InvalidInput("window list is empty".into()));
        }
        for w in days.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidInput(format!(
                    "windows must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if days[0] <= 0.0 || days.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidInput(
                "windows must be positive and finite".into(),
            ));
        }
        Ok(Self { days })
    }

    /// Parses mixed-unit specs such as `"10min"`, `"3h"`, `"1day"`,
    /// `"7days"`, or a bare number of days.
    pub fn parse(specs: &[String]) -> Result<Self> {
        Self::from_days(
            specs
                .iter()
                .map(|s| parse_duration_days(s))
                .collect::<Result<_>>()?,
        )
    }

    /// `{10min, 3h, 1day, 7days}`.
    pub fn default_windows() -> Self {
        Self {
            days: vec![10.0 / 1440.0, 0.125, 1.0, 7.0],
        }
    }

    pub fn days(&self) -> &[f64] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

impl<'de> Deserialize<'de> for TimeWindows {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Spec {
            Days(f64),
            Text(String),
        }
        let specs = Vec::<Spec>::deserialize(de)?;
        let days: Vec<f64> = specs
            .into_iter()
            .map(|s| match s {
                Spec::Days(d) => Ok(d),
                Spec::Text(t) => parse_duration_days(&t),
            })
            .collect::<Result<_>>()
            .map_err(serde::de::Error::custom)?;
        Self::from_days(days).map_err(serde::de::Error::custom)
    }
}

fn parse_duration_days(spec: &str) -> Result<f64> {
    let s = spec.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad duration {spec:?}")))?;
    let per_day = match unit.trim() {
        "min" | "m" => 1440.0,
        "h" | "hr" | "hour" | "hours" => 24.0,
        "" | "d" | "day" | "days" => 1.0,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown duration unit {other:?} in {spec:?}"
            )))
        }
    };
    Ok(value / per_day)
}

/// Retention parameterization: `retention_l` is the memory rate after one
/// day and `strength_s = -1/ln(retention_l)` the decay time constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MemoryCurveRepr", into = "MemoryCurveRepr")]
pub struct MemoryCurve {
    retention_l: f64,
    strength_s: f64,
}

#[derive(Serialize, Deserialize)]
struct MemoryCurveRepr {
    retention_l: f64,
}

impl TryFrom<MemoryCurveRepr> for MemoryCurve {
    type Error = Error;
    fn try_from(r: MemoryCurveRepr) -> Result<Self> {
        MemoryCurve::from_retention(r.retention_l)
    }
}

impl From<MemoryCurve> for MemoryCurveRepr {
    fn from(c: MemoryCurve) -> Self {
        Self {
            retention_l: c.retention_l,
        }
    }
}

impl MemoryCurve {
    pub fn from_retention(retention_l: f64) -> Result<Self> {
        Ok(Self {
            retention_l,
            strength_s: strength_from_retention(retention_l)?,
        })
    }

    pub fn retention(&self) -> f64 {
        self.retention_l
    }

    pub fn strength(&self) -> f64 {
        self.strength_s
    }
}

/// `S = -1/ln(L)` for `L` in (0, 1).
pub fn strength_from_retention(retention_l: f64) -> Result<f64> {
    if !(retention_l > 0.0 && retention_l < 1.0) {
        return Err(Error::InvalidInput(format!(
            "retention must lie in (0,1), got {retention_l}"
        )));
    }
    Ok(-1.0 / retention_l.ln())
}

/// `R(t) = exp(-t/S)` for `t >= 0` days.
pub fn memory_decay(t_days: f64, curve: &MemoryCurve) -> Result<f64> {
    if !(t_days >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "elapsed time must be nonnegative, got {t_days}"
        )));
    }
    Ok((-t_days / curve.strength_s).exp())
}

/// Per-dimension mixing weights and retention curves for the
/// multi-dimension penalty. Lambdas are positive and sum to one within
/// 1e-9 (a single dimension therefore carries lambda = 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionWeights {
    entries: BTreeMap<String, DimensionComponent>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimensionComponent {
    pub lambda: f64,
    pub curve: MemoryCurve,
}

impl DimensionWeights {
    pub fn new(entries: BTreeMap<String, DimensionComponent>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("no dimensions given".into()));
        }
        let mut sum = 0.0;
        for (name, c) in &entries {
            if !(c.lambda > 0.0 && c.lambda <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "lambda for {name:?} must lie in (0,1], got {}",
                    c.lambda
                )));
            }
            sum += c.lambda;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "dimension lambdas sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DimensionComponent)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Per-window fast-slip rates plus the raw counts behind them so results
/// can be audited. `counts[j]` is `(negatives, totals)` for window `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastSlipVector {
    pub rates: Vec<f64>,
    pub counts: Vec<(u64, u64)>,
}

impl FastSlipVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            rates: vec![0.0; n],
            counts: vec![(0, 0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Whose history counts: everyone's interactions with the key, or only
/// the requesting user's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherMode {
    General,
    Personalized,
}

/// What the history is keyed on: the item itself, or one dimension's
/// cluster identifier.
#[derive(Debug, Clone, PartialEq)]
pub enum CountKey<'a> {
    Item(u64),
    Cluster { dim: &'a str, cluster: u64 },
}

impl CountKey<'_> {
    fn matches(&self, it: &Interaction) -> bool {
        match self {
            CountKey::Item(id) => it.item_id == *id,
            CountKey::Cluster { dim, cluster } => it.dims.get(*dim) == Some(cluster),
        }
    }
}

/// Counts fast-slip rates over cumulative windows by scanning `history`.
///
/// An interaction is counted in window `j` when it matches the key, is
/// strictly earlier than `now` (the event being scored never counts
/// itself; future-dated rows are excluded), and its gap in days is at
/// most the window length. Neutral labels land in denominators only. An
/// empty window denominator yields a rate of 0.
pub fn fast_slip_rates(
    history: &[Interaction],
    key: &CountKey,
    now: i64,
    windows: &TimeWindows,
    mode: GatherMode,
    user_id: Option<u64>,
) -> Result<FastSlipVector> {
    let user = required_user(mode, user_id)?;
    let mut out = FastSlipVector::zeros(windows.len());
    for it in history {
        if it.timestamp < 0 {
            return Err(Error::InvalidInput(format!(
                "negative interaction timestamp {}",
                it.timestamp
            )));
        }
        if !key.matches(it) || it.timestamp >= now {
            continue;
        }
        if let Some(u) = user {
            if it.user_id != u {
                continue;
            }
        }
        let gap_days = (now - it.timestamp) as f64 / SECONDS_PER_DAY;
        for (j, &limit) in windows.days().iter().enumerate() {
            if gap_days <= limit {
                out.counts[j].1 += 1;
                if it.label == Label::Negative {
                    out.counts[j].0 += 1;
                }
            }
        }
    }
    finish_rates(&mut out);
    Ok(out)
}

fn required_user(mode: GatherMode, user_id: Option<u64>) -> Result<Option<u64>> {
    match mode {
        GatherMode::General => Ok(None),
        GatherMode::Personalized => user_id
            .map(Some)
            .ok_or_else(|| Error::InvalidInput("personalized gathering needs a user id".into())),
    }
}

fn finish_rates(v: &mut FastSlipVector) {
    for (rate, &(neg, tot)) in v.rates.iter_mut().zip(&v.counts) {
        *rate = if tot == 0 { 0.0 } else { neg as f64 / tot as f64 };
    }
}

/// Prebuilt per-key timestamp lists with negative-count prefix sums, so a
/// window count is two binary searches. Built once over an interaction
/// log, then read-only; results are identical to [`fast_slip_rates`].
#[derive(Debug, Default)]
pub struct HistoryIndex {
    by_item: BTreeMap<u64, EventList>,
    by_item_user: BTreeMap<(u64, u64), EventList>,
    by_cluster: BTreeMap<(String, u64), EventList>,
    by_cluster_user: BTreeMap<(String, u64, u64), EventList>,
}

#[derive(Debug, Default)]
struct EventList {
    timestamps: Vec<i64>,
    // negatives_before[i] = negatives among the first i events
    negatives_before: Vec<u32>,
}

impl EventList {
    fn push(&mut self, ts: i64, negative: bool) {
        if self.negatives_before.is_empty() {
            self.negatives_before.push(0);
        }
        let prev = *self.negatives_before.last().unwrap();
        self.timestamps.push(ts);
        self.negatives_before.push(prev + u32::from(negative));
    }

    /// Counts events with `gap_days <= limit` and `ts < now`, using the
    /// same gap arithmetic as the brute-force counter.
    fn window_counts(&self, now: i64, limit_days: f64) -> (u64, u64) {
        let hi = self.timestamps.partition_point(|&ts| ts < now);
        let lo = self
            .timestamps
            .partition_point(|&ts| (now - ts) as f64 / SECONDS_PER_DAY > limit_days);
        if lo >= hi {
            return (0, 0);
        }
        let neg = u64::from(self.negatives_before[hi]) - u64::from(self.negatives_before[lo]);
        (neg, (hi - lo) as u64)
    }
}

impl HistoryIndex {
    /// Indexes interactions by item, (item, user), cluster, and
    /// (cluster, user). Input must be sorted by timestamp ascending.
    pub fn build(history: &[Interaction]) -> Result<Self> {
        let mut idx = Self::default();
        let mut prev = i64::MIN;
        for it in history {
            if it.timestamp < 0 {
                return Err(Error::InvalidInput(format!(
                    "negative interaction timestamp {}",
                    it.timestamp
                )));
            }
            if it.timestamp < prev {
                return Err(Error::InvalidInput(
                    "history must be sorted by timestamp ascending".into(),
                ));
            }
            prev = it.timestamp;
            let neg = it.label == Label::Negative;
            idx.by_item
                .entry(it.item_id)
                .or_default()
                .push(it.timestamp, neg);
            idx.by_item_user
                .entry((it.item_id, it.user_id))
                .or_default()
                .push(it.timestamp, neg);
            for (dim, &cluster) in &it.dims {
                idx.by_cluster
                    .entry((dim.clone(), cluster))
                    .or_default()
                    .push(it.timestamp, neg);
                idx.by_cluster_user
                    .entry((dim.clone(), cluster, it.user_id))
                    .or_default()
                    .push(it.timestamp, neg);
            }
        }
        Ok(idx)
    }

    /// Indexed equivalent of [`fast_slip_rates`].
    pub fn fast_slip_rates(
        &self,
        key: &CountKey,
        now: i64,
        windows: &TimeWindows,
        mode: GatherMode,
        user_id: Option<u64>,
    ) -> Result<FastSlipVector> {
        let user = required_user(mode, user_id)?;
        let events = match (key, user) {
            (CountKey::Item(id), None) => self.by_item.get(id),
            (CountKey::Item(id), Some(u)) => self.by_item_user.get(&(*id, u)),
            (CountKey::Cluster { dim, cluster }, None) => {
                self.by_cluster.get(&(dim.to_string(), *cluster))
            }
            (CountKey::Cluster { dim, cluster }, Some(u)) => {
                self.by_cluster_user.get(&(dim.to_string(), *cluster, u))
            }
        };
        let mut out = FastSlipVector::zeros(windows.len());
        if let Some(events) = events {
            for (j, &limit) in windows.days().iter().enumerate() {
                out.counts[j] = events.window_counts(now, limit);
            }
        }
        finish_rates(&mut out);
        Ok(out)
    }
}

/// Pre-processing applied to each rate before decay weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePreprocess {
    /// Pass the rate through unchanged (the offline default).
    Identity,
    /// `clamp(R, 0, 1)^gamma`; a concave gamma spreads small rates apart.
    ClippedPower { gamma: f64 },
}

impl RatePreprocess {
    pub fn validate(&self) -> Result<()> {
        if let RatePreprocess::ClippedPower { gamma } = self {
            if !(*gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "clipped_power gamma must be positive, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// Applies the configured rate pre-processing.
pub fn preprocess_rate(rate: f64, mode: &RatePreprocess) -> f64 {
    match mode {
        RatePreprocess::Identity => rate,
        RatePreprocess::ClippedPower { gamma } => rate.clamp(0.0, 1.0).powf(*gamma),
    }
}

/// Single-curve penalty weight: `w = sum_j f(R_j) * exp(-t_j / S)`.
pub fn penalty_weight_offline(
    rates: &FastSlipVector,
    windows: &TimeWindows,
    curve: &MemoryCurve,
    f: &RatePreprocess,
) -> Result<f64> {
    if rates.len() != windows.len() {
        return Err(Error::InvalidInput(format!(
            "{} rates for {} windows",
            rates.len(),
            windows.len()
        )));
    }
    let mut w = 0.0;
    for (&rate, &t) in rates.rates.iter().zip(windows.days()) {
        w += preprocess_rate(rate, f) * memory_decay(t, curve)?;
    }
    Ok(w)
}

/// Multi-dimension penalty weight:
/// `w = sum_m lambda_m * sum_j f(R^m_j) * exp(-t_j / S_m)`,
/// where each dimension's rates were counted on its own cluster key.
/// With a single dimension (lambda = 1) this reduces exactly to
/// [`penalty_weight_offline`].
pub fn penalty_weight_online(
    per_dim_rates: &BTreeMap<String, FastSlipVector>,
    windows: &TimeWindows,
    dimw: &DimensionWeights,
    f: &RatePreprocess,
) -> Result<f64> {
    let mut w = 0.0;
    for (name, component) in dimw.iter() {
        let rates = per_dim_rates.get(name).ok_or_else(|| {
            Error::InvalidInput(format!("no rates supplied for dimension {name:?}"))
        })?;
        w += component.lambda * penalty_weight_offline(rates, windows, &component.curve, f)?;
    }
    Ok(w)
}

/// Penalty loss `L = -sum_i w_i * log(1 - p_i)` and its gradient
/// `dL/dp_i = w_i / (1 - p_i)`, with `p` clamped away from the
/// singularity at 1 (see [`PROB_CLAMP`]).
pub fn forgetting_loss(weights: &[f64], probs: &[f64]) -> Result<(f64, Vec<f64>)> {
    if weights.len() != probs.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} probabilities",
            weights.len(),
            probs.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&w, &p) in weights.iter().zip(probs) {
        if !(w >= 0.0) {
            return Err(Error::InvalidInput(format!("negative penalty weight {w}")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= w * (1.0 - p).ln();
        grad.push(w / (1.0 - p));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("penalty loss is not finite".into()));
    }
    Ok((loss, grad))
}
