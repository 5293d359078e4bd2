//! Cascade evaluation and ranking metrics.
//!
//! The evaluation protocol mirrors serving: the model under test scores a
//! candidate pool, the top `prerank_cut` survive, the frozen teacher picks
//! the final `final_cut` to expose, and a user model draws the outcome of
//! each exposure. Consistency is measured by NDCG over the survivors and
//! by whether the teacher's pool-wide top-1 survived the cut; outcome
//! quality by the fast-slip rate and CTR of the exposures.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_indexed;

/// Pool and cut sizes of the serving cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub candidate_pool_size: usize,
    pub prerank_cut: usize,
    pub final_cut: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            candidate_pool_size: 100,
            prerank_cut: 10,
            final_cut: 1,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.final_cut == 0 {
            return Err(Error::InvalidConfig("final_cut must be at least 1".into()));
        }
        if !(self.final_cut <= self.prerank_cut && self.prerank_cut <= self.candidate_pool_size) {
            return Err(Error::InvalidConfig(format!(
                "cuts must satisfy final <= prerank <= pool, got {} <= {} <= {}",
                self.final_cut, self.prerank_cut, self.candidate_pool_size
            )));
        }
        Ok(())
    }
}

/// One request to score: a user, a moment in time, and the candidate
/// items in play (training batches carry short lists, evaluation carries
/// full pools).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: u64,
    pub timestamp: i64,
    pub candidates: Vec<u64>,
}

/// Simulated user reaction to one exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposureOutcome {
    FastSlip,
    Click,
    Neutral,
}

/// Anything that can score a (user, item) pair deterministically.
pub trait CandidateScorer {
    fn candidate_score(&self, user: u64, item: u64) -> Result<f64>;
}

/// Draws the user's reaction to an exposed candidate.
pub trait OutcomeModel {
    fn draw_outcome(
        &self,
        user: u64,
        item: u64,
        timestamp: i64,
        rng: &mut ChaCha8Rng,
    ) -> ExposureOutcome;
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ndcg_at_10: f64,
    pub recall_10_1: f64,
    pub fast_slip_rate: f64,
    pub ctr: f64,
    pub counts: EvalCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Impressions that passed protocol validation and were scored.
    pub impressions: u64,
    /// Impressions rejected for carrying fewer candidates than the pool size.
    pub rejected: u64,
    /// Final candidates shown (`impressions * final_cut`).
    pub exposures: u64,
    pub fast_slips: u64,
    pub clicks: u64,
}

/// Graded relevance of a candidate from its teacher rank (1-based):
/// `max(0, k - (rank - 1))`, so the teacher's best candidate grades `k`
/// and anything past rank `k` grades zero.
pub fn relevance_from_rank(rank: usize, k: usize) -> f64 {
    if rank == 0 || rank > k {
        0.0
    } else {
        (k - (rank - 1)) as f64
    }
}

/// NDCG@k: DCG of `ranked_rels` (relevance grades in ranked order)
/// against the ideal DCG attainable from `pool_rels` (grades of the whole
/// pool). Position discount is `1/log2(pos+1)` with positions from 1.
/// Returns 0 when the ideal DCG is 0.
pub fn ndcg_at_k(ranked_rels: &[f64], pool_rels: &[f64], k: usize) -> Result<f64> {
    if ranked_rels.is_empty() || pool_rels.is_empty() {
        return Err(Error::InvalidInput("empty relevance list".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if ranked_rels.iter().chain(pool_rels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("relevance contains NaN/Inf".into()));
    }
    let dcg = dcg_at_k(ranked_rels.iter().copied(), k);
    let mut ideal: Vec<f64> = pool_rels.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = dcg_at_k(ideal.into_iter(), k);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

fn dcg_at_k(rels: impl Iterator<Item = f64>, k: usize) -> f64 {
    rels.take(k)
        .enumerate()
        .map(|(pos, rel)| rel / ((pos + 2) as f64).log2())
        .sum()
}

/// Average over impressions of whether the teacher's top-1 candidate
/// survived the pre-rank cut; each term is 0 or 1.
pub fn recall_top1(prerank_topk: &[Vec<u64>], teacher_top1: &[u64]) -> Result<f64> {
    if prerank_topk.is_empty() || prerank_topk.len() != teacher_top1.len() {
        return Err(Error::InvalidInput(format!(
            "{} top-k sets vs {} teacher picks",
            prerank_topk.len(),
            teacher_top1.len()
        )));
    }
    let hits = prerank_topk
        .iter()
        .zip(teacher_top1)
        .filter(|(topk, t1)| topk.contains(t1))
        .count();
    Ok(hits as f64 / prerank_topk.len() as f64)
}

/// Fraction of exposures that drew a fast-slip.
pub fn fast_slip_rate_metric(outcomes: &[ExposureOutcome]) -> Result<f64> {
    rate_of(outcomes, ExposureOutcome::FastSlip)
}

/// Fraction of exposures that drew a click.
pub fn ctr_metric(outcomes: &[ExposureOutcome]) -> Result<f64> {
    rate_of(outcomes, ExposureOutcome::Click)
}

fn rate_of(outcomes: &[ExposureOutcome], which: ExposureOutcome) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("no exposures to rate".into()));
    }
    let hits = outcomes.iter().filter(|&&o| o == which).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Spearman rank correlation with average ranks on ties. Returns 0 when
/// either side has zero rank variance (no trend evidence).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "{} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 points for a correlation".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input contains NaN/Inf".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Indices of `items` ordered by score descending, ties broken by
/// ascending item id.
fn ranked_indices(items: &[u64], scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(items[a].cmp(&items[b]))
    });
    idx
}

/// Runs the full cascade over test impressions and aggregates all four
/// metrics. Impressions with fewer candidates than the protocol's pool
/// size are rejected and counted. Deterministic given the seed.
pub fn evaluate(
    prerank: &impl CandidateScorer,
    teacher: &impl CandidateScorer,
    impressions: &[Impression],
    protocol: &EvalProtocol,
    outcomes: &impl OutcomeModel,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    if impressions.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut counts = EvalCounts {
        impressions: 0,
        rejected: 0,
        exposures: 0,
        fast_slips: 0,
        clicks: 0,
    };
    let mut ndcg_sum = 0.0;
    let mut hits = 0u64;
    let k = protocol.prerank_cut;

    for (i, imp) in impressions.iter().enumerate() {
        if imp.candidates.len() < protocol.candidate_pool_size {
            counts.rejected += 1;
            continue;
        }
        let pool = &imp.candidates;
        let mut pre_scores = Vec::with_capacity(pool.len());
        let mut teach_scores = Vec::with_capacity(pool.len());
        for &item in pool {
            let s = prerank.candidate_score(imp.user_id, item)?;
            let q = teacher.candidate_score(imp.user_id, item)?;
            if !s.is_finite() || !q.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite score for user {} item {item}",
                    imp.user_id
                )));
            }
            pre_scores.push(s);
            teach_scores.push(q);
        }

        let pre_order = ranked_indices(pool, &pre_scores);
        let teach_order = ranked_indices(pool, &teach_scores);
        let mut teacher_rank = vec![0usize; pool.len()];
        for (rank0, &idx) in teach_order.iter().enumerate() {
            teacher_rank[idx] = rank0 + 1;
        }

        let topk = &pre_order[..k.min(pre_order.len())];
        let ranked_rels: Vec<f64> = topk
            .iter()
            .map(|&idx| relevance_from_rank(teacher_rank[idx], k))
            .collect();
        let pool_rels: Vec<f64> = (0..pool.len())
            .map(|idx| relevance_from_rank(teacher_rank[idx], k))
            .collect();
        ndcg_sum += ndcg_at_k(&ranked_rels, &pool_rels, k)?;

        let teacher_top1 = pool[teach_order[0]];
        if topk.iter().any(|&idx| pool[idx] == teacher_top1) {
            hits += 1;
        }

        // The teacher picks the exposures among the survivors.
        let mut survivors: Vec<usize> = topk.to_vec();
        survivors.sort_by_key(|&idx| teacher_rank[idx]);
        let mut rng = rng_indexed(seed, "eval-outcome", i as u64);
        for &idx in survivors.iter().take(protocol.final_cut) {
            let outcome = outcomes.draw_outcome(imp.user_id, pool[idx], imp.timestamp, &mut rng);
            counts.exposures += 1;
            match outcome {
                ExposureOutcome::FastSlip => counts.fast_slips += 1,
                ExposureOutcome::Click => counts.clicks += 1,
                ExposureOutcome::Neutral => {}
            }
        }
        counts.impressions += 1;
    }

    if counts.impressions == 0 {
        return Err(Error::InvalidInput(
            "every impression was rejected by the protocol".into(),
        ));
    }
    Ok(EvalReport {
        ndcg_at_10: ndcg_sum / counts.impressions as f64,
        recall_10_1: hits as f64 / counts.impressions as f64,
        fast_slip_rate: counts.fast_slips as f64 / counts.exposures as f64,
        ctr: counts.clicks as f64 / counts.exposures as f64,
        counts,
    })
}
