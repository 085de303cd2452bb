//! Consistency and accuracy scoring.
//!
//! The Exponential Consistency Index of an entry evaluated `k` times over
//! `d` items is `(1/d) * sum_i (correct_i / k)^alpha`: the mean per-item
//! ratio of correct evaluations, raised to a penalty exponent. Larger
//! `alpha` punishes occasional mistakes harder.

pub mod bench;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decomp::DecompositionRecord;
use crate::error::{Error, Result};
use crate::filter::FilterResult;
use crate::schema::CategoryId;

pub use bench::{
    best_threshold, run_benchmark, tau_grid, threshold_sweep, BenchTask, BenchmarkError, Condition, ConversationItem,
    Dataset, PipelineConfig, PromptItem, Reference, SweepPoint,
};
pub use report::{curves_csv, penalty_curves, render_csv, render_table, CurvePoint, EvalReport, Metric, CURVE_ALPHAS};

pub const DEFAULT_ALPHA: f64 = 2.5;
pub const DEFAULT_K: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EciParams {
    pub alpha: f64,
    pub k: u32,
}

impl Default for EciParams {
    fn default() -> Self {
        EciParams { alpha: DEFAULT_ALPHA, k: DEFAULT_K }
    }
}

impl EciParams {
    pub fn new(alpha: f64, k: u32) -> Result<Self> {
        let p = EciParams { alpha, k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTally {
    pub correct: u32,
    pub total: u32,
}

impl ItemTally {
    pub fn new(correct: u32, total: u32) -> Result<Self> {
        if correct > total {
            return Err(Error::Domain(format!("tally {correct}/{total} has more correct than total")));
        }
        Ok(ItemTally { correct, total })
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.correct) / f64::from(self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryScore {
    pub id: String,
    pub eci: f64,
    pub d: usize,
    pub tallies: Vec<ItemTally>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl EntryScore {
    pub fn new(id: impl Into<String>, tallies: Vec<ItemTally>, params: &EciParams) -> Result<Self> {
        let eci = eci(&tallies, params)?;
        Ok(EntryScore { id: id.into(), eci, d: tallies.len(), tallies, accuracy: None })
    }
}

pub fn eci(tallies: &[ItemTally], params: &EciParams) -> Result<f64> {
    params.validate()?;
    if tallies.is_empty() {
        return Err(Error::Domain("no items to score".into()));
    }
    let mut sum = 0.0;
    for t in tallies {
        if t.total != params.k {
            return Err(Error::Domain(format!("tally total {} differs from k = {}", t.total, params.k)));
        }
        if t.correct > t.total {
            return Err(Error::Domain(format!("tally {}/{} is invalid", t.correct, t.total)));
        }
        sum += t.ratio().powf(params.alpha);
    }
    Ok(sum / tallies.len() as f64)
}

/// Level `i` of a path, `None` (missing) past its end.
fn level(path: &[CategoryId], i: usize) -> Option<&CategoryId> {
    path.get(i)
}

/// Most frequent value; ties go to the smallest category, and a missing
/// level loses every tie against a real category.
fn modal<'a>(values: &[Option<&'a CategoryId>]) -> Option<&'a CategoryId> {
    let mut counts: BTreeMap<Option<&CategoryId>, u32> = BTreeMap::new();
    for v in values {
        *counts.entry(*v).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let mut winners = counts.into_iter().filter(|(_, c)| *c == best).map(|(v, _)| v);
    let first = winners.next().flatten();
    // `None` sorts first; prefer the next winner if there is one.
    match first {
        Some(c) => Some(c),
        None => winners.next().flatten(),
    }
}

/// Per-level tallies over `k` decompositions of one input.
///
/// Without `gold`, each level is scored against the modal category across
/// the runs. Shorter paths are padded with a missing marker up to the
/// deepest path (or the gold path, when deeper).
pub fn tally_decomposition(records: &[DecompositionRecord], gold: Option<&[CategoryId]>) -> Result<Vec<ItemTally>> {
    let first = records.first().ok_or_else(|| Error::Domain("no records to tally".into()))?;
    if records.iter().any(|r| r.original_prompt != first.original_prompt) {
        return Err(Error::Domain("records come from different inputs".into()));
    }
    let k = records.len() as u32;
    let mut d = records.iter().map(|r| r.path.len()).max().unwrap_or(0);
    if let Some(g) = gold {
        d = d.max(g.len());
    }
    (0..d)
        .map(|i| {
            let values: Vec<Option<&CategoryId>> = records.iter().map(|r| level(&r.path, i)).collect();
            let reference = match gold {
                Some(g) => level(g, i),
                None => modal(&values),
            };
            let correct = values.iter().filter(|v| **v == reference).count() as u32;
            ItemTally::new(correct, k)
        })
        .collect()
}

/// Per-segment membership tallies over `k` filter runs on one tree. The
/// reference is the modal decision; ties count as not kept.
pub fn tally_filtering(results: &[FilterResult], universe: usize) -> Result<Vec<ItemTally>> {
    if results.is_empty() {
        return Err(Error::Domain("no filter results to tally".into()));
    }
    for r in results {
        if let Some(bad) = r.kept_indices.iter().find(|i| **i >= universe) {
            return Err(Error::Domain(format!("kept index {bad} outside universe {universe}")));
        }
    }
    let k = results.len() as u32;
    let sets: Vec<_> = results.iter().map(FilterResult::kept_set).collect();
    (0..universe)
        .map(|i| {
            let kept = sets.iter().filter(|s| s.contains(&i)).count() as u32;
            let correct = if 2 * kept > k { kept } else { k - kept };
            ItemTally::new(correct, k)
        })
        .collect()
}

/// Share of segments whose kept/dropped decision matches the gold labels.
pub fn filtering_accuracy(result: &FilterResult, gold_relevant: Option<&[usize]>, universe: usize) -> Result<f64> {
    let gold = gold_relevant.ok_or_else(|| Error::Domain("no gold labels for this entry".into()))?;
    if universe == 0 {
        return Err(Error::Domain("empty universe".into()));
    }
    let kept = result.kept_set();
    let gold: std::collections::BTreeSet<usize> = gold.iter().copied().collect();
    let agree = (0..universe).filter(|i| kept.contains(i) == gold.contains(i)).count();
    Ok(agree as f64 / universe as f64)
}

/// Share of records whose full path equals the gold path.
pub fn path_accuracy(records: &[DecompositionRecord], gold: &[CategoryId]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("no records".into()));
    }
    let hits = records.iter().filter(|r| r.path == gold).count();
    Ok(hits as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{FilterMethod, FilterParams};

    fn t(c: u32, k: u32) -> ItemTally {
        ItemTally::new(c, k).unwrap()
    }

    fn cid(s: &str) -> CategoryId {
        CategoryId::new(s).unwrap()
    }

    fn record(prompt: &str, path: &[&str]) -> DecompositionRecord {
        DecompositionRecord {
            original_prompt: prompt.into(),
            path: path.iter().map(|s| cid(s)).collect(),
            levels: vec![],
            summaries: vec![],
            backend_id: "m".into(),
            degraded: false,
            trace: vec![],
        }
    }

    fn kept(indices: &[usize]) -> FilterResult {
        FilterResult {
            kept_indices: indices.to_vec(),
            scores: None,
            method: FilterMethod::LlmSelect,
            params: FilterParams::default(),
        }
    }

    #[test]
    fn endpoints() {
        for alpha in [0.4, 0.65, 1.0, 1.5, 2.5] {
            let p = EciParams::new(alpha, 5).unwrap();
            assert_eq!(eci(&[t(5, 5), t(5, 5)], &p).unwrap(), 1.0);
            assert_eq!(eci(&[t(0, 5), t(0, 5)], &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_item_value() {
        // 0.8^2.5 = 0.64 * sqrt(0.8)
        let v = eci(&[t(4, 5)], &EciParams::new(2.5, 5).unwrap()).unwrap();
        assert!((v - 0.64 * 0.8f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.57243).abs() < 1e-5);
    }

    #[test]
    fn decreasing_in_alpha() {
        let vals: Vec<f64> = [0.4, 0.65, 1.0, 1.5, 2.5]
            .iter()
            .map(|a| eci(&[t(4, 5)], &EciParams::new(*a, 5).unwrap()).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[0] > w[1]), "{vals:?}");
    }

    #[test]
    fn alpha_one_is_mean_ratio() {
        let tallies = [t(1, 4), t(3, 4), t(4, 4)];
        let v = eci(&tallies, &EciParams::new(1.0, 4).unwrap()).unwrap();
        assert!((v - (0.25 + 0.75 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let p = EciParams::default();
        assert!(eci(&[], &p).is_err());
        assert!(eci(&[t(1, 4)], &p).is_err());
        assert!(EciParams::new(0.0, 5).is_err());
        assert!(EciParams::new(1.0, 0).is_err());
        assert!(ItemTally::new(6, 5).is_err());
    }

    #[test]
    fn identical_paths_score_one() {
        let recs: Vec<_> = (0..5).map(|_| record("p", &["command", "create"])).collect();
        let tallies = tally_decomposition(&recs, None).unwrap();
        assert_eq!(tallies, vec![t(5, 5), t(5, 5)]);
        assert_eq!(eci(&tallies, &EciParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn modal_tally_one_level() {
        let mut recs: Vec<_> = (0..4).map(|_| record("p", &["query"])).collect();
        recs.push(record("p", &["command"]));
        let tallies = tally_decomposition(&recs, None).unwrap();
        assert_eq!(tallies, vec![t(4, 5)]);
        let v = eci(&tallies, &EciParams::new(2.5, 5).unwrap()).unwrap();
        assert!((v - 0.8f64.powf(2.5)).abs() < 1e-15);
    }

    #[test]
    fn missing_padding() {
        let mut recs: Vec<_> = (0..3).map(|_| record("p", &["command", "create"])).collect();
        recs.extend((0..2).map(|_| record("p", &["command"])));
        assert_eq!(tally_decomposition(&recs, None).unwrap(), vec![t(5, 5), t(3, 5)]);
    }

    #[test]
    fn modal_ties_go_to_smallest_category() {
        let recs = vec![record("p", &["query"]), record("p", &["command"])];
        // command < query, so command is modal and each tallies 1 of 2.
        assert_eq!(tally_decomposition(&recs, None).unwrap(), vec![t(1, 2)]);
        // A missing level loses ties.
        let recs = vec![record("p", &["a", "x"]), record("p", &["a"])];
        assert_eq!(tally_decomposition(&recs, None).unwrap(), vec![t(2, 2), t(1, 2)]);
    }

    #[test]
    fn gold_tally() {
        let recs = vec![record("p", &["command", "create"]), record("p", &["command"]), record("p", &["query"])];
        let gold = [cid("command"), cid("create")];
        assert_eq!(tally_decomposition(&recs, Some(&gold)).unwrap(), vec![t(2, 3), t(1, 3)]);
        let deeper = [cid("query")];
        let recs = vec![record("p", &["query"])];
        assert_eq!(tally_decomposition(&recs, Some(&deeper)).unwrap(), vec![t(1, 1)]);
        assert!((path_accuracy(&[record("p", &["query"]), record("p", &["command"])], &deeper).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixed_inputs_rejected() {
        assert!(tally_decomposition(&[record("a", &["x"]), record("b", &["x"])], None).is_err());
        assert!(tally_decomposition(&[], None).is_err());
    }

    #[test]
    fn filtering_tallies() {
        let same: Vec<_> = (0..5).map(|_| kept(&[0, 3, 4])).collect();
        let tallies = tally_filtering(&same, 10).unwrap();
        assert_eq!(eci(&tallies, &EciParams::default()).unwrap(), 1.0);

        let mut one_off = same.clone();
        one_off[2] = kept(&[0, 3, 4, 7]);
        let tallies = tally_filtering(&one_off, 10).unwrap();
        assert_eq!(tallies[7], t(4, 5));
        assert_eq!(tallies.iter().filter(|x| **x == t(5, 5)).count(), 9);
        let alpha = 2.5;
        let expected = (9.0 + 0.8f64.powf(alpha)) / 10.0;
        assert!((eci(&tallies, &EciParams::new(alpha, 5).unwrap()).unwrap() - expected).abs() < 1e-15);

        let alternating = vec![kept(&[0]), kept(&[]), kept(&[0]), kept(&[])];
        assert_eq!(tally_filtering(&alternating, 1).unwrap(), vec![t(2, 4)]);
        assert!(tally_filtering(&[kept(&[3])], 2).is_err());
    }

    #[test]
    fn accuracy() {
        let gold = [0, 1, 4, 5];
        assert_eq!(filtering_accuracy(&kept(&gold), Some(&gold), 10).unwrap(), 1.0);
        assert_eq!(filtering_accuracy(&kept(&[2, 3, 6, 7, 8, 9]), Some(&gold), 10).unwrap(), 0.0);
        assert!((filtering_accuracy(&kept(&[0, 1, 2, 4]), Some(&gold), 10).unwrap() - 0.8).abs() < 1e-15);
        assert!(filtering_accuracy(&kept(&[]), None, 10).is_err());
    }
}
