//! Prediction protocol and metrics.
//!
//! A prediction takes the nearest coarse and fine types plus the three
//! nearest ultra-fine types to the respective projections. Reports use
//! loose macro/micro F1 (per-instance averaged vs globally pooled
//! precision and recall) and strict accuracy; a neighbor-rank histogram
//! locates the gold types in the full distance ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use thiserror::Error;

use crate::embedding::{nearest_types, EmbedError, TypeEmbeddingTable};
use crate::encoder::{EncoderError, Vocabulary, WordEmbeddingTable};
use crate::geometry::GeometryError;
use crate::hierarchy::{AnnotatedInstance, Granularity, HierarchyError, TypeInventory};
use crate::projection::{forward, ForwardMode, ProjectionError, StackedProjector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no types of granularity {0} in the table")]
    EmptyGranularity(Granularity),
    #[error("prediction and gold lists have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("prediction has no ultra neighbors")]
    NoUltraNeighbors,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gold type {0} missing from the table")]
    GoldMissing(u32),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Nearest-neighbor decoding result for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instance: usize,
    pub predicted: BTreeSet<u32>,
    pub coarse_ranked: Vec<(u32, f64)>,
    pub fine_ranked: Vec<(u32, f64)>,
    pub ultra_ranked: Vec<(u32, f64)>,
}

impl Prediction {
    /// Predicted ids restricted to one granularity.
    pub fn predicted_with(&self, inventory: &TypeInventory, g: Granularity) -> BTreeSet<u32> {
        self.predicted
            .iter()
            .copied()
            .filter(|&t| inventory.granularity_of(t) == Ok(g))
            .collect()
    }
}

/// Top-1 coarse + top-1 fine + top-3 ultra nearest neighbors of the three
/// projections.
pub fn predict(
    instance_id: usize,
    instance: &AnnotatedInstance,
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
) -> Result<Prediction, EvalError> {
    let triple = forward(instance, model, vocab, words, ForwardMode::Eval)?;
    let mut ranked = Vec::with_capacity(3);
    for (granularity, point, k) in [
        (Granularity::Coarse, &triple.coarse, 1usize),
        (Granularity::Fine, &triple.fine, 1),
        (Granularity::Ultra, &triple.ultra, 3),
    ] {
        let candidates = inventory.ids_with(granularity);
        if candidates.is_empty() {
            return Err(EvalError::EmptyGranularity(granularity));
        }
        let nn = nearest_types(table, point.coords(), Some(&candidates), k)?;
        ranked.push(nn.items);
    }
    let ultra_ranked = ranked.pop().unwrap();
    let fine_ranked = ranked.pop().unwrap();
    let coarse_ranked = ranked.pop().unwrap();
    let predicted: BTreeSet<u32> = coarse_ranked
        .iter()
        .chain(&fine_ranked)
        .chain(&ultra_ranked)
        .map(|&(id, _)| id)
        .collect();
    Ok(Prediction { instance: instance_id, predicted, coarse_ranked, fine_ranked, ultra_ranked })
}

/// Adds the coarse type nearest to the top-ranked ultra prediction's
/// embedding. A no-op when that type is already predicted.
pub fn augment_with_coarse(
    prediction: &Prediction,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
) -> Result<Prediction, EvalError> {
    let &(top_ultra, _) = prediction.ultra_ranked.first().ok_or(EvalError::NoUltraNeighbors)?;
    let coarse_ids = inventory.ids_with(Granularity::Coarse);
    if coarse_ids.is_empty() {
        return Err(EvalError::EmptyGranularity(Granularity::Coarse));
    }
    let anchor = table.vector(top_ultra)?;
    let nn = nearest_types(table, anchor, Some(&coarse_ids), 1)?;
    let mut augmented = prediction.clone();
    augmented.predicted.insert(nn.items[0].0);
    Ok(augmented)
}

/// Precision/recall/F1 triple; F1 is always the harmonic mean of the two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn check_aligned(preds: &[BTreeSet<u32>], golds: &[BTreeSet<u32>]) -> Result<(), EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch(preds.len(), golds.len()));
    }
    Ok(())
}

/// Loose macro: per-instance precision and recall, averaged. Instances
/// with an empty prediction set are excluded from the precision mean, and
/// instances with an empty gold set from the recall mean; an empty mean
/// reports 0.
pub fn loose_macro_f1(
    preds: &[BTreeSet<u32>],
    golds: &[BTreeSet<u32>],
) -> Result<Prf, EvalError> {
    check_aligned(preds, golds)?;
    let mut p_sum = 0.0;
    let mut p_count = 0usize;
    let mut r_sum = 0.0;
    let mut r_count = 0usize;
    for (pred, gold) in preds.iter().zip(golds) {
        let hit = pred.intersection(gold).count() as f64;
        if !pred.is_empty() {
            p_sum += hit / pred.len() as f64;
            p_count += 1;
        }
        if !gold.is_empty() {
            r_sum += hit / gold.len() as f64;
            r_count += 1;
        }
    }
    let precision = if p_count > 0 { p_sum / p_count as f64 } else { 0.0 };
    let recall = if r_count > 0 { r_sum / r_count as f64 } else { 0.0 };
    Ok(Prf::new(precision, recall))
}

/// Loose micro: intersection, prediction and gold counts pooled over all
/// instances before the ratio.
pub fn loose_micro_f1(
    preds: &[BTreeSet<u32>],
    golds: &[BTreeSet<u32>],
) -> Result<Prf, EvalError> {
    check_aligned(preds, golds)?;
    let mut hit = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    for (pred, gold) in preds.iter().zip(golds) {
        hit += pred.intersection(gold).count();
        pred_total += pred.len();
        gold_total += gold.len();
    }
    let precision = if pred_total > 0 { hit as f64 / pred_total as f64 } else { 0.0 };
    let recall = if gold_total > 0 { hit as f64 / gold_total as f64 } else { 0.0 };
    Ok(Prf::new(precision, recall))
}

/// Fraction of instances whose prediction equals the gold set exactly.
pub fn strict_accuracy(
    preds: &[BTreeSet<u32>],
    golds: &[BTreeSet<u32>],
) -> Result<f64, EvalError> {
    check_aligned(preds, golds)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let exact = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(exact as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GranularityMetrics {
    pub macro_: Prf,
    pub micro: Prf,
}

/// Full evaluation report over a prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub coarse: GranularityMetrics,
    pub fine: GranularityMetrics,
    pub ultra: GranularityMetrics,
    pub overall_macro: Prf,
    pub overall_micro: Prf,
    pub strict: f64,
}

impl MetricReport {
    pub fn granularity(&self, g: Granularity) -> &GranularityMetrics {
        match g {
            Granularity::Coarse => &self.coarse,
            Granularity::Fine => &self.fine,
            Granularity::Ultra => &self.ultra,
        }
    }
}

/// Computes per-granularity and overall metrics by filtering the union
/// prediction sets against the inventory's granularities.
pub fn metric_report(
    predictions: &[Prediction],
    instances: &[AnnotatedInstance],
    inventory: &TypeInventory,
) -> Result<MetricReport, EvalError> {
    if predictions.len() != instances.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), instances.len()));
    }
    let pred_sets: Vec<BTreeSet<u32>> =
        predictions.iter().map(|p| p.predicted.clone()).collect();
    let gold_sets: Vec<BTreeSet<u32>> =
        instances.iter().map(|i| i.gold_types().iter().copied().collect()).collect();

    let mut per_granularity = Vec::with_capacity(3);
    for g in Granularity::ALL {
        let p: Vec<BTreeSet<u32>> =
            predictions.iter().map(|pred| pred.predicted_with(inventory, g)).collect();
        let gold: Vec<BTreeSet<u32>> = instances
            .iter()
            .map(|i| i.gold_with(inventory, g).into_iter().collect())
            .collect();
        per_granularity.push(GranularityMetrics {
            macro_: loose_macro_f1(&p, &gold)?,
            micro: loose_micro_f1(&p, &gold)?,
        });
    }
    let ultra = per_granularity.pop().unwrap();
    let fine = per_granularity.pop().unwrap();
    let coarse = per_granularity.pop().unwrap();
    Ok(MetricReport {
        coarse,
        fine,
        ultra,
        overall_macro: loose_macro_f1(&pred_sets, &gold_sets)?,
        overall_micro: loose_micro_f1(&pred_sets, &gold_sets)?,
        strict: strict_accuracy(&pred_sets, &gold_sets)?,
    })
}

/// Whether gold ranks are computed within the gold type's granularity
/// population or against the full inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankScope {
    WithinGranularity,
    FullInventory,
}

impl std::str::FromStr for RankScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "within" => Ok(RankScope::WithinGranularity),
            "full" => Ok(RankScope::FullInventory),
            other => Err(format!("unknown rank scope '{other}' (expected within|full)")),
        }
    }
}

/// For every instance and every gold type of `granularity`, the 1-based
/// rank of that type in the distance-sorted neighbor list of the matching
/// projection; aggregated as rank -> count.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_rank_histogram(
    dataset: &[AnnotatedInstance],
    model: &StackedProjector,
    vocab: &Vocabulary,
    words: &WordEmbeddingTable,
    table: &TypeEmbeddingTable,
    inventory: &TypeInventory,
    granularity: Granularity,
    scope: RankScope,
) -> Result<BTreeMap<usize, usize>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let candidates = match scope {
        RankScope::WithinGranularity => inventory.ids_with(granularity),
        RankScope::FullInventory => (0..inventory.len()).collect(),
    };
    if candidates.is_empty() {
        return Err(EvalError::EmptyGranularity(granularity));
    }
    let mut histogram = BTreeMap::new();
    for instance in dataset {
        let golds = instance.gold_with(inventory, granularity);
        if golds.is_empty() {
            continue;
        }
        let triple = forward(instance, model, vocab, words, ForwardMode::Eval)?;
        let point = match granularity {
            Granularity::Coarse => &triple.coarse,
            Granularity::Fine => &triple.fine,
            Granularity::Ultra => &triple.ultra,
        };
        let nn = nearest_types(table, point.coords(), Some(&candidates), candidates.len())?;
        for gold in golds {
            if gold >= table.len() {
                return Err(EvalError::GoldMissing(gold));
            }
            let rank = nn
                .items
                .iter()
                .position(|&(id, _)| id == gold)
                .map(|i| i + 1)
                .ok_or(EvalError::GoldMissing(gold))?;
            *histogram.entry(rank).or_insert(0) += 1;
        }
    }
    Ok(histogram)
}

/// Key-value text serialization of a report.
pub fn write_metric_report<W: Write>(report: &MetricReport, mut w: W) -> std::io::Result<()> {
    let mut kv = |k: String, v: f64| writeln!(w, "{k} {v:.6}");
    for (name, m) in
        [("coarse", &report.coarse), ("fine", &report.fine), ("ultra", &report.ultra)]
    {
        kv(format!("{name}.macro.precision"), m.macro_.precision)?;
        kv(format!("{name}.macro.recall"), m.macro_.recall)?;
        kv(format!("{name}.macro.f1"), m.macro_.f1)?;
        kv(format!("{name}.micro.precision"), m.micro.precision)?;
        kv(format!("{name}.micro.recall"), m.micro.recall)?;
        kv(format!("{name}.micro.f1"), m.micro.f1)?;
    }
    kv("overall.macro.precision".into(), report.overall_macro.precision)?;
    kv("overall.macro.recall".into(), report.overall_macro.recall)?;
    kv("overall.macro.f1".into(), report.overall_macro.f1)?;
    kv("overall.micro.precision".into(), report.overall_micro.precision)?;
    kv("overall.micro.recall".into(), report.overall_micro.recall)?;
    kv("overall.micro.f1".into(), report.overall_micro.f1)?;
    kv("strict.accuracy".into(), report.strict)?;
    Ok(())
}

/// Two-column "rank count" text suitable for external plotting.
pub fn write_histogram<W: Write>(
    histogram: &BTreeMap<usize, usize>,
    mut w: W,
) -> std::io::Result<()> {
    for (rank, count) in histogram {
        writeln!(w, "{rank} {count}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&[u32]]) -> Vec<BTreeSet<u32>> {
        items.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn macro_exact_match_is_perfect() {
        let p = sets(&[&[0, 1], &[2]]);
        let g = sets(&[&[0, 1], &[2]]);
        let m = loose_macro_f1(&p, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn macro_worked_example() {
        // pred {a,b} vs gold {a}: P=0.5, R=1.0, F1=2/3
        let p = sets(&[&[0, 1]]);
        let g = sets(&[&[0]]);
        let m = loose_macro_f1(&p, &g).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_disjoint_is_zero() {
        let p = sets(&[&[0], &[1]]);
        let g = sets(&[&[2], &[3]]);
        let m = loose_macro_f1(&p, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn micro_worked_example() {
        // overlaps 1 and 0, pred sizes 2,2, gold sizes 1,1:
        // P = 1/4, R = 1/2, F1 = 1/3
        let p = sets(&[&[0, 1], &[2, 3]]);
        let g = sets(&[&[0], &[4]]);
        let m = loose_micro_f1(&p, &g).unwrap();
        assert_eq!(m.precision, 0.25);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn micro_equals_macro_on_symmetric_fixture() {
        // Same sizes and overlap everywhere.
        let p = sets(&[&[0, 1], &[2, 3]]);
        let g = sets(&[&[0, 9], &[2, 8]]);
        let ma = loose_macro_f1(&p, &g).unwrap();
        let mi = loose_micro_f1(&p, &g).unwrap();
        assert!((ma.precision - mi.precision).abs() < 1e-15);
        assert!((ma.recall - mi.recall).abs() < 1e-15);
        assert!((ma.f1 - mi.f1).abs() < 1e-15);
    }

    #[test]
    fn empty_predictions_report_zero() {
        let p = sets(&[&[], &[]]);
        let g = sets(&[&[0], &[1]]);
        let ma = loose_macro_f1(&p, &g).unwrap();
        assert_eq!((ma.precision, ma.recall), (0.0, 0.0));
        let mi = loose_micro_f1(&p, &g).unwrap();
        assert_eq!((mi.precision, mi.recall), (0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = sets(&[&[0]]);
        let g = sets(&[&[0], &[1]]);
        assert!(matches!(loose_macro_f1(&p, &g), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn strict_accuracy_counts_exact_matches() {
        let p = sets(&[&[0], &[1], &[2], &[3, 4]]);
        let g = sets(&[&[0], &[9], &[8], &[3]]);
        assert_eq!(strict_accuracy(&p, &g).unwrap(), 0.25);
        assert_eq!(strict_accuracy(&p, &p.clone()).unwrap(), 1.0);
        let none = sets(&[&[5]]);
        let other = sets(&[&[6]]);
        assert_eq!(strict_accuracy(&none, &other).unwrap(), 0.0);
    }

    #[test]
    fn metrics_invariant_under_instance_reordering() {
        let p = sets(&[&[0, 1], &[2], &[3, 4, 5]]);
        let g = sets(&[&[0], &[2, 6], &[4]]);
        let ma = loose_macro_f1(&p, &g).unwrap();
        let mi = loose_micro_f1(&p, &g).unwrap();
        let sa = strict_accuracy(&p, &g).unwrap();
        let perm = [2usize, 0, 1];
        let p2: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        let g2: Vec<_> = perm.iter().map(|&i| g[i].clone()).collect();
        assert_eq!(loose_macro_f1(&p2, &g2).unwrap(), ma);
        assert_eq!(loose_micro_f1(&p2, &g2).unwrap(), mi);
        assert_eq!(strict_accuracy(&p2, &g2).unwrap(), sa);
    }

    #[test]
    fn report_writer_is_stable() {
        let prf = Prf::new(0.5, 0.25);
        let gm = GranularityMetrics { macro_: prf, micro: prf };
        let report = MetricReport {
            coarse: gm,
            fine: gm,
            ultra: gm,
            overall_macro: prf,
            overall_micro: prf,
            strict: 0.125,
        };
        let mut buf = Vec::new();
        write_metric_report(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("coarse.macro.precision 0.500000"));
        assert!(text.contains("strict.accuracy 0.125000"));
        // 6 lines per granularity + 6 overall + strict
        assert_eq!(text.lines().count(), 25);
    }

    #[test]
    fn histogram_writer_format() {
        let mut h = BTreeMap::new();
        h.insert(1, 10);
        h.insert(3, 2);
        let mut buf = Vec::new();
        write_histogram(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 10\n3 2\n");
    }
}
