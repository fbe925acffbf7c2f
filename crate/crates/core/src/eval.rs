//! Captioning and grounding metrics: corpus BLEU, class-averaged F1 over
//! generation + localization, localization accuracy over correctly generated
//! words, and the five-way error taxonomy (missing class, hallucinated class,
//! correct / partial / other grounding).

use crate::data::Sample;
use crate::geometry::BBox;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

/// Localization threshold: a grounding is correct when IoU exceeds this.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyEvaluation,
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    NgramOrderOutOfRange(usize),
    CandidateReferenceCountMismatch {
        candidates: usize,
        references: usize,
    },
    EmptyUniverse,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyEvaluation => write!(f, "empty evaluation set"),
            EvalError::IdMismatch { missing, extra } => write!(
                f,
                "prediction/sample id mismatch: missing {missing:?}, extra {extra:?}"
            ),
            EvalError::NgramOrderOutOfRange(n) => {
                write!(f, "BLEU order {n} outside 1..=4")
            }
            EvalError::CandidateReferenceCountMismatch {
                candidates,
                references,
            } => write!(f, "{candidates} candidates but {references} reference sets"),
            EvalError::EmptyUniverse => write!(f, "taxonomy universe is empty"),
        }
    }
}

impl std::error::Error for EvalError {}

/// A generated caption for one sample with its per-noun grounding boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub tokens: Vec<String>,
    pub groundings: Vec<PredGrounding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredGrounding {
    pub pos: usize,
    pub token: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Ground truth for one sample: the noun classes its references mention and
/// their aligned boxes.
#[derive(Debug, Clone)]
pub struct GroundTruthSample {
    pub id: String,
    pub classes: BTreeSet<String>,
    pub boxes: BTreeMap<String, Vec<BBox>>,
    pub refs: Vec<Vec<String>>,
}

/// Extracts evaluation ground truth from dataset samples.
pub fn ground_truth(samples: &[Sample], vocab: &Vocabulary) -> Vec<GroundTruthSample> {
    samples
        .iter()
        .map(|s| {
            let mut classes = BTreeSet::new();
            let mut boxes: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
            for r in &s.refs {
                for t in &r.tokens {
                    if vocab.is_noun_token(t) {
                        classes.insert(t.clone());
                    }
                }
                for a in &r.alignments {
                    let class = r.tokens[a.pos].clone();
                    boxes.entry(class).or_default().push(a.bbox);
                }
            }
            GroundTruthSample {
                id: s.id.clone(),
                classes,
                boxes,
                refs: s.refs.iter().map(|r| r.tokens.clone()).collect(),
            }
        })
        .collect()
}

/// Per-class tallies: true positives, asserted (generated) count, and
/// ground-truth-positive count, all at the sample level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: usize,
    pub asserted: usize,
    pub gt_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1AllReport {
    pub value: f64,
    pub per_class: BTreeMap<String, ClassStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1LocReport {
    pub value: f64,
    /// False when no word was both generated and ground-truth-positive.
    pub defined: bool,
}

fn pair_by_id<'a>(
    predictions: &'a [Prediction],
    gts: &'a [GroundTruthSample],
) -> Result<Vec<(&'a Prediction, &'a GroundTruthSample)>, EvalError> {
    if predictions.is_empty() || gts.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(gts.len());
    for gt in gts {
        match by_id.get(gt.id.as_str()) {
            Some(p) => pairs.push((*p, gt)),
            None => missing.push(gt.id.clone()),
        }
    }
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.id.as_str()).collect();
    let extra: Vec<String> = predictions
        .iter()
        .filter(|p| !gt_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(EvalError::IdMismatch { missing, extra });
    }
    Ok(pairs)
}

/// First grounding per class in caption order; repeated occurrences of a
/// class word are not rescored.
fn first_groundings(pred: &Prediction) -> Vec<(&str, BBox)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut sorted: Vec<&PredGrounding> = pred.groundings.iter().collect();
    sorted.sort_by_key(|g| g.pos);
    for g in sorted {
        if seen.insert(g.token.as_str()) {
            out.push((g.token.as_str(), g.bbox));
        }
    }
    out
}

fn max_iou(bbox: &BBox, gt_boxes: Option<&Vec<BBox>>) -> f64 {
    gt_boxes
        .map(|bs| bs.iter().map(|b| bbox.iou(b)).fold(0.0, f64::max))
        .unwrap_or(0.0)
}

fn collect_class_stats(
    pairs: &[(&Prediction, &GroundTruthSample)],
) -> BTreeMap<String, ClassStats> {
    let mut stats: BTreeMap<String, ClassStats> = BTreeMap::new();
    for (pred, gt) in pairs {
        for class in &gt.classes {
            stats.entry(class.clone()).or_default().gt_positive += 1;
        }
        for (class, bbox) in first_groundings(pred) {
            let entry = stats.entry(class.to_string()).or_default();
            entry.asserted += 1;
            if gt.classes.contains(class) && max_iou(&bbox, gt.boxes.get(class)) > IOU_THRESHOLD {
                entry.tp += 1;
            }
        }
    }
    stats
}

/// Class-averaged F1 where a prediction counts only if the word is generated,
/// ground-truth-positive, and localized with IoU above 0.5.
pub fn f1_all(
    predictions: &[Prediction],
    gts: &[GroundTruthSample],
) -> Result<F1AllReport, EvalError> {
    let pairs = pair_by_id(predictions, gts)?;
    let stats = collect_class_stats(&pairs);
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in stats.values() {
        if s.asserted == 0 && s.gt_positive == 0 {
            continue;
        }
        let precision = if s.asserted > 0 {
            s.tp as f64 / s.asserted as f64
        } else {
            0.0
        };
        let recall = if s.gt_positive > 0 {
            s.tp as f64 / s.gt_positive as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sum += f1;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok(F1AllReport {
        value: sum / n as f64,
        per_class: stats,
    })
}

/// Localization accuracy over correctly generated words: per class the
/// fraction of (sample, class) pairs, generated and ground-truth-positive,
/// whose box clears the IoU threshold; averaged over classes with pairs.
pub fn f1_loc(
    predictions: &[Prediction],
    gts: &[GroundTruthSample],
) -> Result<F1LocReport, EvalError> {
    let pairs = pair_by_id(predictions, gts)?;
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new(); // (localized, total)
    for (pred, gt) in &pairs {
        for (class, bbox) in first_groundings(pred) {
            if !gt.classes.contains(class) {
                continue;
            }
            let entry = per_class.entry(class.to_string()).or_default();
            entry.1 += 1;
            if max_iou(&bbox, gt.boxes.get(class)) > IOU_THRESHOLD {
                entry.0 += 1;
            }
        }
    }
    if per_class.is_empty() {
        return Ok(F1LocReport {
            value: 0.0,
            defined: false,
        });
    }
    let mut sum = 0.0;
    for (localized, total) in per_class.values() {
        sum += *localized as f64 / *total as f64;
    }
    Ok(F1LocReport {
        value: sum / per_class.len() as f64,
        defined: true,
    })
}

/// Five-way partition of predictions and missed references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub mis_cls: usize,
    pub hallu_cls: usize,
    pub corr_grd: usize,
    pub part_grd: usize,
    pub other_err: usize,
    pub universe: usize,
    pub ratios: TaxonomyRatios,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRatios {
    pub mis_cls: f64,
    pub hallu_cls: f64,
    pub corr_grd: f64,
    pub part_grd: f64,
    pub other_err: f64,
}

impl TaxonomyReport {
    pub fn ratio_sum(&self) -> f64 {
        self.ratios.mis_cls
            + self.ratios.hallu_cls
            + self.ratios.corr_grd
            + self.ratios.part_grd
            + self.ratios.other_err
    }
}

/// Classifies every element of the universe (missed reference classes plus
/// predicted noun tokens) into exactly one of the five categories.
pub fn error_taxonomy(
    predictions: &[Prediction],
    gts: &[GroundTruthSample],
) -> Result<TaxonomyReport, EvalError> {
    let pairs = pair_by_id(predictions, gts)?;
    let (mut mis, mut hallu, mut corr, mut part, mut other) = (0usize, 0, 0, 0, 0);
    for (pred, gt) in &pairs {
        let firsts = first_groundings(pred);
        let predicted: BTreeSet<&str> = firsts.iter().map(|(c, _)| *c).collect();
        mis += gt
            .classes
            .iter()
            .filter(|c| !predicted.contains(c.as_str()))
            .count();
        for (class, bbox) in firsts {
            if !gt.classes.contains(class) {
                hallu += 1;
                continue;
            }
            let gt_boxes = gt.boxes.get(class);
            let iou = max_iou(&bbox, gt_boxes);
            if iou > IOU_THRESHOLD {
                corr += 1;
            } else {
                let contained = gt_boxes
                    .map(|bs| bs.iter().any(|b| b.contains(&bbox)))
                    .unwrap_or(false);
                if contained && iou < IOU_THRESHOLD {
                    part += 1;
                } else {
                    other += 1;
                }
            }
        }
    }
    let universe = mis + hallu + corr + part + other;
    if universe == 0 {
        return Err(EvalError::EmptyUniverse);
    }
    let u = universe as f64;
    Ok(TaxonomyReport {
        mis_cls: mis,
        hallu_cls: hallu,
        corr_grd: corr,
        part_grd: part,
        other_err: other,
        universe,
        ratios: TaxonomyRatios {
            mis_cls: mis as f64 / u,
            hallu_cls: hallu as f64 / u,
            corr_grd: corr as f64 / u,
            part_grd: part as f64 / u,
            other_err: other as f64 / u,
        },
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with modified (per-reference clipped) n-gram precision,
/// geometric mean over orders 1..=n, and the brevity penalty against the
/// closest reference length (ties toward the shorter reference). Orders with
/// no candidate n-grams at all are skipped (effective order), so a candidate
/// identical to its reference scores 1.0 at any n.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64, EvalError> {
    if !(1..=4).contains(&n) {
        return Err(EvalError::NgramOrderOutOfRange(n));
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CandidateReferenceCountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // Closest reference length; ties break toward the shorter one.
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - cand.len() as i64).abs();
                (diff, l)
            })
            .unwrap_or(0);
        ref_len += closest;
        for order in 1..=n {
            let cand_counts = ngram_counts(cand, order);
            total[order - 1] += cand.len().saturating_sub(order - 1);
            for (gram, &count) in &cand_counts {
                let max_ref = refs
                    .iter()
                    .map(|r| ngram_counts(r, order).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[order - 1] += count.min(max_ref);
            }
        }
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for order in 0..n {
        if total[order] == 0 {
            continue;
        }
        if matched[order] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[order] as f64 / total[order] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let geo = (log_sum / orders as f64).exp();
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * geo)
}

/// Full evaluation output: captioning block, grounding block, taxonomy block,
/// and per-configuration ablation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub captioning: CaptioningBlock,
    pub grounding: GroundingBlock,
    pub taxonomy: TaxonomyReport,
    pub ablation: Vec<AblationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptioningBlock {
    pub bleu1: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingBlock {
    pub f1_all: f64,
    pub f1_loc: f64,
    pub f1_loc_defined: bool,
    pub per_class: BTreeMap<String, ClassStats>,
}

/// One ablation table row: branch count and elimination setting with the
/// headline captioning and grounding scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub elimination: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub f1_all: f64,
    pub f1_loc: f64,
    pub part_grd_ratio: f64,
}

/// Assembles the machine-readable report from computed metrics.
pub fn emit_report(
    bleu1: f64,
    bleu4: f64,
    f1_all: F1AllReport,
    f1_loc: F1LocReport,
    taxonomy: TaxonomyReport,
    ablation: Vec<AblationRow>,
) -> EvalReport {
    EvalReport {
        captioning: CaptioningBlock { bleu1, bleu4 },
        grounding: GroundingBlock {
            f1_all: f1_all.value,
            f1_loc: f1_loc.value,
            f1_loc_defined: f1_loc.defined,
            per_class: f1_all.per_class,
        },
        taxonomy,
        ablation,
    }
}

/// Runs every metric over a prediction set and its samples.
pub fn evaluate(
    predictions: &[Prediction],
    samples: &[Sample],
    vocab: &Vocabulary,
) -> Result<EvalReport, EvalError> {
    let gts = ground_truth(samples, vocab);
    let candidates: Vec<Vec<String>> = predictions.iter().map(|p| p.tokens.clone()).collect();
    // References aligned with prediction order.
    let by_id: HashMap<&str, &GroundTruthSample> = gts.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut references = Vec::with_capacity(predictions.len());
    for p in predictions {
        match by_id.get(p.id.as_str()) {
            Some(gt) => references.push(gt.refs.clone()),
            None => {
                return Err(EvalError::IdMismatch {
                    missing: vec![],
                    extra: vec![p.id.clone()],
                })
            }
        }
    }
    let bleu1 = bleu(&candidates, &references, 1)?;
    let bleu4 = bleu(&candidates, &references, 4)?;
    let all = f1_all(predictions, &gts)?;
    let loc = f1_loc(predictions, &gts)?;
    let taxonomy = error_taxonomy(predictions, &gts)?;
    Ok(emit_report(bleu1, bleu4, all, loc, taxonomy, vec![]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn words(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn gt_sample(id: &str, classes: &[(&str, BBox)], refs: &[&[&str]]) -> GroundTruthSample {
        let mut set = BTreeSet::new();
        let mut boxes: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
        for (c, b) in classes {
            set.insert(c.to_string());
            boxes.entry(c.to_string()).or_default().push(*b);
        }
        GroundTruthSample {
            id: id.to_string(),
            classes: set,
            boxes,
            refs: refs.iter().map(|r| words(r)).collect(),
        }
    }

    fn pred(id: &str, tokens: &[&str], groundings: &[(usize, &str, BBox)]) -> Prediction {
        Prediction {
            id: id.to_string(),
            tokens: words(tokens),
            groundings: groundings
                .iter()
                .map(|(pos, token, bbox)| PredGrounding {
                    pos: *pos,
                    token: token.to_string(),
                    bbox: *bbox,
                })
                .collect(),
        }
    }

    #[test]
    fn f1_all_single_correct_sample_is_one() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let pred_box = bx(0.0, 0.0, 10.0, 8.0); // IoU 0.8
        assert!(pred_box.iou(&gt_box) > 0.5);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["a", "circle"]])];
        let preds = vec![pred("a", &["a", "circle"], &[(1, "circle", pred_box)])];
        let r = f1_all(&preds, &gts).unwrap();
        assert_eq!(r.value, 1.0);
        let cs = r.per_class.get("circle").unwrap();
        assert_eq!((cs.tp, cs.asserted, cs.gt_positive), (1, 1, 1));
    }

    #[test]
    fn f1_all_never_generated_class_scores_zero() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["a", "circle"]])];
        let preds = vec![pred("a", &["a", "square"], &[(1, "square", gt_box)])];
        let r = f1_all(&preds, &gts).unwrap();
        // circle: recall 0; square: hallucinated, precision 0. Mean is 0.
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn f1_all_perfect_predictions_are_one() {
        let b1 = bx(0.0, 0.0, 10.0, 10.0);
        let b2 = bx(20.0, 20.0, 30.0, 30.0);
        let gts = vec![
            gt_sample("a", &[("circle", b1)], &[&["a", "circle"]]),
            gt_sample("b", &[("square", b2)], &[&["a", "square"]]),
        ];
        let preds = vec![
            pred("a", &["a", "circle"], &[(1, "circle", b1)]),
            pred("b", &["a", "square"], &[(1, "square", b2)]),
        ];
        assert_eq!(f1_all(&preds, &gts).unwrap().value, 1.0);
    }

    #[test]
    fn f1_loc_definition_cases() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let good = bx(0.0, 0.0, 10.0, 9.0);
        let bad = bx(0.0, 0.0, 3.0, 3.0);
        let gts = vec![
            gt_sample("a", &[("circle", gt_box)], &[&["a", "circle"]]),
            gt_sample("b", &[("circle", gt_box)], &[&["a", "circle"]]),
        ];
        // Two correct words, one localized: 0.5.
        let preds = vec![
            pred("a", &["a", "circle"], &[(1, "circle", good)]),
            pred("b", &["a", "circle"], &[(1, "circle", bad)]),
        ];
        let r = f1_loc(&preds, &gts).unwrap();
        assert!(r.defined);
        assert_eq!(r.value, 0.5);
        // All localized.
        let preds = vec![
            pred("a", &["circle"], &[(0, "circle", good)]),
            pred("b", &["circle"], &[(0, "circle", good)]),
        ];
        assert_eq!(f1_loc(&preds, &gts).unwrap().value, 1.0);
        // None localized.
        let preds = vec![
            pred("a", &["circle"], &[(0, "circle", bad)]),
            pred("b", &["circle"], &[(0, "circle", bad)]),
        ];
        assert_eq!(f1_loc(&preds, &gts).unwrap().value, 0.0);
        // No correctly generated words: undefined, reported as 0 + flag.
        let preds = vec![
            pred("a", &["square"], &[(0, "square", good)]),
            pred("b", &["square"], &[(0, "square", good)]),
        ];
        let r = f1_loc(&preds, &gts).unwrap();
        assert!(!r.defined);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn taxonomy_perfect_is_all_correct() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["a", "circle"]])];
        let preds = vec![pred("a", &["a", "circle"], &[(1, "circle", gt_box)])];
        let t = error_taxonomy(&preds, &gts).unwrap();
        assert_eq!(
            (t.mis_cls, t.hallu_cls, t.corr_grd, t.part_grd, t.other_err),
            (0, 0, 1, 0, 0)
        );
        assert_eq!(t.ratios.corr_grd, 1.0);
        assert!((t.ratio_sum() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn taxonomy_contained_low_iou_is_partial() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let inside = bx(1.0, 1.0, 5.0, 5.0); // contained, IoU 0.16
        assert!(gt_box.contains(&inside));
        assert!(inside.iou(&gt_box) < 0.5);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["circle"]])];
        let preds = vec![pred("a", &["circle"], &[(0, "circle", inside)])];
        let t = error_taxonomy(&preds, &gts).unwrap();
        assert_eq!(t.part_grd, 1);
        assert_eq!(t.universe, 1);
    }

    #[test]
    fn taxonomy_partitions_mixed_predictions() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let outside = bx(40.0, 40.0, 60.0, 60.0);
        let gts = vec![gt_sample(
            "a",
            &[("circle", gt_box), ("square", gt_box)],
            &[&["circle", "square"]],
        )];
        // circle predicted at a deviated box (other err), square missed,
        // star hallucinated.
        let preds = vec![pred(
            "a",
            &["circle", "star"],
            &[(0, "circle", outside), (1, "star", outside)],
        )];
        let t = error_taxonomy(&preds, &gts).unwrap();
        assert_eq!(t.mis_cls, 1); // square
        assert_eq!(t.hallu_cls, 1); // star
        assert_eq!(t.other_err, 1); // circle
        assert_eq!(t.universe, 3);
        assert!((t.ratio_sum() - 1.0).abs() <= 1e-9);
        assert!(matches!(
            error_taxonomy(&[pred("a", &["a"], &[])], &[gt_sample("a", &[], &[&["a"]])]),
            Err(EvalError::EmptyUniverse)
        ));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let cand = vec![words(&["a", "big", "circle"])];
        let refs = vec![vec![words(&["a", "big", "circle"])]];
        for n in 1..=4 {
            assert!((bleu(&cand, &refs, n).unwrap() - 1.0).abs() < 1e-12);
        }
        let disjoint = vec![vec![words(&["there", "is", "nothing"])]];
        assert_eq!(bleu(&cand, &disjoint, 1).unwrap(), 0.0);
        assert_eq!(bleu(&cand, &disjoint, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_two_thirds_precision_fixture() {
        // Candidate "a b c" vs reference "a b d": unigram precision 2/3,
        // BP = 1 at equal lengths.
        let cand = vec![words(&["a", "b", "c"])];
        let refs = vec![vec![words(&["a", "b", "d"])]];
        let b1 = bleu(&cand, &refs, 1).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-9, "b1 = {b1}");
        // Trigram precision is 0, so the order-4 score collapses to 0.
        assert_eq!(bleu(&cand, &refs, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clipping_fixture() {
        // Counts clip against the most generous reference.
        let cand = vec![words(&["a", "a", "b"])];
        let refs = vec![vec![words(&["a", "b"]), words(&["a", "a"])]];
        let b1 = bleu(&cand, &refs, 1).unwrap();
        assert!((b1 - 1.0).abs() < 1e-9, "b1 = {b1}");
        // Against only ["a", "b"]: "a" clips to 1 -> 2/3.
        let refs = vec![vec![words(&["a", "b"])]];
        let b1 = bleu(&cand, &refs, 1).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_fixture() {
        // Candidate shorter than the reference: BP = exp(1 - 3/2).
        let cand = vec![words(&["a", "b"])];
        let refs = vec![vec![words(&["a", "b", "c"])]];
        let b1 = bleu(&cand, &refs, 1).unwrap();
        let expect = (1.0_f64 - 1.5).exp();
        assert!((b1 - expect).abs() < 1e-9, "b1 = {b1}");
    }

    #[test]
    fn bleu_corpus_fixture_hand_computed() {
        // Two candidates, multi-reference; B@1 aggregated over the corpus:
        // matched 3/3 + 1/2 = 4/5, lengths 3+2 vs closest 3+2 -> BP 1.
        let cands = vec![words(&["a", "b", "c"]), words(&["d", "x"])];
        let refs = vec![
            vec![words(&["a", "b", "c"])],
            vec![words(&["d", "e"]), words(&["d"])],
        ];
        let b1 = bleu(&cands, &refs, 1).unwrap();
        assert!((b1 - 0.8).abs() < 1e-9, "b1 = {b1}");
        assert!(matches!(
            bleu(&cands, &refs, 5),
            Err(EvalError::NgramOrderOutOfRange(5))
        ));
        assert!(matches!(bleu(&[], &[], 1), Err(EvalError::EmptyEvaluation)));
    }

    #[test]
    fn bleu_proper_substring_scores_below_one() {
        let cand = vec![words(&["a", "b"])];
        let refs = vec![vec![words(&["a", "b", "c", "d"])]];
        assert!(bleu(&cand, &refs, 1).unwrap() < 1.0);
        let cand = vec![words(&["a", "b", "c", "d", "d"])];
        assert!(bleu(&cand, &refs, 1).unwrap() < 1.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["circle"]])];
        let preds = vec![pred("a", &["circle"], &[(0, "circle", gt_box)])];
        let all = f1_all(&preds, &gts).unwrap();
        let loc = f1_loc(&preds, &gts).unwrap();
        let tax = error_taxonomy(&preds, &gts).unwrap();
        let report = emit_report(1.0, 1.0, all, loc, tax, vec![]);
        assert!(report.ablation.is_empty());
        let s = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, report);
        // Ablation rows carry the table columns.
        let row = AblationRow {
            k: 4,
            elimination: "on".into(),
            bleu1: 0.5,
            bleu4: 0.1,
            f1_all: 0.3,
            f1_loc: 0.6,
            part_grd_ratio: 0.02,
        };
        let report2 = EvalReport {
            ablation: vec![row.clone()],
            ..report
        };
        let s2 = serde_json::to_string(&report2).unwrap();
        let back2: EvalReport = serde_json::from_str(&s2).unwrap();
        assert_eq!(back2.ablation, vec![row]);
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let gt_box = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![gt_sample("a", &[("circle", gt_box)], &[&["circle"]])];
        let preds = vec![pred("zzz", &["circle"], &[(0, "circle", gt_box)])];
        assert!(matches!(
            f1_all(&preds, &gts),
            Err(EvalError::IdMismatch { .. })
        ));
    }
}
