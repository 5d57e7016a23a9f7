//! Keypoint localisation (PCK) and visibility precision/recall.

use crate::data::{from_heatmap_coord, Sample};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::train::{sigmoid, Model};

/// One decoded keypoint: argmax location in image pixels and `σ(max logit)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointEstimate {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl KeypointEstimate {
    pub fn visible(&self, threshold: f64) -> bool {
        self.confidence >= threshold
    }
}

/// Per-channel argmax of `logits` (ties to the lowest index), mapped from
/// heatmap to image coordinates for an `image = (h, w)` frame.
pub fn decode_heatmaps(logits: &Tensor, image: (usize, usize)) -> Vec<KeypointEstimate> {
    let (h, w) = (logits.height(), logits.width());
    (0..logits.channels())
        .map(|c| {
            let plane = logits.channel(c);
            let mut best = 0;
            for (n, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = n;
                }
            }
            KeypointEstimate {
                x: from_heatmap_coord((best % w) as f64, image.1, w),
                y: from_heatmap_coord((best / w) as f64, image.0, h),
                confidence: sigmoid(plane[best]),
            }
        })
        .collect()
}

/// Runs `model` with `k` passes and every scale on `image`.
pub fn predict(model: &Model, image: &Tensor, k: usize) -> Result<(Tensor, Vec<KeypointEstimate>)> {
    let logits = model.forward(image, k, model.heads.num_scales())?;
    let est = decode_heatmaps(&logits, (image.height(), image.width()));
    Ok((logits, est))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PckCount {
    pub correct: usize,
    pub total: usize,
}

impl PckCount {
    /// `None` when no visible keypoint was scored.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

fn check_lengths(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<(f64, f64)>],
    visible: &[Vec<bool>],
) -> Result<()> {
    if preds.len() != gts.len() || gts.len() != visible.len() {
        return shape_err(format!(
            "{} predictions, {} ground truths, {} visibility lists",
            preds.len(),
            gts.len(),
            visible.len()
        ));
    }
    for (n, ((p, g), v)) in preds.iter().zip(gts).zip(visible).enumerate() {
        if p.len() != g.len() || g.len() != v.len() {
            return shape_err(format!("instance {n}: keypoint counts differ"));
        }
    }
    Ok(())
}

fn hit(p: (f64, f64), g: (f64, f64), radius: f64) -> bool {
    ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= radius
}

/// Counts visible keypoints localised within `alpha · ref_size`.
pub fn eval_pck(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<(f64, f64)>],
    visible: &[Vec<bool>],
    alpha: f64,
    ref_size: f64,
) -> Result<PckCount> {
    check_lengths(preds, gts, visible)?;
    let radius = alpha * ref_size;
    let mut c = PckCount {
        correct: 0,
        total: 0,
    };
    for ((p, g), v) in preds.iter().zip(gts).zip(visible) {
        for ((&pk, &gk), &vk) in p.iter().zip(g).zip(v) {
            if vk {
                c.total += 1;
                c.correct += usize::from(hit(pk, gk, radius));
            }
        }
    }
    Ok(c)
}

/// [`eval_pck`] per keypoint index.
pub fn eval_pck_per_keypoint(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<(f64, f64)>],
    visible: &[Vec<bool>],
    alpha: f64,
    ref_size: f64,
) -> Result<Vec<PckCount>> {
    check_lengths(preds, gts, visible)?;
    let m = gts.first().map_or(0, Vec::len);
    if gts.iter().any(|g| g.len() != m) {
        return shape_err("instances have different keypoint counts");
    }
    let mut out = vec![
        PckCount {
            correct: 0,
            total: 0
        };
        m
    ];
    for ((p, g), v) in preds.iter().zip(gts).zip(visible) {
        for (j, c) in out.iter_mut().enumerate() {
            if v[j] {
                c.total += 1;
                c.correct += usize::from(hit(p[j], g[j], alpha * ref_size));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// One point per distinct confidence, thresholds ascending.
    pub points: Vec<PrPoint>,
    pub recall_at_p80: f64,
}

fn pr_point(confidences: &[f64], labels: &[bool], threshold: f64, positives: usize) -> PrPoint {
    let (mut tp, mut fp) = (0, 0);
    for (&c, &l) in confidences.iter().zip(labels) {
        if c >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    PrPoint {
        threshold,
        precision: if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        recall: tp as f64 / positives as f64,
        true_positives: tp,
        false_positives: fp,
    }
}

fn check_pr(confidences: &[f64], labels: &[bool]) -> Result<usize> {
    if confidences.len() != labels.len() {
        return shape_err(format!(
            "{} confidences for {} labels",
            confidences.len(),
            labels.len()
        ));
    }
    if confidences.iter().any(|c| c.is_nan()) {
        return invalid("confidences contain NaN");
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return invalid("no positive labels: recall is undefined");
    }
    Ok(positives)
}

/// Precision and recall when predicting "visible" for confidence ≥ `threshold`.
/// Precision is taken as 1 when nothing is predicted visible.
pub fn precision_recall_at(
    confidences: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<PrPoint> {
    let positives = check_pr(confidences, labels)?;
    Ok(pr_point(confidences, labels, threshold, positives))
}

/// Sweeps every distinct confidence as a threshold. `recall_at_p80` is the
/// largest recall whose precision is at least 0.8 (0 if none).
pub fn eval_visibility_pr(confidences: &[f64], labels: &[bool]) -> Result<PrCurve> {
    let positives = check_pr(confidences, labels)?;
    let mut thresholds = confidences.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points: Vec<PrPoint> = thresholds
        .into_iter()
        .map(|t| pr_point(confidences, labels, t, positives))
        .collect();
    let recall_at_p80 = points
        .iter()
        .filter(|p| p.precision >= 0.8)
        .map(|p| p.recall)
        .fold(0.0, f64::max);
    Ok(PrCurve {
        points,
        recall_at_p80,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckAtAlpha {
    pub alpha: f64,
    pub per_keypoint: Vec<Option<f64>>,
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pck: Vec<PckAtAlpha>,
    /// `None` when every keypoint in the set is occluded or none is.
    pub pr_curve: Option<PrCurve>,
    pub recall_at_p80: Option<f64>,
    pub predictions: Vec<Vec<KeypointEstimate>>,
}

impl EvalReport {
    pub fn pck_at(&self, alpha: f64) -> Option<f64> {
        self.pck
            .iter()
            .find(|p| p.alpha == alpha)
            .and_then(|p| p.aggregate)
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        for p in &self.pck {
            write!(f, "pck@{} {}", p.alpha, pct(p.aggregate))?;
            for (j, v) in p.per_keypoint.iter().enumerate() {
                write!(f, " kp{j}={}", pct(*v))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "recall@p80 {}", pct(self.recall_at_p80))
    }
}

/// Scores `model` on `samples`. PCK uses the image side as reference size.
pub fn evaluate(model: &Model, samples: &[Sample], k: usize, alphas: &[f64]) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        predictions.push(predict(model, &s.image, k)?.1);
    }
    report_from_predictions(samples, predictions, alphas)
}

pub fn report_from_predictions(
    samples: &[Sample],
    predictions: Vec<Vec<KeypointEstimate>>,
    alphas: &[f64],
) -> Result<EvalReport> {
    let preds: Vec<Vec<(f64, f64)>> = predictions
        .iter()
        .map(|p| p.iter().map(|e| (e.x, e.y)).collect())
        .collect();
    let gts: Vec<Vec<(f64, f64)>> = samples.iter().map(|s| s.keypoints.clone()).collect();
    let vis: Vec<Vec<bool>> = samples.iter().map(|s| s.visible.clone()).collect();
    let ref_size = samples.first().map_or(1.0, |s| s.image.width() as f64);
    let mut pck = Vec::new();
    for &alpha in alphas {
        pck.push(PckAtAlpha {
            alpha,
            per_keypoint: eval_pck_per_keypoint(&preds, &gts, &vis, alpha, ref_size)?
                .iter()
                .map(PckCount::fraction)
                .collect(),
            aggregate: eval_pck(&preds, &gts, &vis, alpha, ref_size)?.fraction(),
        });
    }
    let conf: Vec<f64> = predictions.iter().flatten().map(|e| e.confidence).collect();
    let labels: Vec<bool> = vis.iter().flatten().copied().collect();
    let pr_curve = eval_visibility_pr(&conf, &labels).ok();
    Ok(EvalReport {
        pck,
        recall_at_p80: pr_curve.as_ref().map(|c| c.recall_at_p80),
        pr_curve,
        predictions,
    })
}

/// Fraction of visible keypoints in mirrored pairs `(a, b)` whose
/// prediction lands closer to the partner's ground truth than to its own.
pub fn mirror_confusion(
    samples: &[Sample],
    predictions: &[Vec<KeypointEstimate>],
    pairs: &[(usize, usize)],
) -> Option<f64> {
    let (mut swapped, mut total) = (0, 0);
    for (s, p) in samples.iter().zip(predictions) {
        for &(a, b) in pairs {
            for (own, other) in [(a, b), (b, a)] {
                if own >= p.len() || other >= p.len() || !s.visible[own] {
                    continue;
                }
                let d = |g: (f64, f64)| (p[own].x - g.0).hypot(p[own].y - g.1);
                total += 1;
                swapped += usize::from(d(s.keypoints[other]) < d(s.keypoints[own]));
            }
        }
    }
    (total > 0).then(|| swapped as f64 / total as f64)
}
