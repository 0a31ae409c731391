//! Evaluation under the pseudo ground-truth protocol: a detector's own clean
//! output is the reference, so its clean AP is 100 by construction.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{apply_to_all_persons, PlacementSpec};
use crate::data_io::SceneRecord;
use crate::detector::{Detector, DifferentiableDetector};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Detection};
use crate::losses::PERSON_LABEL;
use crate::optimizer::{prepare_scene, train, TrainConfig};
use crate::raster::{Patch, SceneImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub iou_match_threshold: f64,
    pub det_threshold: f64,
    pub person_label: String,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            iou_match_threshold: 0.5,
            det_threshold: 0.5,
            person_label: PERSON_LABEL.to_string(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_match_threshold", self.iou_match_threshold),
            ("det_threshold", self.det_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("eval.{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    fn counts(&self, d: &Detection) -> bool {
        d.label == self.person_label && d.confidence > self.det_threshold
    }
}

/// Per-image reference boxes from clean detections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoGroundTruth {
    pub boxes: Vec<Vec<BoundingBox>>,
    /// Indices of images without any clean person detection.
    pub excluded: Vec<usize>,
}

impl PseudoGroundTruth {
    pub fn total(&self) -> usize {
        self.boxes.iter().map(Vec::len).sum()
    }
}

fn detect_all(detector: &dyn Detector, images: &[&SceneImage]) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|im| detector.detect(im).map(|o| o.detections))
        .collect()
}

/// Keeps the person detections of `clean` that clear the protocol threshold.
pub fn pseudo_gt_from_detections(clean: &[Vec<Detection>], protocol: &EvalProtocol) -> PseudoGroundTruth {
    let boxes: Vec<Vec<BoundingBox>> = clean
        .iter()
        .map(|dets| dets.iter().filter(|d| protocol.counts(d)).map(|d| d.bbox).collect())
        .collect();
    let excluded = boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_empty())
        .map(|(i, _)| i)
        .collect();
    PseudoGroundTruth { boxes, excluded }
}

pub fn pseudo_ground_truth(
    detector: &dyn Detector,
    clean_scenes: &[SceneRecord],
    protocol: &EvalProtocol,
) -> Result<PseudoGroundTruth> {
    let images: Vec<&SceneImage> = clean_scenes.iter().map(|s| &s.image).collect();
    Ok(pseudo_gt_from_detections(&detect_all(detector, &images)?, protocol))
}

/// Greedy matching outcome for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
}

/// All-point interpolated AP at a single IoU threshold, in percent, plus the
/// per-image match counts.
///
/// Person detections from every image are ranked together by confidence
/// (ties by image, then by position in the image's list). Each one takes the
/// highest-IoU unmatched reference box in its image if that IoU reaches the
/// threshold.
pub fn average_precision_detailed(
    detections: &[Vec<Detection>],
    gts: &[Vec<BoundingBox>],
    protocol: &EvalProtocol,
) -> Result<(f64, Vec<MatchCounts>)> {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::NoPseudoGt);
    }
    let mut ranked: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.label == protocol.person_label)
                .map(move |(j, _)| (i, j))
        })
        .collect();
    ranked.sort_by(|&(ia, ja), &(ib, jb)| {
        detections[ib][jb]
            .confidence
            .total_cmp(&detections[ia][ja].confidence)
            .then((ia, ja).cmp(&(ib, jb)))
    });

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut counts = vec![MatchCounts::default(); detections.len().max(gts.len())];
    let mut hits = Vec::with_capacity(ranked.len());
    for &(i, j) in &ranked {
        let d = &detections[i][j];
        let image_gt = gts.get(i).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in image_gt.iter().enumerate() {
            if taken[i][k] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= protocol.iou_match_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                taken[i][k] = true;
                counts[i].true_positives += 1;
                hits.push(true);
            }
            None => {
                counts[i].false_positives += 1;
                hits.push(false);
            }
        }
    }

    // Precision after each rank, then its running maximum from the right.
    let mut tp = 0usize;
    let mut precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(rank, &hit)| {
            tp += usize::from(hit);
            tp as f64 / (rank + 1) as f64
        })
        .collect();
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // Recall rises by 1/G at each true positive.
    let area = hits
        .iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .fold(0.0, |acc, (_, p)| acc + p);
    Ok((100.0 * area / total_gt as f64, counts))
}

pub fn average_precision(detections: &[Vec<Detection>], gts: &[Vec<BoundingBox>], protocol: &EvalProtocol) -> Result<f64> {
    average_precision_detailed(detections, gts, protocol).map(|(ap, _)| ap)
}

/// Fraction of reference boxes that no counted detection in the same image
/// overlaps at the match threshold.
pub fn attack_success_rate(gts: &[Vec<BoundingBox>], adversarial: &[Vec<Detection>], protocol: &EvalProtocol) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let evaded: usize = gts
        .iter()
        .enumerate()
        .map(|(i, image_gt)| {
            let dets = adversarial.get(i).map(Vec::as_slice).unwrap_or(&[]);
            image_gt
                .iter()
                .filter(|g| {
                    !dets
                        .iter()
                        .any(|d| protocol.counts(d) && iou(&d.bbox, g) >= protocol.iou_match_threshold)
                })
                .count()
        })
        .sum();
    evaded as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub pseudo_gt: usize,
    pub matched: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_person: f64,
    pub asr: f64,
    pub per_image: Vec<ImageReport>,
    /// Images dropped for having no clean person detection.
    pub excluded: Vec<String>,
    pub protocol: EvalProtocol,
}

/// Scores `scenes` with `patch` applied to every person box against the
/// detector's clean pseudo-GT. `None` evaluates the clean scenes themselves.
pub fn evaluate(
    detector: &dyn Detector,
    scenes: &[SceneRecord],
    patch: Option<&Patch>,
    placement: &PlacementSpec,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let gt = pseudo_ground_truth(detector, scenes, protocol)?;
    evaluate_against(detector, scenes, &gt, patch, placement, protocol)
}

/// [`evaluate`] with a precomputed pseudo-GT.
pub fn evaluate_against(
    detector: &dyn Detector,
    scenes: &[SceneRecord],
    gt: &PseudoGroundTruth,
    patch: Option<&Patch>,
    placement: &PlacementSpec,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    let kept: Vec<usize> = (0..scenes.len()).filter(|i| !gt.boxes[*i].is_empty()).collect();
    if kept.is_empty() {
        return Err(Error::NoPseudoGt);
    }
    let attacked: Vec<SceneImage> = kept
        .par_iter()
        .map(|&i| match patch {
            Some(p) => apply_to_all_persons(&scenes[i].image, p, &scenes[i].person_boxes, placement).image,
            None => scenes[i].image.clone(),
        })
        .collect();
    let adv = detect_all(detector, &attacked.iter().collect::<Vec<_>>())?;
    let kept_gt: Vec<Vec<BoundingBox>> = kept.iter().map(|&i| gt.boxes[i].clone()).collect();
    let (ap_person, counts) = average_precision_detailed(&adv, &kept_gt, protocol)?;
    let asr = attack_success_rate(&kept_gt, &adv, protocol);
    Ok(EvalReport {
        ap_person,
        asr,
        per_image: kept
            .iter()
            .zip(&counts)
            .map(|(&i, c)| ImageReport {
                id: scenes[i].id.clone(),
                pseudo_gt: gt.boxes[i].len(),
                matched: c.true_positives,
                false_positives: c.false_positives,
            })
            .collect(),
        excluded: gt.excluded.iter().map(|&i| scenes[i].id.clone()).collect(),
        protocol: protocol.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub trained_on: String,
    pub victim: String,
    pub message: String,
}

/// AP of each patch (rows) against each victim (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `None` where the cell could not be computed.
    pub cells: Vec<Vec<Option<f64>>>,
    pub failures: Vec<CellFailure>,
}

impl TransferMatrix {
    pub fn computed_cells(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    /// CSV with one row per training detector; unavailable cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trained_on".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Evaluates every named patch against every named victim. A failing victim
/// marks its cells unavailable instead of aborting the matrix. A `None` patch
/// evaluates the clean scenes.
pub fn transfer_matrix(
    patches: &[(String, Option<Patch>)],
    victims: &[(String, &dyn Detector)],
    scenes: &[SceneRecord],
    placement: &PlacementSpec,
    protocol: &EvalProtocol,
) -> Result<TransferMatrix> {
    if patches.is_empty() || victims.is_empty() {
        return Err(Error::InvalidConfig("transfer needs at least one patch and one victim".into()));
    }
    let mut cells = vec![vec![None; victims.len()]; patches.len()];
    let mut failures = Vec::new();
    for (col, (victim, detector)) in victims.iter().enumerate() {
        let gt = match pseudo_ground_truth(*detector, scenes, protocol) {
            Ok(gt) => gt,
            Err(e) => {
                for (trained_on, _) in patches {
                    failures.push(CellFailure {
                        trained_on: trained_on.clone(),
                        victim: victim.clone(),
                        message: e.to_string(),
                    });
                }
                continue;
            }
        };
        for (row, (trained_on, patch)) in patches.iter().enumerate() {
            match evaluate_against(*detector, scenes, &gt, patch.as_ref(), placement, protocol) {
                Ok(r) => cells[row][col] = Some(r.ap_person),
                Err(e) => failures.push(CellFailure {
                    trained_on: trained_on.clone(),
                    victim: victim.clone(),
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(TransferMatrix {
        rows: patches.iter().map(|(n, _)| n.clone()).collect(),
        columns: victims.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub ap_person: Option<f64>,
    pub asr: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub history: Vec<crate::losses::LossBreakdown>,
    #[serde(skip)]
    pub patch: Option<Patch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStability {
    pub runs: Vec<SeedRun>,
    /// Max minus min of the successful runs' AP; `None` if none succeeded.
    pub spread: Option<f64>,
}

/// Trains once per seed and evaluates each patch against the same detector.
/// A failing seed is recorded and the remaining seeds still run.
pub fn seed_stability<D: DifferentiableDetector + Detector>(
    dataset: &[SceneRecord],
    detector: &D,
    cfg: &TrainConfig,
    seeds: &[u64],
    protocol: &EvalProtocol,
) -> Result<SeedStability> {
    if seeds.len() < 2 {
        return Err(Error::TooFewSeeds(seeds.len()));
    }
    let scenes: Vec<SceneRecord> = dataset.iter().map(|r| prepare_scene(r, cfg.input_resolution)).collect();
    let gt = pseudo_ground_truth(detector, &scenes, protocol)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let outcome = train(&scenes, detector, &cfg).and_then(|state| {
            let report = evaluate_against(detector, &scenes, &gt, Some(&state.patch), &cfg.placement, protocol)?;
            Ok((state, report))
        });
        runs.push(match outcome {
            Ok((state, report)) => SeedRun {
                seed,
                ap_person: Some(report.ap_person),
                asr: Some(report.asr),
                final_loss: state.history.last().map(|l| l.total),
                error: None,
                history: state.history,
                patch: Some(state.patch),
            },
            Err(e) => SeedRun {
                seed,
                ap_person: None,
                asr: None,
                final_loss: None,
                error: Some(e.to_string()),
                history: Vec::new(),
                patch: None,
            },
        });
    }
    let aps: Vec<f64> = runs.iter().filter_map(|r| r.ap_person).collect();
    let spread = (!aps.is_empty()).then(|| {
        aps.iter().copied().fold(f64::MIN, f64::max) - aps.iter().copied().fold(f64::MAX, f64::min)
    });
    Ok(SeedStability { runs, spread })
}
