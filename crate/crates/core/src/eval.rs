//! OKS similarity and average-precision evaluation over COCO-style
//! annotation documents (single-person protocol: one prediction per
//! annotated image).

use std::collections::{HashMap, HashSet};

use serde::Deserialize;

use crate::decode::Keypoint;
use crate::error::{Error, Result};

/// Per-keypoint falloff constants bundled with the crate (the standard
/// 17-keypoint set).
const COCO_K: &str = include_str!("../data/coco_oks_k.txt");

#[derive(Clone, Debug)]
pub struct OksConfig {
    /// Per-keypoint constants k_i (> 0).
    pub k: Vec<f64>,
    /// AP thresholds, default 0.50..=0.95 step 0.05.
    pub thresholds: Vec<f64>,
}

impl OksConfig {
    pub fn default_thresholds() -> Vec<f64> {
        (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
    }

    /// The bundled 17-keypoint constants.
    pub fn coco() -> Self {
        let k = COCO_K
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse().expect("bundled constants parse"))
            .collect();
        OksConfig {
            k,
            thresholds: Self::default_thresholds(),
        }
    }

    /// One shared constant for all K keypoints (synthetic datasets).
    pub fn uniform(num_keypoints: usize, value: f64) -> Self {
        OksConfig {
            k: vec![value; num_keypoints],
            thresholds: Self::default_thresholds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::precondition("oks", "every k_i must be > 0"));
        }
        Ok(())
    }
}

// ── Annotations ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtKeypoint {
    pub x: f64,
    pub y: f64,
    /// 0 = unlabeled, 1 = labeled not visible, 2 = labeled visible.
    pub visibility: u8,
}

#[derive(Clone, Debug)]
pub struct Annotation {
    pub image_id: u64,
    pub keypoints: Vec<GtKeypoint>,
    /// Object scale s^2 in input pixels squared.
    pub area: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AnnotationSet {
    pub annotations: Vec<Annotation>,
}

#[derive(Deserialize)]
struct DocAnnotation {
    image_id: u64,
    keypoints: Vec<f64>,
    /// Required for annotations, absent in prediction documents.
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Deserialize)]
struct Doc {
    annotations: Vec<DocAnnotation>,
}

/// Parse a COCO-keypoint-style JSON document; unknown fields are
/// ignored, malformed syntax carries the parser's position info.
pub fn parse_annotations(document: &str) -> Result<AnnotationSet> {
    let doc: Doc = serde_json::from_str(document)?;
    let mut annotations = Vec::with_capacity(doc.annotations.len());
    for (i, a) in doc.annotations.into_iter().enumerate() {
        if a.keypoints.len() % 3 != 0 {
            return Err(Error::Annotation(format!(
                "annotation {i}: keypoints length {} is not a multiple of 3",
                a.keypoints.len()
            )));
        }
        let area = a
            .area
            .ok_or_else(|| Error::Annotation(format!("annotation {i}: missing field `area`")))?;
        if area <= 0.0 || area.is_nan() {
            return Err(Error::Annotation(format!(
                "annotation {i}: area must be positive, got {area}"
            )));
        }
        let keypoints = a
            .keypoints
            .chunks(3)
            .enumerate()
            .map(|(j, c)| {
                let v = c[2];
                if v != 0.0 && v != 1.0 && v != 2.0 {
                    return Err(Error::Annotation(format!(
                        "annotation {i} keypoint {j}: visibility {v} not in {{0,1,2}}"
                    )));
                }
                Ok(GtKeypoint {
                    x: c[0],
                    y: c[1],
                    visibility: v as u8,
                })
            })
            .collect::<Result<_>>()?;
        annotations.push(Annotation {
            image_id: a.image_id,
            keypoints,
            area,
        });
    }
    Ok(AnnotationSet { annotations })
}

// ── Predictions ─────────────────────────────────────────────────────

/// One decoded pose in input-pixel coordinates.
#[derive(Clone, Debug)]
pub struct PredictedPose {
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    /// Ranking score; by convention the mean keypoint score.
    pub score: f64,
}

impl PredictedPose {
    pub fn from_keypoints(image_id: u64, keypoints: Vec<Keypoint>) -> Self {
        let score = if keypoints.is_empty() {
            0.0
        } else {
            keypoints.iter().map(|k| k.score).sum::<f64>() / keypoints.len() as f64
        };
        PredictedPose {
            image_id,
            keypoints,
            score,
        }
    }
}

/// Serialize predictions in the annotation container layout, with
/// (x, y, score) triples in the keypoints array.
pub fn predictions_to_json(preds: &[PredictedPose]) -> String {
    let annotations: Vec<serde_json::Value> = preds
        .iter()
        .map(|p| {
            let triples: Vec<f64> = p
                .keypoints
                .iter()
                .flat_map(|k| [k.x, k.y, k.score])
                .collect();
            serde_json::json!({
                "image_id": p.image_id,
                "keypoints": triples,
                "score": p.score,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "annotations": annotations }))
        .expect("json encode")
}

pub fn parse_predictions(document: &str) -> Result<Vec<PredictedPose>> {
    let doc: Doc = serde_json::from_str(document)?;
    doc.annotations
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            if a.keypoints.len() % 3 != 0 {
                return Err(Error::Annotation(format!(
                    "prediction {i}: keypoints length {} is not a multiple of 3",
                    a.keypoints.len()
                )));
            }
            let keypoints: Vec<Keypoint> = a
                .keypoints
                .chunks(3)
                .map(|c| Keypoint {
                    x: c[0],
                    y: c[1],
                    score: c[2],
                })
                .collect();
            Ok(match a.score {
                Some(score) => PredictedPose {
                    image_id: a.image_id,
                    keypoints,
                    score,
                },
                None => PredictedPose::from_keypoints(a.image_id, keypoints),
            })
        })
        .collect()
}

// ── OKS ─────────────────────────────────────────────────────────────

/// Object keypoint similarity: mean over labeled keypoints of
/// `exp(-d_i^2 / (2 * s^2 * k_i^2))` with `s^2` the annotation area;
/// 0 when no keypoint is labeled. Coordinates are input pixels.
pub fn oks(pred: &[Keypoint], gt: &Annotation, cfg: &OksConfig) -> f64 {
    assert_eq!(pred.len(), gt.keypoints.len(), "keypoint count mismatch");
    assert_eq!(pred.len(), cfg.k.len(), "k_i count mismatch");
    let mut sum = 0.0;
    let mut labeled = 0usize;
    for ((p, g), &k) in pred.iter().zip(&gt.keypoints).zip(&cfg.k) {
        if g.visibility == 0 {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        sum += (-d2 / (2.0 * gt.area * k * k)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        0.0
    } else {
        sum / labeled as f64
    }
}

// ── Average precision ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ApResult {
    /// (threshold, AP) pairs in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// 101-point interpolated AP over the PR curve of score-ranked
/// predictions; a prediction is a true positive at threshold t iff its
/// OKS against its image's annotation is >= t.
pub fn average_precision(
    preds: &[PredictedPose],
    anns: &AnnotationSet,
    cfg: &OksConfig,
) -> Result<ApResult> {
    cfg.validate()?;
    if anns.annotations.is_empty() {
        return Err(Error::Annotation(
            "annotation set is empty; nothing to evaluate".to_string(),
        ));
    }
    let mut by_image: HashMap<u64, &Annotation> = HashMap::new();
    for a in &anns.annotations {
        if by_image.insert(a.image_id, a).is_some() {
            return Err(Error::Annotation(format!(
                "duplicate annotation for image {} (single-person protocol)",
                a.image_id
            )));
        }
    }
    let mut seen = HashSet::new();
    for p in preds {
        if !by_image.contains_key(&p.image_id) {
            return Err(Error::Annotation(format!(
                "prediction for image {} has no annotation",
                p.image_id
            )));
        }
        if !seen.insert(p.image_id) {
            return Err(Error::Annotation(format!(
                "duplicate prediction for image {}",
                p.image_id
            )));
        }
    }

    // rank once; ties broken by image id for order invariance
    let mut ranked: Vec<&PredictedPose> = preds.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
    });
    let oks_ranked: Vec<f64> = ranked
        .iter()
        .map(|p| oks(&p.keypoints, by_image[&p.image_id], cfg))
        .collect();
    let npos = anns.annotations.len();

    let per_threshold: Vec<(f64, f64)> = cfg
        .thresholds
        .iter()
        .map(|&thr| (thr, ap_at(&oks_ranked, npos, thr)))
        .collect();
    let mean = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>()
        / per_threshold.len().max(1) as f64;
    Ok(ApResult {
        per_threshold,
        mean,
    })
}

fn ap_at(oks_ranked: &[f64], npos: usize, threshold: f64) -> f64 {
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(oks_ranked.len());
    let mut recalls = Vec::with_capacity(oks_ranked.len());
    for (i, &o) in oks_ranked.iter().enumerate() {
        if o >= threshold {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / npos as f64);
    }
    // monotone precision envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let want = r as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= want - 1e-12)
            .map(|idx| precisions[idx])
            .unwrap_or(0.0);
        total += p;
    }
    total / 101.0
}

// ── Synthetic-set evaluation pipeline ───────────────────────────────

use crate::decode::{decode_all, flip_average};
use crate::posenet::Model;
use crate::synth::SyntheticSample;

/// Ground-truth annotations for generated samples; image id is the
/// sample index, area the bounding box of the visible joints.
pub fn annotations_from_samples(samples: &[SyntheticSample]) -> AnnotationSet {
    let annotations = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let visible: Vec<&crate::synth::KeypointGt> =
                s.keypoints.iter().filter(|k| k.visible).collect();
            let area = if visible.is_empty() {
                1.0
            } else {
                let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
                for k in &visible {
                    x0 = x0.min(k.x);
                    x1 = x1.max(k.x);
                    y0 = y0.min(k.y);
                    y1 = y1.max(k.y);
                }
                ((x1 - x0) * (y1 - y0)).max(1.0)
            };
            Annotation {
                image_id: i as u64,
                keypoints: s
                    .keypoints
                    .iter()
                    .map(|k| GtKeypoint {
                        x: k.x,
                        y: k.y,
                        visibility: if k.visible { 2 } else { 0 },
                    })
                    .collect(),
                area,
            }
        })
        .collect();
    AnnotationSet { annotations }
}

/// Run the model over samples and decode poses into input-pixel
/// coordinates (heatmap coordinates times 4).
pub fn predict_poses(
    model: &Model<f32>,
    samples: &[SyntheticSample],
    use_flip: bool,
    flip_pairs: &[(usize, usize)],
) -> Result<Vec<PredictedPose>> {
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let heatmap = if use_flip {
            flip_average(model, &s.image, flip_pairs)?
        } else {
            model.forward(&s.image)?.0
        };
        let decoded = decode_all(&heatmap)?;
        let keypoints = decoded[0]
            .iter()
            .map(|k| Keypoint {
                x: k.x * 4.0,
                y: k.y * 4.0,
                score: k.score,
            })
            .collect();
        out.push(PredictedPose::from_keypoints(i as u64, keypoints));
    }
    Ok(out)
}

/// Forward + decode + OKS AP on a synthetic set in one call.
pub fn evaluate_on_samples(
    model: &Model<f32>,
    samples: &[SyntheticSample],
    cfg: &OksConfig,
    use_flip: bool,
    flip_pairs: &[(usize, usize)],
) -> Result<ApResult> {
    let preds = predict_poses(model, samples, use_flip, flip_pairs)?;
    let anns = annotations_from_samples(samples);
    average_precision(&preds, &anns, cfg)
}
