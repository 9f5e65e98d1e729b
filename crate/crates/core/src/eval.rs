//! Ranking and detection metrics: average precision, per-video mAP, F1 and
//! the breakdowns by face size, number of faces and head-body proportion.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::annotations::{box_area, derive_body_box, timestamp_key, Track};
use crate::error::{Error, Result};

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank. Scores are ranked in descending
/// order; equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::ValueRange(format!("score {s} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(decisions: &[u8], labels: &[u8]) -> Result<f64> {
    if decisions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: decisions.len(),
            right: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn decide(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// Mean over groups of the per-group AP. Groups without positives are
/// skipped; if none has a positive the result is `NoPositives`.
pub fn mean_ap_grouped<'a>(groups: impl IntoIterator<Item = (&'a [f64], &'a [u8])>) -> Result<f64> {
    let mut aps = Vec::new();
    for (s, l) in groups {
        match average_precision(s, l) {
            Ok(ap) => aps.push(ap),
            Err(Error::NoPositives) => {}
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame_timestamp: f64,
    pub entity_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<u8>,
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["video_id", "frame_timestamp", "entity_id", "score"])?;
    for r in records {
        wtr.write_record([
            r.video_id.as_str(),
            &format!("{:.3}", r.frame_timestamp),
            r.entity_id.as_str(),
            &format!("{:.6}", r.score),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: PredictionRecord = row?;
        if !rec.score.is_finite() {
            return Err(Error::ValueRange(format!("score {} is not finite", rec.score)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// A prediction joined with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub video_id: String,
    pub score: f64,
    pub label: u8,
    /// Face width in source pixels.
    pub face_width: f64,
    /// Annotated faces in the same video frame.
    pub num_faces: usize,
    /// Face area divided by body area.
    pub hbp: f64,
}

type Key = (String, String, i64);

/// Joins predictions with annotations on `(video, entity, timestamp)`.
/// Every prediction must match an annotation.
pub fn join(predictions: &[PredictionRecord], tracks: &[Track], frame_width: f64) -> Result<Vec<Scored>> {
    let mut faces_per_frame: HashMap<(String, i64), usize> = HashMap::new();
    let mut index: HashMap<Key, (u8, f64, f64)> = HashMap::new();
    for r in tracks.iter().flat_map(|t| &t.records) {
        let ts = timestamp_key(r.frame_timestamp);
        *faces_per_frame.entry((r.video_id.clone(), ts)).or_default() += 1;
        let body = match r.body_box {
            Some(b) => b,
            None => derive_body_box(&r.face_box, 1.0, 1.0)?,
        };
        let hbp = box_area(&r.face_box) / box_area(&body);
        let width = (r.face_box[2] - r.face_box[0]) * frame_width;
        index.insert((r.video_id.clone(), r.entity_id.clone(), ts), (r.label.bit(), width, hbp));
    }
    predictions
        .iter()
        .map(|p| {
            let ts = timestamp_key(p.frame_timestamp);
            let key = (p.video_id.clone(), p.entity_id.clone(), ts);
            let &(label, face_width, hbp) = index.get(&key).ok_or_else(|| {
                Error::JoinFailure(format!("{} / {} @ {:.3}s", p.video_id, p.entity_id, p.frame_timestamp))
            })?;
            Ok(Scored {
                video_id: p.video_id.clone(),
                score: p.score,
                label,
                face_width,
                num_faces: faces_per_frame[&(p.video_id.clone(), ts)],
                hbp,
            })
        })
        .collect()
}

/// Per-video mAP over joined predictions, keeping input order inside each
/// video.
pub fn mean_average_precision(items: &[Scored]) -> Result<f64> {
    let mut by_video: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for it in items {
        let e = by_video.entry(&it.video_id).or_default();
        e.0.push(it.score);
        e.1.push(it.label);
    }
    mean_ap_grouped(by_video.values().map(|(s, l)| (s.as_slice(), l.as_slice())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    /// Source frame width, to turn normalised face boxes into pixels.
    pub frame_width: f64,
    /// Faces narrower than this are Small.
    pub small_below: f64,
    /// Faces wider than this are Large; the rest are Middle.
    pub large_above: f64,
    /// Lowest-k% subsets for the head-body proportion analysis.
    pub hbp_percentiles: Vec<u32>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self {
            frame_width: 640.0,
            small_below: 64.0,
            large_above: 128.0,
            hbp_percentiles: vec![20, 40, 60, 80, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Breakdown {
    FaceSize,
    NumFaces,
    Hbp,
}

impl std::str::FromStr for Breakdown {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face-size" => Ok(Breakdown::FaceSize),
            "num-faces" => Ok(Breakdown::NumFaces),
            "hbp" => Ok(Breakdown::Hbp),
            other => Err(Error::Config(format!("unknown breakdown {other:?} (face-size, num-faces, hbp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub name: String,
    pub count: usize,
    pub positives: usize,
    /// `None` when the bucket is empty or has no positives.
    pub map: Option<f64>,
}

fn bucket(name: impl Into<String>, items: &[&Scored]) -> Result<BucketResult> {
    let owned: Vec<Scored> = items.iter().map(|s| (*s).clone()).collect();
    let map = match mean_average_precision(&owned) {
        Ok(m) => Some(m),
        Err(Error::NoPositives) => None,
        Err(e) => return Err(e),
    };
    Ok(BucketResult {
        name: name.into(),
        count: items.len(),
        positives: items.iter().filter(|s| s.label == 1).count(),
        map,
    })
}

pub fn face_size_buckets(items: &[Scored], spec: &BucketSpec) -> Result<Vec<BucketResult>> {
    let pick = |f: &dyn Fn(f64) -> bool| items.iter().filter(|s| f(s.face_width)).collect::<Vec<_>>();
    Ok(vec![
        bucket("small", &pick(&|w| w < spec.small_below))?,
        bucket("middle", &pick(&|w| (spec.small_below..=spec.large_above).contains(&w)))?,
        bucket("large", &pick(&|w| w > spec.large_above))?,
    ])
}

pub fn num_faces_buckets(items: &[Scored]) -> Result<Vec<BucketResult>> {
    let pick = |f: &dyn Fn(usize) -> bool| items.iter().filter(|s| f(s.num_faces)).collect::<Vec<_>>();
    Ok(vec![
        bucket("1", &pick(&|n| n == 1))?,
        bucket("2", &pick(&|n| n == 2))?,
        bucket("3+", &pick(&|n| n >= 3))?,
    ])
}

/// mAP on the `k`% of samples with the lowest head-body proportion, for
/// each `k`. Samples keep their input order inside a subset, so the 100%
/// subset reproduces the overall mAP exactly.
pub fn hbp_subsets(items: &[Scored], percentiles: &[u32]) -> Result<Vec<BucketResult>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].hbp.total_cmp(&items[b].hbp));
    let mut out = Vec::with_capacity(percentiles.len());
    for &k in percentiles {
        if k == 0 || k > 100 {
            return Err(Error::Config(format!("hbp percentile {k} must be in 1..=100")));
        }
        let take = (items.len() * k as usize).div_ceil(100);
        let mut chosen: Vec<usize> = order[..take].to_vec();
        chosen.sort_unstable();
        let subset: Vec<&Scored> = chosen.iter().map(|&i| &items[i]).collect();
        out.push(bucket(format!("lowest-{k}%"), &subset)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_map: f64,
    pub f1: f64,
    pub threshold: f64,
    pub num_predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_size: Option<Vec<BucketResult>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_faces: Option<Vec<BucketResult>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hbp: Option<Vec<BucketResult>>,
}

/// Overall mAP and F1 plus the requested breakdowns.
pub fn bucketed_map(
    predictions: &[PredictionRecord],
    tracks: &[Track],
    spec: &BucketSpec,
    breakdowns: &[Breakdown],
    threshold: f64,
) -> Result<EvalReport> {
    let items = join(predictions, tracks, spec.frame_width)?;
    let overall_map = mean_average_precision(&items)?;
    let scores: Vec<f64> = items.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = items.iter().map(|s| s.label).collect();
    let f1 = f1_score(&decide(&scores, threshold), &labels)?;
    let has = |b: Breakdown| breakdowns.contains(&b);
    Ok(EvalReport {
        overall_map,
        f1,
        threshold,
        num_predictions: items.len(),
        face_size: if has(Breakdown::FaceSize) { Some(face_size_buckets(&items, spec)?) } else { None },
        num_faces: if has(Breakdown::NumFaces) { Some(num_faces_buckets(&items)?) } else { None },
        hbp: if has(Breakdown::Hbp) { Some(hbp_subsets(&items, &spec.hbp_percentiles)?) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotations::{AnnotationRecord, SpeakLabel};

    #[test]
    fn perfect_ranking() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn single_positive_at_rank_two() {
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn no_positives() {
        assert!(matches!(average_precision(&[0.2, 0.4], &[0, 0]), Err(Error::NoPositives)));
    }

    #[test]
    fn ties_keep_input_order() {
        // Positive first among equals ranks first.
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let f = f1_score(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(f1_score(&[1], &[1, 0]), Err(Error::LengthMismatch { .. })));
    }

    fn track(video: &str, entity: &str, width: f64, labels: &[u8]) -> Track {
        Track {
            video_id: video.into(),
            entity_id: entity.into(),
            records: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| AnnotationRecord {
                    video_id: video.into(),
                    frame_timestamp: i as f64 * 0.04,
                    face_box: [0.1, 0.1, 0.1 + width, 0.3],
                    body_box: None,
                    label: SpeakLabel::from_bit(l),
                    entity_id: entity.into(),
                })
                .collect(),
        }
    }

    fn predict(t: &Track, scores: &[f64]) -> Vec<PredictionRecord> {
        t.records
            .iter()
            .zip(scores)
            .map(|(r, &s)| PredictionRecord {
                video_id: r.video_id.clone(),
                frame_timestamp: r.frame_timestamp,
                entity_id: r.entity_id.clone(),
                score: s,
                decision: None,
            })
            .collect()
    }

    #[test]
    fn small_faces_only_populate_small() {
        let t = track("v", "e", 30.0 / 640.0, &[1, 0, 1, 0]);
        let p = predict(&t, &[0.9, 0.2, 0.7, 0.4]);
        let r = bucketed_map(&p, &[t], &BucketSpec::default(), &[Breakdown::FaceSize], 0.5).unwrap();
        let b = r.face_size.unwrap();
        assert_eq!(b[0].count, 4);
        assert_eq!(b[0].map, Some(1.0));
        assert_eq!((b[1].count, b[1].map), (0, None));
        assert_eq!((b[2].count, b[2].map), (0, None));
    }

    #[test]
    fn bucket_without_positives_is_absent() {
        let a = track("v1", "e", 30.0 / 640.0, &[1, 0]);
        let b = track("v2", "e", 200.0 / 640.0, &[0, 0]);
        let mut p = predict(&a, &[0.9, 0.1]);
        p.extend(predict(&b, &[0.3, 0.2]));
        let r = bucketed_map(&p, &[a, b], &BucketSpec::default(), &[Breakdown::FaceSize], 0.5).unwrap();
        let large = &r.face_size.unwrap()[2];
        assert_eq!(large.count, 2);
        assert_eq!(large.map, None);
    }

    #[test]
    fn full_hbp_subset_equals_overall() {
        let mut tracks = Vec::new();
        let mut preds = Vec::new();
        for (i, w) in [0.05, 0.1, 0.2, 0.15].iter().enumerate() {
            let t = track(&format!("v{}", i % 2), &format!("e{i}"), *w, &[1, 0, 0, 1, 0]);
            preds.extend(predict(&t, &[0.3, 0.6, 0.1, 0.8, 0.5]));
            tracks.push(t);
        }
        let r = bucketed_map(&preds, &tracks, &BucketSpec::default(), &[Breakdown::Hbp, Breakdown::NumFaces], 0.5)
            .unwrap();
        let hbp = r.hbp.unwrap();
        assert_eq!(hbp.last().unwrap().map, Some(r.overall_map));
        assert_eq!(hbp.last().unwrap().count, 20);
        assert_eq!(r.num_faces.unwrap()[1].count, 20);
    }

    #[test]
    fn unmatched_prediction_fails_the_join() {
        let t = track("v", "e", 0.1, &[1]);
        let mut p = predict(&t, &[0.5]);
        p[0].entity_id = "other".into();
        assert!(matches!(
            bucketed_map(&p, &[t], &BucketSpec::default(), &[], 0.5),
            Err(Error::JoinFailure(_))
        ));
    }

    #[test]
    fn prediction_csv_round_trip() {
        let t = track("v", "e", 0.1, &[1, 0, 1]);
        let p = predict(&t, &[0.25, 0.5, 0.125]);
        let mut buf = Vec::new();
        write_predictions(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("video_id,frame_timestamp,entity_id,score\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), p);
    }
}
