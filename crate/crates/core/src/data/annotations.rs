//! Annotation CSV ingestion and body-box geometry.
//!
//! Columns: `video_id,frame_timestamp,fx1,fy1,fx2,fy2,bx1,by1,bx2,by2,label,entity_id`.
//! Boxes are normalised to `[0, 1]`; the body columns may be empty.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x1, y1, x2, y2)`.
pub type BBox = [f64; 4];

pub const CSV_HEADER: [&str; 12] = [
    "video_id",
    "frame_timestamp",
    "fx1",
    "fy1",
    "fx2",
    "fy2",
    "bx1",
    "by1",
    "bx2",
    "by2",
    "label",
    "entity_id",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeakLabel {
    SpeakingAudible,
    NotSpeaking,
}

impl SpeakLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakLabel::SpeakingAudible => "SPEAKING_AUDIBLE",
            SpeakLabel::NotSpeaking => "NOT_SPEAKING",
        }
    }

    pub fn from_bit(bit: u8) -> Self {
        if bit == 1 {
            SpeakLabel::SpeakingAudible
        } else {
            SpeakLabel::NotSpeaking
        }
    }

    pub fn bit(self) -> u8 {
        u8::from(self == SpeakLabel::SpeakingAudible)
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "SPEAKING_AUDIBLE" | "1" => Some(SpeakLabel::SpeakingAudible),
            // Inaudible speech is not a positive for audio-visual detection.
            "NOT_SPEAKING" | "SPEAKING_NOT_AUDIBLE" | "0" => Some(SpeakLabel::NotSpeaking),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    /// Seconds.
    pub frame_timestamp: f64,
    pub face_box: BBox,
    pub body_box: Option<BBox>,
    pub label: SpeakLabel,
    pub entity_id: String,
}

/// Timestamp key with millisecond resolution, used to join predictions and
/// annotations without comparing floats.
pub fn timestamp_key(t: f64) -> i64 {
    (t * 1000.0).round() as i64
}

/// All annotations of one entity in one video, ordered by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub video_id: String,
    pub entity_id: String,
    pub records: Vec<AnnotationRecord>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label.bit()).collect()
    }

    /// `video:entity`.
    pub fn id(&self) -> String {
        track_id(&self.video_id, &self.entity_id)
    }
}

pub fn track_id(video_id: &str, entity_id: &str) -> String {
    format!("{video_id}:{entity_id}")
}

pub fn valid_box(b: &BBox) -> bool {
    b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && b[0] < b[2] && b[1] < b[3]
}

fn parse_f64(field: &str, name: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Parse {
        line,
        msg: format!("{name}: {e} ({field:?})"),
    })
}

fn parse_box(fields: &[&str], names: &[&str], line: usize) -> Result<BBox> {
    let mut b = [0.0; 4];
    for i in 0..4 {
        b[i] = parse_f64(fields[i], names[i], line)?;
    }
    if !valid_box(&b) {
        return Err(Error::Parse {
            line,
            msg: format!("invalid box {b:?}: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"),
        });
    }
    Ok(b)
}

/// Parses annotation rows and groups them into tracks keyed by
/// `(video_id, entity_id)`, each sorted by timestamp.
pub fn parse_annotations<R: Read>(reader: R) -> Result<Vec<Track>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}, got {}", CSV_HEADER.join(","), names.join(",")),
        });
    }
    let mut groups: BTreeMap<(String, String), Vec<(AnnotationRecord, usize)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let f: Vec<&str> = row.iter().collect();
        let frame_timestamp = parse_f64(f[1], "frame_timestamp", line)?;
        if !frame_timestamp.is_finite() || frame_timestamp < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("frame_timestamp {frame_timestamp} must be finite and non-negative"),
            });
        }
        let face_box = parse_box(&f[2..6], &CSV_HEADER[2..6], line)?;
        let body_box = if f[6..10].iter().all(|s| s.trim().is_empty()) {
            None
        } else {
            Some(parse_box(&f[6..10], &CSV_HEADER[6..10], line)?)
        };
        let label = SpeakLabel::parse(f[10]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown label {:?}", f[10]),
        })?;
        let rec = AnnotationRecord {
            video_id: f[0].trim().to_string(),
            frame_timestamp,
            face_box,
            body_box,
            label,
            entity_id: f[11].trim().to_string(),
        };
        if rec.video_id.is_empty() || rec.entity_id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty video_id or entity_id".into(),
            });
        }
        groups
            .entry((rec.video_id.clone(), rec.entity_id.clone()))
            .or_default()
            .push((rec, line));
    }
    let mut tracks = Vec::with_capacity(groups.len());
    for ((video_id, entity_id), mut rows) in groups {
        rows.sort_by(|a, b| a.0.frame_timestamp.total_cmp(&b.0.frame_timestamp));
        for pair in rows.windows(2) {
            if timestamp_key(pair[0].0.frame_timestamp) == timestamp_key(pair[1].0.frame_timestamp) {
                return Err(Error::DuplicateFrame {
                    video_id,
                    entity_id,
                    timestamp: pair[1].0.frame_timestamp,
                });
            }
        }
        tracks.push(Track {
            video_id,
            entity_id,
            records: rows.into_iter().map(|(r, _)| r).collect(),
        });
    }
    Ok(tracks)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Track>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(std::io::BufReader::new(file))
}

pub fn write_annotations<W: Write>(tracks: &[Track], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CSV_HEADER)?;
    let fmt = |v: f64| format!("{v:.6}");
    for r in tracks.iter().flat_map(|t| &t.records) {
        let body: [String; 4] = match r.body_box {
            Some(b) => b.map(fmt),
            None => Default::default(),
        };
        let mut row = vec![r.video_id.clone(), format!("{:.3}", r.frame_timestamp)];
        row.extend(r.face_box.map(fmt));
        row.extend(body);
        row.push(r.label.as_str().to_string());
        row.push(r.entity_id.clone());
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(Path::new("<annotations>"), e))?;
    Ok(())
}

/// Body box before clamping: twice the face width about the face centre,
/// from the top of the face down to three face heights below it.
pub fn body_box_unclamped(face: &BBox) -> BBox {
    let [x1, y1, x2, y2] = *face;
    let cx = 0.5 * (x1 + x2);
    let w = x2 - x1;
    [cx - w, y1, cx + w, y1 + 3.0 * (y2 - y1)]
}

pub fn clamp_box(b: &BBox, frame_w: f64, frame_h: f64) -> BBox {
    [
        b[0].clamp(0.0, frame_w),
        b[1].clamp(0.0, frame_h),
        b[2].clamp(0.0, frame_w),
        b[3].clamp(0.0, frame_h),
    ]
}

/// Body box for upper-body footage where only the face is annotated.
/// Coordinates are in the same units as `frame_w` / `frame_h` (pixels, or 1.0
/// for normalised boxes).
pub fn derive_body_box(face: &BBox, frame_w: f64, frame_h: f64) -> Result<BBox> {
    if !(face[0] < face[2] && face[1] < face[3]) || face.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateBox(*face));
    }
    let body = clamp_box(&body_box_unclamped(face), frame_w, frame_h);
    if body[2] <= body[0] || body[3] <= body[1] {
        return Err(Error::DegenerateBox(body));
    }
    Ok(body)
}

pub fn box_area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "video_id,frame_timestamp,fx1,fy1,fx2,fy2,bx1,by1,bx2,by2,label,entity_id\n";

    fn parse(rows: &str) -> Result<Vec<Track>> {
        parse_annotations(format!("{HEADER}{rows}").as_bytes())
    }

    #[test]
    fn two_rows_one_track() {
        let t = parse(
            "v1,0.00,0.1,0.1,0.2,0.3,,,,,SPEAKING_AUDIBLE,e1\n\
             v1,0.04,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n",
        )
        .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 2);
        assert_eq!(t[0].labels(), vec![1, 0]);
        assert!(t[0].records[0].body_box.is_none());
    }

    #[test]
    fn inverted_box_is_a_parse_error_with_line() {
        let err = parse(
            "v1,0.00,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n\
             v1,0.04,0.3,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn interleaved_entities_are_split_and_sorted() {
        let t = parse(
            "v1,0.08,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,a\n\
             v1,0.00,0.5,0.1,0.6,0.3,0.4,0.1,0.7,0.9,SPEAKING_AUDIBLE,b\n\
             v1,0.00,0.1,0.1,0.2,0.3,,,,,SPEAKING_AUDIBLE,a\n\
             v1,0.04,0.5,0.1,0.6,0.3,,,,,NOT_SPEAKING,b\n",
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        for track in &t {
            assert!(track.records.windows(2).all(|w| w[0].frame_timestamp < w[1].frame_timestamp));
        }
        assert_eq!(t[0].entity_id, "a");
        assert_eq!(t[0].labels(), vec![1, 0]);
        assert_eq!(t[1].records[0].body_box, Some([0.4, 0.1, 0.7, 0.9]));
    }

    #[test]
    fn duplicate_frames_are_rejected() {
        let err = parse(
            "v1,0.04,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n\
             v1,0.04,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateFrame { .. }));
    }

    #[test]
    fn bad_number_and_label_report_lines() {
        let err = parse("v1,abc,0.1,0.1,0.2,0.3,,,,,NOT_SPEAKING,e1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse("v1,0.0,0.1,0.1,0.2,0.3,,,,,MAYBE,e1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn csv_round_trip() {
        let t = parse(
            "v1,0.000,0.1,0.1,0.2,0.3,0.05,0.1,0.25,0.7,SPEAKING_AUDIBLE,a\n\
             v2,1.250,0.5,0.1,0.6,0.3,,,,,NOT_SPEAKING,b\n",
        )
        .unwrap();
        let mut buf = Vec::new();
        write_annotations(&t, &mut buf).unwrap();
        assert_eq!(parse_annotations(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn body_box_fixtures() {
        assert_eq!(derive_body_box(&[10.0, 20.0, 30.0, 60.0], 200.0, 200.0).unwrap(), [0.0, 20.0, 40.0, 140.0]);
        assert_eq!(
            derive_body_box(&[180.0, 20.0, 200.0, 60.0], 200.0, 200.0).unwrap(),
            [170.0, 20.0, 200.0, 140.0]
        );
        assert_eq!(derive_body_box(&[0.0, 0.0, 200.0, 200.0], 200.0, 200.0).unwrap(), [0.0, 0.0, 200.0, 200.0]);
    }

    #[test]
    fn degenerate_boxes() {
        assert!(matches!(
            derive_body_box(&[10.0, 20.0, 10.0, 60.0], 200.0, 200.0),
            Err(Error::DegenerateBox(_))
        ));
        // Entirely below the frame after clamping.
        assert!(matches!(
            derive_body_box(&[10.0, 250.0, 20.0, 260.0], 200.0, 200.0),
            Err(Error::DegenerateBox(_))
        ));
    }
}
