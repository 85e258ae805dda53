//! MOTChallenge text files and the binary feature file.
//!
//! Text rows are `frame,id,x,y,w,h,conf,...`; detection files use `id = -1`,
//! ground truth uses positive ids and a trailing class/visibility column that
//! is ignored. The feature file layout is
//!
//! ```text
//! "FEAB" | version u8 = 1 | dim u32 | count u32 | count * (frame u32, index u32, dim * f32)
//! ```
//!
//! all little-endian.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::appearance::FeatureVector;
use crate::geometry::BBox;
use crate::tracker::{Detection, FeatureProvider, Frame, OutputRow, ProviderError};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAB";
pub const FEATURE_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    BadVersion(u8),
    #[error("truncated feature file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("duplicate feature record for frame {frame}, detection {index}")]
    DuplicateKey { frame: u32, index: u32 },
    #[error("record for frame {frame}, detection {index} has {got} values, expected {dim}")]
    RecordDimension {
        frame: u32,
        index: u32,
        got: usize,
        dim: usize,
    },
    #[error("zero or non-finite feature vector for frame {frame}, detection {index}")]
    DegenerateFeature { frame: u32, index: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One parsed MOTChallenge row.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: i64,
    pub bbox: BBox,
    pub conf: f64,
}

fn parse_row(text: &str, line: usize) -> Result<MotRow, IoError> {
    let err = |message: String| IoError::Parse { line, message };
    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    if fields.len() < 6 {
        return Err(err(format!(
            "expected at least 6 fields, found {}",
            fields.len()
        )));
    }
    let num = |k: usize, name: &str| -> Result<f64, IoError> {
        fields[k]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(format!("bad {name} '{}'", fields[k])))
    };
    let frame = num(0, "frame")?;
    if frame < 1.0 || frame.fract() != 0.0 || frame > u32::MAX as f64 {
        return Err(err(format!(
            "frame must be a positive integer, got '{}'",
            fields[0]
        )));
    }
    let id = num(1, "id")?;
    if id.fract() != 0.0 {
        return Err(err(format!("id must be an integer, got '{}'", fields[1])));
    }
    let (x, y, w, h) = (num(2, "x")?, num(3, "y")?, num(4, "w")?, num(5, "h")?);
    let bbox = BBox::new(x, y, w, h).map_err(|e| err(e.to_string()))?;
    let conf = if fields.len() > 6 {
        num(6, "conf")?
    } else {
        1.0
    };
    Ok(MotRow {
        frame: frame as u32,
        id: id as i64,
        bbox,
        conf,
    })
}

/// Reads every row of a MOTChallenge text file. Blank lines are skipped;
/// errors carry the 1-based line number.
pub fn read_rows(path: &Path) -> Result<Vec<MotRow>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_rows(&text)
}

pub fn parse_rows(text: &str) -> Result<Vec<MotRow>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| parse_row(l, k + 1))
        .collect()
}

/// Groups rows by frame; the per-frame detection index is the file order.
pub fn group_detections(rows: &[MotRow]) -> Vec<Frame> {
    let mut frames: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for r in rows {
        let dets = frames.entry(r.frame).or_default();
        dets.push(Detection {
            frame: r.frame,
            index: dets.len(),
            bbox: r.bbox,
            confidence: r.conf,
        });
    }
    frames
        .into_iter()
        .map(|(frame, detections)| Frame { frame, detections })
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Frame>, IoError> {
    Ok(group_detections(&read_rows(path)?))
}

/// Ground truth rows. Rows whose evaluation flag (7th column) is 0 are
/// dropped, as MOTChallenge evaluation ignores them.
pub fn read_ground_truth(path: &Path) -> Result<Vec<MotRow>, IoError> {
    let rows = read_rows(path)?;
    Ok(rows.into_iter().filter(|r| r.conf != 0.0).collect())
}

pub fn format_results(rows: &[OutputRow]) -> String {
    let mut sorted: Vec<&OutputRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in sorted {
        let b = &r.bbox;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},1,-1,-1,-1",
            r.frame,
            r.id,
            b.x(),
            b.y(),
            b.w(),
            b.h()
        );
    }
    out
}

/// Writes tracker output sorted by frame, then id.
pub fn write_results(path: &Path, rows: &[OutputRow]) -> Result<(), IoError> {
    fs::write(path, format_results(rows)).map_err(io_err(path))
}

/// Formats detection rows (`id = -1`) in file order.
pub fn format_detections(frames: &[Frame]) -> String {
    let mut out = String::new();
    for f in frames {
        for d in &f.detections {
            let b = &d.bbox;
            let _ = writeln!(
                out,
                "{},-1,{:.6},{:.6},{:.6},{:.6},{:.6},-1,-1,-1",
                d.frame,
                b.x(),
                b.y(),
                b.w(),
                b.h(),
                d.confidence
            );
        }
    }
    out
}

pub fn write_detections(path: &Path, frames: &[Frame]) -> Result<(), IoError> {
    fs::write(path, format_detections(frames)).map_err(io_err(path))
}

/// Formats ground truth rows as `frame,id,x,y,w,h,1,1,1`.
pub fn format_ground_truth(rows: &[MotRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let b = &r.bbox;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},1,1,1",
            r.frame,
            r.id,
            b.x(),
            b.y(),
            b.w(),
            b.h()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub frame: u32,
    pub index: u32,
    pub values: Vec<f32>,
}

pub fn encode_features(dim: usize, records: &[FeatureRecord]) -> Result<Vec<u8>, IoError> {
    let mut seen = HashSet::new();
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * (8 + 4 * dim));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.values.len() != dim {
            return Err(IoError::RecordDimension {
                frame: r.frame,
                index: r.index,
                got: r.values.len(),
                dim,
            });
        }
        if !seen.insert((r.frame, r.index)) {
            return Err(IoError::DuplicateKey {
                frame: r.frame,
                index: r.index,
            });
        }
        buf.extend_from_slice(&r.frame.to_le_bytes());
        buf.extend_from_slice(&r.index.to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_features(path: &Path, dim: usize, records: &[FeatureRecord]) -> Result<(), IoError> {
    let bytes = encode_features(dim, records)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a feature file. Vectors whose norm is off by more than `1e-5` are
/// rescaled to unit length; unit vectors are returned bit-for-bit.
pub fn decode_features(bytes: &[u8]) -> Result<(usize, Vec<FeatureRecord>), IoError> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(IoError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(IoError::BadVersion(bytes[4]));
    }
    let dim = u32_at(bytes, 5) as usize;
    let count = u32_at(bytes, 9) as usize;
    let record_len = 8 + 4 * dim;
    let expected = HEADER_LEN + count * record_len;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IoError::TrailingBytes(bytes.len() - expected));
    }
    let mut seen = HashSet::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        let at = HEADER_LEN + k * record_len;
        let frame = u32_at(bytes, at);
        let index = u32_at(bytes, at + 4);
        if !seen.insert((frame, index)) {
            return Err(IoError::DuplicateKey { frame, index });
        }
        let mut values: Vec<f32> = (0..dim)
            .map(|d| f32::from_le_bytes(bytes[at + 8 + 4 * d..at + 12 + 4 * d].try_into().unwrap()))
            .collect();
        let norm = values
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(IoError::DegenerateFeature { frame, index });
        }
        if (norm - 1.0).abs() > 1e-5 {
            for v in &mut values {
                *v = (*v as f64 / norm) as f32;
            }
        }
        records.push(FeatureRecord {
            frame,
            index,
            values,
        });
    }
    Ok((dim, records))
}

pub fn read_features(path: &Path) -> Result<(usize, Vec<FeatureRecord>), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes)
}

/// In-memory feature table serving as a [`FeatureProvider`].
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    dim: usize,
    table: HashMap<(u32, usize), FeatureVector>,
}

impl FeatureStore {
    pub fn from_records(dim: usize, records: &[FeatureRecord]) -> Result<Self, IoError> {
        let mut table = HashMap::with_capacity(records.len());
        for r in records {
            let f = FeatureVector::from_f32(&r.values).map_err(|_| IoError::DegenerateFeature {
                frame: r.frame,
                index: r.index,
            })?;
            table.insert((r.frame, r.index as usize), f);
        }
        Ok(Self { dim, table })
    }

    pub fn open(path: &Path) -> Result<Self, IoError> {
        let (dim, records) = read_features(path)?;
        Self::from_records(dim, &records)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl FeatureProvider for FeatureStore {
    fn fetch(&self, frame: u32, index: usize) -> Result<Option<FeatureVector>, ProviderError> {
        Ok(self.table.get(&(frame, index)).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_detection_row() {
        let rows = parse_rows("1,-1,10,20,30,40,0.9,-1,-1,-1\n").unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.frame, r.id, r.conf), (1, -1, 0.9));
        assert_eq!(r.bbox, BBox::new(10.0, 20.0, 30.0, 40.0).unwrap());
    }

    #[test]
    fn empty_input_has_no_frames() {
        assert!(group_detections(&parse_rows("").unwrap()).is_empty());
        assert!(group_detections(&parse_rows("\n  \n").unwrap()).is_empty());
    }

    #[test]
    fn zero_width_names_line() {
        let e = parse_rows("1,-1,10,20,0,40,0.9,-1,-1,-1").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 1, .. }));
        let e = parse_rows("1,-1,1,1,1,1,1\n2,-1,1,1,1,x,1").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 2, .. }));
        assert!(parse_rows("0,-1,1,1,1,1,1").is_err());
        assert!(parse_rows("1,-1,1,1").is_err());
    }

    #[test]
    fn groups_by_frame_in_file_order() {
        let text = "2,-1,0,0,1,1,0.5\n1,-1,5,5,1,1,0.7\n2,-1,9,9,1,1,0.8\n";
        let frames = group_detections(&parse_rows(text).unwrap());
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].frame, 1);
        assert_eq!(frames[1].detections[0].index, 0);
        assert_eq!(frames[1].detections[1].index, 1);
        assert_eq!(frames[1].detections[1].bbox.x(), 9.0);
    }

    #[test]
    fn result_line_shape() {
        let row = OutputRow {
            frame: 3,
            id: 7,
            bbox: BBox::new(1.5, 2.0, 3.25, 4.0).unwrap(),
        };
        assert_eq!(
            format_results(&[row]),
            "3,7,1.500000,2.000000,3.250000,4.000000,1,-1,-1,-1\n"
        );
        assert_eq!(format_results(&[]), "");
    }

    #[test]
    fn results_sorted_and_ids_survive() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let rows = vec![
            OutputRow {
                frame: 2,
                id: 1,
                bbox: b,
            },
            OutputRow {
                frame: 1,
                id: 9,
                bbox: b,
            },
            OutputRow {
                frame: 1,
                id: 3,
                bbox: b,
            },
        ];
        let parsed = parse_rows(&format_results(&rows)).unwrap();
        let keys: Vec<(u32, i64)> = parsed.iter().map(|r| (r.frame, r.id)).collect();
        assert_eq!(keys, vec![(1, 3), (1, 9), (2, 1)]);
    }

    #[test]
    fn ground_truth_drops_ignored_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.txt");
        fs::write(&p, "1,1,0,0,5,5,1,1,0.8\n1,2,0,0,5,5,0,7,0.1\n").unwrap();
        let gt = read_ground_truth(&p).unwrap();
        assert_eq!(gt.len(), 1);
        assert_eq!(gt[0].id, 1);
    }

    fn sample_records() -> Vec<FeatureRecord> {
        vec![
            FeatureRecord {
                frame: 1,
                index: 0,
                values: vec![1.0, 0.0, 0.0, 0.0],
            },
            FeatureRecord {
                frame: 1,
                index: 1,
                values: vec![0.0, 0.6, 0.8, 0.0],
            },
            FeatureRecord {
                frame: 2,
                index: 0,
                values: vec![0.5, 0.5, 0.5, 0.5],
            },
        ]
    }

    #[test]
    fn feature_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.feab");
        write_features(&p, 4, &sample_records()).unwrap();
        let (dim, back) = read_features(&p).unwrap();
        assert_eq!(dim, 4);
        for (a, b) in sample_records().iter().zip(&back) {
            assert_eq!((a.frame, a.index), (b.frame, b.index));
            let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn feature_errors() {
        let mut bytes = encode_features(4, &sample_records()).unwrap();
        assert!(matches!(
            decode_features(b"NOPE\x01"),
            Err(IoError::BadMagic)
        ));
        assert_eq!(
            decode_features(b"XEAB").unwrap_err().to_string(),
            "bad magic"
        );
        assert!(matches!(
            decode_features(&bytes[..bytes.len() - 1]),
            Err(IoError::Truncated { .. })
        ));
        let mut dup = sample_records();
        dup[1].frame = 1;
        dup[1].index = 0;
        assert!(matches!(
            encode_features(4, &dup),
            Err(IoError::DuplicateKey { .. })
        ));
        // forge a duplicate on disk: record 1 key := record 0 key
        let rec = 8 + 16;
        bytes[HEADER_LEN + rec + 4..HEADER_LEN + rec + 8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_features(&bytes),
            Err(IoError::DuplicateKey { .. })
        ));
        bytes[4] = 2;
        assert!(matches!(
            decode_features(&bytes),
            Err(IoError::BadVersion(2))
        ));
    }

    #[test]
    fn non_unit_vectors_normalized_on_read() {
        let recs = vec![FeatureRecord {
            frame: 1,
            index: 0,
            values: vec![3.0, 4.0],
        }];
        let (_, back) = decode_features(&encode_features(2, &recs).unwrap()).unwrap();
        assert!((back[0].values[0] - 0.6).abs() < 1e-7);
        assert!((back[0].values[1] - 0.8).abs() < 1e-7);
        let zero = vec![FeatureRecord {
            frame: 1,
            index: 0,
            values: vec![0.0, 0.0],
        }];
        assert!(decode_features(&encode_features(2, &zero).unwrap()).is_err());
    }

    #[test]
    fn store_serves_features() {
        let store = FeatureStore::from_records(4, &sample_records()).unwrap();
        assert_eq!(store.len(), 3);
        assert!(store.fetch(1, 1).unwrap().is_some());
        assert!(store.fetch(9, 0).unwrap().is_none());
    }
}
