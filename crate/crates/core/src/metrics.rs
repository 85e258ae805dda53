//! Identity metrics (IDF1, ID switches) and the extraction ratio (PDE).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::assignment::{solve, CostMatrix, INFEASIBLE};
use crate::geometry::iou;
use crate::io::MotRow;
use crate::tracker::RunStats;

pub const DEFAULT_IOU_MATCH: f64 = 0.5;

/// Percentage of confident detections whose features were extracted.
pub fn pde(stats: &RunStats) -> Option<f64> {
    stats.pde()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityScore {
    pub idf1: f64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

fn ids(rows: &[MotRow]) -> (Vec<i64>, HashMap<i64, usize>) {
    let mut ids: Vec<i64> = rows.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let index = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    (ids, index)
}

fn by_frame(rows: &[MotRow]) -> BTreeMap<u32, Vec<&MotRow>> {
    let mut frames: BTreeMap<u32, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        frames.entry(r.frame).or_default().push(r);
    }
    frames
}

/// Frames in which each (gt identity, predicted identity) pair overlaps with
/// IoU of at least `iou_match`.
pub fn overlap_counts(gt: &[MotRow], pred: &[MotRow], iou_match: f64) -> Vec<Vec<u64>> {
    let (gt_ids, gt_index) = ids(gt);
    let (pred_ids, pred_index) = ids(pred);
    let mut counts = vec![vec![0u64; pred_ids.len()]; gt_ids.len()];
    let pred_frames = by_frame(pred);
    for (frame, g_rows) in by_frame(gt) {
        let Some(p_rows) = pred_frames.get(&frame) else {
            continue;
        };
        for g in &g_rows {
            for p in p_rows {
                if iou(&g.bbox, &p.bbox) >= iou_match {
                    counts[gt_index[&g.id]][pred_index[&p.id]] += 1;
                }
            }
        }
    }
    counts
}

/// Identity F1 with the globally optimal one-to-one identity mapping.
pub fn idf1(gt: &[MotRow], pred: &[MotRow], iou_match: f64) -> IdentityScore {
    let counts = overlap_counts(gt, pred, iou_match);
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    let costs = CostMatrix::from_fn(rows, cols, |i, j| match counts[i][j] {
        0 => INFEASIBLE,
        m => -(m as f64),
    });
    let idtp: u64 = solve(&costs, 0.0)
        .matches
        .iter()
        .map(|&(i, j)| counts[i][j])
        .sum();
    let idfn = gt.len() as u64 - idtp;
    let idfp = pred.len() as u64 - idtp;
    let denom = 2 * idtp + idfp + idfn;
    let idf1 = if denom == 0 {
        1.0
    } else {
        2.0 * idtp as f64 / denom as f64
    };
    IdentityScore {
        idf1,
        idtp,
        idfp,
        idfn,
    }
}

/// Counts frames where a ground-truth identity is matched to a different
/// predicted identity than the last time it was matched. Per-frame matching
/// maximizes total IoU among pairs with IoU of at least `iou_match`.
pub fn id_switches(gt: &[MotRow], pred: &[MotRow], iou_match: f64) -> u64 {
    let pred_frames = by_frame(pred);
    let mut last: HashMap<i64, i64> = HashMap::new();
    let mut switches = 0;
    for (frame, g_rows) in by_frame(gt) {
        let p_rows = pred_frames.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
        let costs = CostMatrix::from_fn(g_rows.len(), p_rows.len(), |i, j| {
            let o = iou(&g_rows[i].bbox, &p_rows[j].bbox);
            if o >= iou_match && o > 0.0 {
                1.0 - o
            } else {
                INFEASIBLE
            }
        });
        for (i, j) in solve(&costs, 1.0).matches {
            let (g, p) = (g_rows[i].id, p_rows[j].id);
            if let Some(prev) = last.insert(g, p) {
                if prev != p {
                    switches += 1;
                }
            }
        }
    }
    switches
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pde: Option<f64>,
    pub idf1: f64,
    pub id_switches: u64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
    pub fetches: Option<u64>,
    pub detections: Option<u64>,
}

impl EvalReport {
    pub fn compute(
        gt: &[MotRow],
        pred: &[MotRow],
        iou_match: f64,
        stats: Option<&RunStats>,
    ) -> Self {
        let score = idf1(gt, pred, iou_match);
        Self {
            pde: stats.and_then(RunStats::pde),
            idf1: score.idf1,
            id_switches: id_switches(gt, pred, iou_match),
            idtp: score.idtp,
            idfp: score.idfp,
            idfn: score.idfn,
            fetches: stats.map(|s| s.fetches),
            detections: stats.map(|s| s.detections),
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<u64>| v.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        vec![
            ("idf1", format!("{:.6}", self.idf1)),
            ("id_switches", self.id_switches.to_string()),
            ("idtp", self.idtp.to_string()),
            ("idfp", self.idfp.to_string()),
            ("idfn", self.idfn.to_string()),
            ("pde", format_pde(self.pde)),
            ("fetches", opt(self.fetches)),
            ("detections", opt(self.detections)),
        ]
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>12}", "metric", "value");
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{:<12} {:>12}", k, v);
        }
        out
    }
}

pub fn format_pde(pde: Option<f64>) -> String {
    pde.map_or_else(|| "n/a".to_string(), |p| format!("{p:.2}"))
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn row(frame: u32, id: i64, x: f64) -> MotRow {
        MotRow {
            frame,
            id,
            bbox: BBox::new(x, 0.0, 10.0, 20.0).unwrap(),
            conf: 1.0,
        }
    }

    fn split_scene() -> (Vec<MotRow>, Vec<MotRow>) {
        let gt: Vec<MotRow> = (1..=10).map(|f| row(f, 1, 0.0)).collect();
        let pred = (1..=10)
            .map(|f| row(f, if f <= 6 { 100 } else { 200 }, 0.0))
            .collect();
        (gt, pred)
    }

    #[test]
    fn perfect_tracking() {
        let gt: Vec<MotRow> = (1..=5)
            .flat_map(|f| [row(f, 1, 0.0), row(f, 2, 50.0)])
            .collect();
        let s = idf1(&gt, &gt, 0.5);
        assert_eq!(s.idf1, 1.0);
        assert_eq!((s.idtp, s.idfp, s.idfn), (10, 0, 0));
        assert_eq!(id_switches(&gt, &gt, 0.5), 0);
    }

    #[test]
    fn split_identity() {
        let (gt, pred) = split_scene();
        // mapping to the 6-frame id beats the 4-frame one
        let s = idf1(&gt, &pred, 0.5);
        assert_eq!((s.idtp, s.idfp, s.idfn), (6, 4, 4));
        assert!((s.idf1 - 0.6).abs() < 1e-15);
        assert_eq!(id_switches(&gt, &pred, 0.5), 1);
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(idf1(&[], &[], 0.5).idf1, 1.0);
        let (gt, _) = split_scene();
        assert_eq!(idf1(&gt, &[], 0.5).idf1, 0.0);
        assert_eq!(idf1(&[], &gt, 0.5).idf1, 0.0);
    }

    #[test]
    fn crossing_swap_counts_two() {
        // ids 1 and 2 swap predicted labels at frame 4
        let gt: Vec<MotRow> = (1..=6)
            .flat_map(|f| [row(f, 1, 0.0), row(f, 2, 50.0)])
            .collect();
        let pred: Vec<MotRow> = (1..=6)
            .flat_map(|f| {
                let (a, b) = if f < 4 { (7, 8) } else { (8, 7) };
                [row(f, a, 0.0), row(f, b, 50.0)]
            })
            .collect();
        assert_eq!(id_switches(&gt, &pred, 0.5), 2);
    }

    #[test]
    fn symmetric_under_relabel() {
        let gt: Vec<MotRow> = (1..=5)
            .flat_map(|f| [row(f, 1, 0.0), row(f, 2, 50.0)])
            .collect();
        let pred: Vec<MotRow> = gt
            .iter()
            .map(|r| MotRow {
                id: 3 - r.id,
                ..r.clone()
            })
            .collect();
        assert_eq!(idf1(&gt, &pred, 0.5), idf1(&pred, &gt, 0.5));
        assert_eq!(idf1(&gt, &pred, 0.5).idf1, 1.0);
    }

    #[test]
    fn report_formats() {
        let (gt, pred) = split_scene();
        let stats = RunStats {
            fetches: 3,
            detections: 12,
            ..RunStats::default()
        };
        let r = EvalReport::compute(&gt, &pred, 0.5, Some(&stats));
        let kv = parse_kv(&r.to_kv());
        assert_eq!(kv["idf1"], "0.600000");
        assert_eq!(kv["pde"], "25.00");
        assert_eq!(kv["id_switches"], "1");
        assert!(r.to_table().contains("idf1"));
        let r = EvalReport::compute(&gt, &pred, 0.5, None);
        assert_eq!(parse_kv(&r.to_kv())["pde"], "n/a");
    }
}
