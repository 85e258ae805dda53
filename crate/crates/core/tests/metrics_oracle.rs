use proptest::prelude::*;
use selective_mot::geometry::iou;
use selective_mot::io::MotRow;
use selective_mot::metrics::{id_switches, idf1};
use selective_mot::BBox;

fn best_idtp(counts: &[Vec<u64>]) -> u64 {
    fn rec(c: &[Vec<u64>], row: usize, used: u32) -> u64 {
        if row == c.len() {
            return 0;
        }
        let mut best = rec(c, row + 1, used);
        for j in 0..c[row].len() {
            if used & (1 << j) == 0 {
                best = best.max(c[row][j] + rec(c, row + 1, used | (1 << j)));
            }
        }
        best
    }
    rec(counts, 0, 0)
}

fn track_rows(n_ids: i64, frames: u32, seed: Vec<(f64, f64, bool)>) -> Vec<MotRow> {
    let mut rows = Vec::new();
    let mut k = 0;
    for f in 1..=frames {
        for id in 1..=n_ids {
            let (dx, dy, present) = seed[k % seed.len()];
            k += 1;
            if present {
                rows.push(MotRow {
                    frame: f,
                    id,
                    bbox: BBox::new(30.0 * id as f64 + dx, dy, 40.0, 60.0).unwrap(),
                    conf: 1.0,
                });
            }
        }
    }
    rows
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn idf1_matches_bijection_search(
        n_gt in 0i64..=5, n_pred in 0i64..=5, frames in 1u32..10,
        gseed in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, prop::bool::weighted(0.85)), 1..20),
        pseed in prop::collection::vec((-40.0..40.0f64, -20.0..20.0f64, prop::bool::weighted(0.85)), 1..20),
    ) {
        let gt = track_rows(n_gt, frames, gseed);
        let pred = track_rows(n_pred, frames, pseed);
        let mut counts = vec![vec![0u64; n_pred as usize]; n_gt as usize];
        for g in &gt {
            for p in &pred {
                if g.frame == p.frame && iou(&g.bbox, &p.bbox) >= 0.5 {
                    counts[(g.id - 1) as usize][(p.id - 1) as usize] += 1;
                }
            }
        }
        let idtp = best_idtp(&counts);
        let s = idf1(&gt, &pred, 0.5);
        prop_assert_eq!(s.idtp, idtp);
        prop_assert_eq!(s.idfn, gt.len() as u64 - idtp);
        prop_assert_eq!(s.idfp, pred.len() as u64 - idtp);
        let denom = gt.len() + pred.len();
        let want = if denom == 0 { 1.0 } else { 2.0 * idtp as f64 / denom as f64 };
        prop_assert_eq!(s.idf1, want);
        prop_assert_eq!(idf1(&pred, &gt, 0.5).idf1, want);
    }

    #[test]
    fn relabeling_predictions_changes_nothing(
        n in 1i64..=5, frames in 1u32..10, offset in 1i64..100,
        seed in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, prop::bool::weighted(0.8)), 1..20),
    ) {
        let gt = track_rows(n, frames, seed.clone());
        let pred = track_rows(n, frames, seed);
        let relabeled: Vec<MotRow> = pred.iter().map(|r| MotRow { id: r.id + offset, ..r.clone() }).collect();
        prop_assert_eq!(idf1(&gt, &pred, 0.5), idf1(&gt, &relabeled, 0.5));
        prop_assert_eq!(id_switches(&gt, &pred, 0.5), id_switches(&gt, &relabeled, 0.5));
    }
}
