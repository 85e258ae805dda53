//! Deterministic synthetic scenes: detections, appearance features and
//! ground truth in the same formats the tracker reads from disk.
//!
//! Randomness comes from ChaCha8 seeded with the scenario seed and Gaussian
//! samples from `rand_distr::StandardNormal`. Per frame, targets are visited
//! in order and each visible target draws its box jitter (x, y, w, h), then
//! its feature noise, then its confidence. Identical scenarios therefore
//! produce identical files on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::io::{
    encode_features, format_detections, format_ground_truth, group_detections, parse_rows,
    FeatureRecord, FeatureStore, IoError, MotRow,
};
use crate::tracker::Frame;

pub const DET_FILE: &str = "det.txt";
pub const FEATURE_FILE: &str = "features.feab";
pub const GT_FILE: &str = "gt.txt";

pub const PRESETS: &[&str] = &["crossing", "parade", "enter_exit", "dense_grid"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("target {target}: degenerate box at keyframe {frame}")]
    DegenerateBox { target: usize, frame: u32 },
    #[error("target {target}: box at keyframe {frame} leaves the {width}x{height} scene")]
    OutOfBounds {
        target: usize,
        frame: u32,
        width: f64,
        height: f64,
    },
    #[error("target {0}: keyframes must be non-empty with increasing frames")]
    BadKeyframes(usize),
    #[error("target {0}: identity direction must be non-zero with the scenario dimension")]
    BadIdentity(usize),
    #[error("targets {0} and {1} share an identity direction")]
    DuplicateIdentity(usize, usize),
    #[error("unknown preset '{name}' (available: {available})")]
    UnknownPreset { name: String, available: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    /// Identity direction; normalized feature = direction + noise.
    pub identity: Vec<f64>,
    /// `(frame, [x, y, w, h])`; the box is interpolated linearly between
    /// keyframes and the target exists from the first to the last keyframe.
    pub keyframes: Vec<(u32, [f64; 4])>,
    /// Inclusive frame intervals without detections.
    pub occlusions: Vec<(u32, u32)>,
}

impl TargetSpec {
    pub fn span(&self) -> (u32, u32) {
        (
            self.keyframes[0].0,
            self.keyframes[self.keyframes.len() - 1].0,
        )
    }

    /// Ground-truth box at `frame`, if the target exists then.
    pub fn box_at(&self, frame: u32) -> Option<[f64; 4]> {
        let (first, last) = self.span();
        if frame < first || frame > last {
            return None;
        }
        let k = self.keyframes.iter().rposition(|(f, _)| *f <= frame)?;
        let (f0, b0) = self.keyframes[k];
        if f0 == frame || k + 1 == self.keyframes.len() {
            return Some(b0);
        }
        let (f1, b1) = self.keyframes[k + 1];
        let t = (frame - f0) as f64 / (f1 - f0) as f64;
        Some(std::array::from_fn(|d| b0[d] + t * (b1[d] - b0[d])))
    }

    pub fn occluded(&self, frame: u32) -> bool {
        self.occlusions
            .iter()
            .any(|&(a, b)| a <= frame && frame <= b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub frames: u32,
    pub width: f64,
    pub height: f64,
    pub feature_dim: usize,
    /// Standard deviation of box jitter in pixels.
    pub box_jitter: f64,
    /// Standard deviation of per-component feature noise.
    pub feature_jitter: f64,
    /// Detection confidences are uniform in this range.
    pub confidence: (f64, f64),
    pub targets: Vec<TargetSpec>,
}

/// Generated scene in memory, exactly as it reads back from disk.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub det_text: String,
    pub gt_text: String,
    pub feature_bytes: Vec<u8>,
    pub detections: Vec<Frame>,
    pub ground_truth: Vec<MotRow>,
    pub features: FeatureStore,
}

fn basis(dim: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (t, target) in self.targets.iter().enumerate() {
            if target.keyframes.is_empty()
                || target.keyframes.windows(2).any(|w| w[0].0 >= w[1].0)
                || target.keyframes[0].0 < 1
            {
                return Err(SynthError::BadKeyframes(t));
            }
            for &(frame, [x, y, w, h]) in &target.keyframes {
                if BBox::new(x, y, w, h).is_err() {
                    return Err(SynthError::DegenerateBox { target: t, frame });
                }
                if x < 0.0 || y < 0.0 || x + w > self.width || y + h > self.height {
                    return Err(SynthError::OutOfBounds {
                        target: t,
                        frame,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
            let id = &target.identity;
            let norm = id.iter().map(|v| v * v).sum::<f64>().sqrt();
            if id.len() != self.feature_dim || !(norm > 0.0 && norm.is_finite()) {
                return Err(SynthError::BadIdentity(t));
            }
        }
        for a in 0..self.targets.len() {
            for b in a + 1..self.targets.len() {
                let (u, v) = (&self.targets[a].identity, &self.targets[b].identity);
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if dot / (nu * nv) > 1.0 - 1e-9 {
                    return Err(SynthError::DuplicateIdentity(a, b));
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthOutput, SynthError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut det_rows = Vec::new();
        let mut gt_rows = Vec::new();
        let mut records = Vec::new();
        for frame in 1..=self.frames {
            let mut index = 0u32;
            for (t, target) in self.targets.iter().enumerate() {
                let Some([x, y, w, h]) = target.box_at(frame) else {
                    continue;
                };
                if target.occluded(frame) {
                    continue;
                }
                gt_rows.push(MotRow {
                    frame,
                    id: t as i64 + 1,
                    bbox: BBox::new(x, y, w, h).expect("validated keyframes"),
                    conf: 1.0,
                });
                let mut noise = || -> f64 { rng.sample::<f64, _>(StandardNormal) };
                let j = self.box_jitter;
                let (dx, dy, dw, dh) = (noise() * j, noise() * j, noise() * j, noise() * j);
                let jittered = BBox::new(x + dx, y + dy, (w + dw).max(1.0), (h + dh).max(1.0))
                    .expect("finite jitter");
                let mut feature: Vec<f64> = target
                    .identity
                    .iter()
                    .map(|v| v + self.feature_jitter * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    feature.iter_mut().for_each(|v| *v /= norm);
                } else {
                    feature = target.identity.clone();
                }
                let (lo, hi) = self.confidence;
                let conf = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                };
                det_rows.push(MotRow {
                    frame,
                    id: -1,
                    bbox: jittered,
                    conf,
                });
                records.push(FeatureRecord {
                    frame,
                    index,
                    values: feature.iter().map(|&v| v as f32).collect(),
                });
                index += 1;
            }
        }

        let det_text = format_detections(&group_detections(&det_rows));
        let gt_text = format_ground_truth(&gt_rows);
        let feature_bytes = encode_features(self.feature_dim, &records)?;
        let detections = group_detections(&parse_rows(&det_text)?);
        let ground_truth = parse_rows(&gt_text)?;
        let (dim, decoded) = crate::io::decode_features(&feature_bytes)?;
        let features = FeatureStore::from_records(dim, &decoded)?;
        Ok(SynthOutput {
            det_text,
            gt_text,
            feature_bytes,
            detections,
            ground_truth,
            features,
        })
    }

    /// Writes `det.txt`, `features.feab` and `gt.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SynthOutput, SynthError> {
        let out = self.generate()?;
        let write = |name: &str, bytes: &[u8]| -> Result<(), SynthError> {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|source| SynthError::Write { path, source })
        };
        fs::create_dir_all(dir).map_err(|source| SynthError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        write(DET_FILE, out.det_text.as_bytes())?;
        write(FEATURE_FILE, &out.feature_bytes)?;
        write(GT_FILE, out.gt_text.as_bytes())?;
        Ok(out)
    }
}

/// Two targets: a large one standing still and a smaller one that walks in
/// behind it, is hidden for five frames while the boxes overlap heavily, and
/// walks back out the way it came. Constant-velocity prediction carries the
/// hidden track the wrong way, so only appearance recovers its identity.
pub fn crossing_scene() -> Scenario {
    let dim = 16;
    let large = [300.0, 100.0, 60.0, 150.0];
    // small target turns around at frame 30, 45 px into the large one
    let small = |x: f64| [x, 110.0, 50.0, 130.0];
    Scenario {
        name: "crossing".into(),
        seed: 0,
        frames: 60,
        width: 800.0,
        height: 480.0,
        feature_dim: dim,
        box_jitter: 1.0,
        feature_jitter: 0.05,
        confidence: (0.8, 0.95),
        targets: vec![
            TargetSpec {
                identity: basis(dim, 0),
                keyframes: vec![(1, large), (60, large)],
                occlusions: vec![],
            },
            TargetSpec {
                identity: basis(dim, 1),
                keyframes: vec![(1, small(605.0)), (30, small(315.0)), (60, small(615.0))],
                occlusions: vec![(28, 32)],
            },
        ],
    }
}

/// Ten side-by-side targets walking down in parallel lanes for 200 frames.
pub fn parade(n: usize) -> Scenario {
    let dim = n.max(2).next_power_of_two().max(16);
    Scenario {
        name: "parade".into(),
        seed: 1,
        frames: 200,
        width: 80.0 * n as f64 + 100.0,
        height: 480.0,
        feature_dim: dim,
        box_jitter: 1.0,
        feature_jitter: 0.05,
        confidence: (0.7, 0.95),
        targets: (0..n)
            .map(|k| {
                let x = 50.0 + 80.0 * k as f64;
                TargetSpec {
                    identity: basis(dim, k),
                    keyframes: vec![(1, [x, 50.0, 40.0, 100.0]), (200, [x, 249.0, 40.0, 100.0])],
                    occlusions: vec![],
                }
            })
            .collect(),
    }
}

/// Targets with staggered lifetimes crossing the scene horizontally.
pub fn enter_exit() -> Scenario {
    let dim = 16;
    let lane = |k: usize, start: u32, end: u32, from: f64, to: f64| TargetSpec {
        identity: basis(dim, k),
        keyframes: vec![
            (start, [from, 40.0 + 120.0 * k as f64, 40.0, 100.0]),
            (end, [to, 40.0 + 120.0 * k as f64, 40.0, 100.0]),
        ],
        occlusions: vec![],
    };
    Scenario {
        name: "enter_exit".into(),
        seed: 2,
        frames: 120,
        width: 800.0,
        height: 540.0,
        feature_dim: dim,
        box_jitter: 1.0,
        feature_jitter: 0.05,
        confidence: (0.7, 0.95),
        targets: vec![
            lane(0, 1, 60, 10.0, 600.0),
            lane(1, 20, 100, 700.0, 20.0),
            lane(2, 40, 120, 100.0, 740.0),
            lane(3, 70, 120, 500.0, 200.0),
        ],
    }
}

/// A 4x4 grid of heavily overlapping targets swaying left and right.
pub fn dense_grid() -> Scenario {
    let dim = 32;
    let mut targets = Vec::new();
    for row in 0..4 {
        for col in 0..4 {
            let k = row * 4 + col;
            let x = 40.0 + 22.0 * col as f64;
            let y = 20.0 + 110.0 * row as f64;
            let b = |dx: f64| [x + dx, y, 40.0, 100.0];
            targets.push(TargetSpec {
                identity: basis(dim, k),
                keyframes: vec![(1, b(0.0)), (40, b(20.0)), (80, b(0.0))],
                occlusions: if k % 5 == 0 { vec![(30, 34)] } else { vec![] },
            });
        }
    }
    Scenario {
        name: "dense_grid".into(),
        seed: 3,
        frames: 80,
        width: 400.0,
        height: 480.0,
        feature_dim: dim,
        box_jitter: 1.5,
        feature_jitter: 0.1,
        confidence: (0.5, 0.95),
        targets,
    }
}

pub fn preset(name: &str) -> Result<Scenario, SynthError> {
    match name {
        "crossing" => Ok(crossing_scene()),
        "parade" => Ok(parade(10)),
        "enter_exit" => Ok(enter_exit()),
        "dense_grid" => Ok(dense_grid()),
        other => Err(SynthError::UnknownPreset {
            name: other.to_string(),
            available: PRESETS.join(", "),
        }),
    }
}

/// Random scenario with 1..=`max_targets` linearly moving targets and random
/// occlusion windows.
pub fn random_scenario(seed: u64, max_targets: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let (width, height) = (640.0, 480.0);
    let frames = rng.random_range(10..=60);
    let dim = 8;
    let n = rng.random_range(1..=max_targets.max(1));
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let corner = |rng: &mut ChaCha8Rng| {
            let w: f64 = rng.random_range(10.0..80.0);
            let h: f64 = rng.random_range(20.0..160.0);
            [
                rng.random_range(0.0..width - w),
                rng.random_range(0.0..height - h),
                w,
                h,
            ]
        };
        let start = rng.random_range(1..=frames);
        let end = rng.random_range(start..=frames);
        let mut keyframes = vec![(start, corner(&mut rng))];
        if end > start {
            keyframes.push((end, corner(&mut rng)));
        }
        let occlusions = if rng.random_bool(0.3) {
            let a = rng.random_range(start..=end);
            vec![(a, rng.random_range(a..=end))]
        } else {
            vec![]
        };
        let identity: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        targets.push(TargetSpec {
            identity,
            keyframes,
            occlusions,
        });
    }
    Scenario {
        name: format!("random-{seed}"),
        seed,
        frames,
        width,
        height,
        feature_dim: dim,
        box_jitter: rng.random_range(0.0..2.0),
        feature_jitter: rng.random_range(0.0..0.2),
        confidence: (0.3, 1.0),
        targets,
    }
}

/// Peak IoU between two targets' ground-truth boxes.
pub fn peak_iou(sc: &Scenario, a: usize, b: usize) -> f64 {
    (1..=sc.frames)
        .filter_map(|f| {
            let ba = sc.targets[a].box_at(f)?;
            let bb = sc.targets[b].box_at(f)?;
            let ba = BBox::new(ba[0], ba[1], ba[2], ba[3]).ok()?;
            let bb = BBox::new(bb[0], bb[1], bb[2], bb[3]).ok()?;
            Some(iou(&ba, &bb))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(mut sc: Scenario) -> Scenario {
        sc.box_jitter = 0.0;
        sc.feature_jitter = 0.0;
        sc
    }

    #[test]
    fn zero_noise_dets_equal_gt() {
        let out = noiseless(parade(3)).generate().unwrap();
        let dets: Vec<_> = out
            .detections
            .iter()
            .flat_map(|f| f.detections.iter())
            .collect();
        assert_eq!(dets.len(), out.ground_truth.len());
        for (d, g) in dets.iter().zip(&out.ground_truth) {
            assert_eq!(d.bbox, g.bbox);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = crossing_scene().generate().unwrap();
        let b = crossing_scene().generate().unwrap();
        assert_eq!(a.det_text, b.det_text);
        assert_eq!(a.gt_text, b.gt_text);
        assert_eq!(a.feature_bytes, b.feature_bytes);
        let mut other = crossing_scene();
        other.seed = 99;
        assert_ne!(other.generate().unwrap().det_text, a.det_text);
    }

    #[test]
    fn occlusion_window_drops_rows() {
        let mut sc = parade(2);
        sc.targets[1].occlusions = vec![(10, 20)];
        let out = sc.generate().unwrap();
        for g in &out.ground_truth {
            assert!(!(g.id == 2 && (10..=20).contains(&g.frame)));
        }
        for f in &out.detections {
            let expected = if (10..=20).contains(&f.frame) { 1 } else { 2 };
            assert_eq!(f.detections.len(), expected);
        }
    }

    #[test]
    fn degenerate_and_out_of_bounds_rejected() {
        let mut sc = parade(1);
        sc.targets[0].keyframes[0].1[2] = 0.0;
        assert!(matches!(
            sc.generate(),
            Err(SynthError::DegenerateBox { .. })
        ));
        let mut sc = parade(1);
        sc.targets[0].keyframes[1].1[1] = 1000.0;
        assert!(matches!(sc.generate(), Err(SynthError::OutOfBounds { .. })));
        let mut sc = parade(2);
        sc.targets[1].identity = sc.targets[0].identity.clone();
        assert!(matches!(
            sc.generate(),
            Err(SynthError::DuplicateIdentity(0, 1))
        ));
    }

    #[test]
    fn crossing_construction() {
        let sc = crossing_scene();
        let out = sc.generate().unwrap();
        let present = |frame: u32, id: i64| {
            out.ground_truth
                .iter()
                .any(|g| g.frame == frame && g.id == id)
        };
        for f in [1, 27, 33, 60] {
            assert!(present(f, 1) && present(f, 2));
        }
        assert!(!present(30, 2));
        let peak = peak_iou(&sc, 0, 1);
        // overlap 45 px x 130 px against a 60x150 and a 50x130 box
        let oracle = 45.0 * 130.0 / (9000.0 + 6500.0 - 45.0 * 130.0);
        assert!((peak - oracle).abs() < 1e-12);
        assert!(peak > 0.5);
        let dot: f64 = sc.targets[0]
            .identity
            .iter()
            .zip(&sc.targets[1].identity)
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(1.0 - dot, 1.0);
    }

    #[test]
    fn presets_by_name() {
        for name in PRESETS {
            let sc = preset(name).unwrap();
            assert_eq!(&sc.name, name);
            sc.generate().unwrap();
        }
        let err = preset("nope").unwrap_err().to_string();
        assert!(err.contains("crossing") && err.contains("dense_grid"));
    }

    #[test]
    fn interpolation() {
        let t = TargetSpec {
            identity: vec![1.0],
            keyframes: vec![(1, [0.0, 0.0, 10.0, 10.0]), (11, [100.0, 0.0, 10.0, 10.0])],
            occlusions: vec![],
        };
        assert_eq!(t.box_at(6).unwrap()[0], 50.0);
        assert_eq!(t.box_at(11).unwrap()[0], 100.0);
        assert!(t.box_at(12).is_none());
        assert!(t.box_at(0).is_none());
    }
}
