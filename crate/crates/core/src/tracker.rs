//! Per-sequence tracking pipeline.
//!
//! Each frame: predict every track, split detections by confidence, classify
//! the confident ones against confirmed tracks, extract features only for
//! risky detections, associate (cascade or fused), then update motion,
//! appearance and lifecycle state.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::appearance::{
    appearance_cost_matrix, cosine_distance, AppearanceError, EmaState, FeatureVector,
};
use crate::assignment::{solve, CostMatrix, INFEASIBLE};
use crate::gating::{
    base_gate_labels, classify, AppearanceOverride, GateConfig, GateMode, GatingError, RiskLabel,
};
use crate::geometry::{iou, BBox};
use crate::motion::{KalmanState, MotionError};

pub const DEFAULT_APPEARANCE_GATE: f64 = 0.4;
pub const DEFAULT_IOU_GATE: f64 = 0.3;
pub const DEFAULT_FUSED_WEIGHT: f64 = 0.5;
pub const DEFAULT_CONF_HIGH: f64 = 0.6;
pub const DEFAULT_MIN_HITS: u32 = 1;
pub const DEFAULT_MAX_AGE: u32 = 30;
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;

/// Largest possible cosine distance between unit vectors.
const MAX_APPEARANCE_COST: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("feature provider failed: {0}")]
pub struct ProviderError(pub String);

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrder { last: u32, got: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Source of appearance features, keyed by frame and per-frame detection
/// index. Must be deterministic for a given key.
pub trait FeatureProvider: Sync {
    fn fetch(&self, frame: u32, index: usize) -> Result<Option<FeatureVector>, ProviderError>;
}

impl<P: FeatureProvider + ?Sized> FeatureProvider for &P {
    fn fetch(&self, frame: u32, index: usize) -> Result<Option<FeatureVector>, ProviderError> {
        (**self).fetch(frame, index)
    }
}

/// Wraps a provider and counts every fetch.
pub struct CountingProvider<P> {
    inner: P,
    count: AtomicU64,
}

impl<P: FeatureProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<P: FeatureProvider> FeatureProvider for CountingProvider<P> {
    fn fetch(&self, frame: u32, index: usize) -> Result<Option<FeatureVector>, ProviderError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.fetch(frame, index)
    }
}

/// Provider that never has features. Useful for IoU-only runs.
pub struct NoFeatures;

impl FeatureProvider for NoFeatures {
    fn fetch(&self, _: u32, _: usize) -> Result<Option<FeatureVector>, ProviderError> {
        Ok(None)
    }
}

impl FeatureProvider for HashMap<(u32, usize), FeatureVector> {
    fn fetch(&self, frame: u32, index: usize) -> Result<Option<FeatureVector>, ProviderError> {
        Ok(self.get(&(frame, index)).cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u32,
    /// Position within the frame; the join key with feature files.
    pub index: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// All detections of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame: u32,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchStrategy {
    /// Appearance-only stage for confirmed tracks, then IoU-only stage.
    Cascade,
    /// One stage on `fused_weight * appearance + (1 - IoU)`.
    Fused,
    /// Appearance disabled: one IoU stage and no feature extraction.
    IouOnly,
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchStrategy::Cascade => "cascade",
            MatchStrategy::Fused => "fused",
            MatchStrategy::IouOnly => "iou",
        })
    }
}

impl FromStr for MatchStrategy {
    type Err = TrackerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cascade" => Ok(MatchStrategy::Cascade),
            "fused" => Ok(MatchStrategy::Fused),
            "iou" | "iou_only" => Ok(MatchStrategy::IouOnly),
            other => Err(TrackerError::Config(format!(
                "unknown match strategy '{other}' (expected cascade, fused or iou)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub strategy: MatchStrategy,
    /// Largest cosine distance accepted by appearance matching.
    pub appearance_gate: f64,
    /// Smallest IoU accepted by IoU matching.
    pub iou_gate: f64,
    pub fused_weight: f64,
    pub conf_high: f64,
    /// Associate low-confidence detections with leftover tracks by IoU.
    pub byte_low: bool,
    pub min_hits: u32,
    pub max_age: u32,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            strategy: MatchStrategy::Cascade,
            appearance_gate: DEFAULT_APPEARANCE_GATE,
            iou_gate: DEFAULT_IOU_GATE,
            fused_weight: DEFAULT_FUSED_WEIGHT,
            conf_high: DEFAULT_CONF_HIGH,
            byte_low: false,
            min_hits: DEFAULT_MIN_HITS,
            max_age: DEFAULT_MAX_AGE,
        }
    }
}

impl MatchConfig {
    /// Defaults for the given strategy; the fused strategy also associates
    /// low-confidence detections.
    pub fn for_strategy(strategy: MatchStrategy) -> Self {
        Self {
            strategy,
            byte_low: strategy == MatchStrategy::Fused,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        let bad = |what: &str| Err(TrackerError::Config(what.to_string()));
        if !(0.0..=MAX_APPEARANCE_COST).contains(&self.appearance_gate) {
            return bad("appearance_gate must lie in [0, 2]");
        }
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return bad("iou_gate must lie in [0, 1]");
        }
        if !(self.fused_weight.is_finite() && self.fused_weight >= 0.0) {
            return bad("fused_weight must be finite and non-negative");
        }
        if !self.conf_high.is_finite() {
            return bad("conf_high must be finite");
        }
        if self.min_hits < 1 {
            return bad("min_hits must be at least 1");
        }
        if self.max_age < 1 {
            return bad("max_age must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputBox {
    /// Kalman posterior after the update.
    Kalman,
    /// The matched detection box.
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub gate: GateConfig,
    pub matching: MatchConfig,
    pub ema_alpha: f64,
    pub feature_decay: bool,
    pub output: OutputBox,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            matching: MatchConfig::default(),
            ema_alpha: DEFAULT_EMA_ALPHA,
            feature_decay: true,
            output: OutputBox::Kalman,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        self.gate.validate()?;
        self.matching.validate()?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(TrackerError::Config("ema_alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub kalman: KalmanState,
    pub ema: Option<EmaState>,
    pub status: TrackStatus,
    /// Detections associated after the one that created the track.
    pub hits: u32,
    pub age: u32,
    pub time_since_update: u32,
}

/// One emitted result row.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRow {
    pub frame: u32,
    pub id: u64,
    pub bbox: BBox,
}

/// How a confident detection takes part in appearance matching this frame.
#[derive(Debug, Clone)]
enum Appearance {
    /// Freshly extracted feature.
    Extracted(FeatureVector),
    /// Borrowed embedding of the candidate track (index into `tracks`).
    Copied(usize),
    /// Maximal cost to every track.
    Saturated,
    /// No appearance information; IoU only.
    Missing,
}

impl Appearance {
    fn cost_to(&self, tracks: &[Track], row: usize) -> Option<f64> {
        let ema = tracks[row].ema.as_ref()?;
        match self {
            Appearance::Extracted(f) => Some(cosine_distance(ema.embedding(), f)),
            Appearance::Copied(c) if *c == row => Some(0.0),
            Appearance::Copied(c) => tracks[*c]
                .ema
                .as_ref()
                .map(|src| cosine_distance(ema.embedding(), src.embedding())),
            Appearance::Saturated => Some(MAX_APPEARANCE_COST),
            Appearance::Missing => None,
        }
    }
}

struct Pending {
    det: usize,
    appearance: Appearance,
    fetched: bool,
}

#[derive(Debug)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u32>,
    fetches: u64,
    high_confidence: u64,
    total_detections: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackerError> {
        config.validate()?;
        Ok(Self {
            config,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            fetches: 0,
            high_confidence: 0,
            total_detections: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Features requested from the provider so far.
    pub fn fetches(&self) -> u64 {
        self.fetches
    }

    /// Confident detections seen so far (the denominator of PDE).
    pub fn high_confidence_detections(&self) -> u64 {
        self.high_confidence
    }

    pub fn total_detections(&self) -> u64 {
        self.total_detections
    }

    /// Processes one frame and returns the confirmed tracks updated in it,
    /// ordered by id. On error the tracker state is left untouched.
    pub fn step(
        &mut self,
        frame: u32,
        detections: &[Detection],
        provider: &dyn FeatureProvider,
    ) -> Result<Vec<OutputRow>, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(TrackerError::OutOfOrder { last, got: frame });
            }
        }
        let first_frame = self.last_frame.is_none();
        let cfg = self.config;
        let mcfg = cfg.matching;
        let use_appearance = mcfg.strategy != MatchStrategy::IouOnly;

        let mut tracks = self.tracks.clone();
        let mut fetches = 0u64;

        // 1. predict
        let mut predicted = Vec::with_capacity(tracks.len());
        for t in &mut tracks {
            t.kalman = t.kalman.predict();
            t.age += 1;
            t.time_since_update += 1;
            predicted.push(t.kalman.to_box().ok());
        }

        // 2. confidence split
        let (high, low): (Vec<usize>, Vec<usize>) =
            (0..detections.len()).partition(|&j| detections[j].confidence >= mcfg.conf_high);

        // 3. classification against confirmed tracks with a usable prediction
        let confirmed: Vec<usize> = (0..tracks.len())
            .filter(|&i| tracks[i].status == TrackStatus::Confirmed && predicted[i].is_some())
            .collect();
        let labels = if use_appearance {
            let det_boxes: Vec<BBox> = high.iter().map(|&j| detections[j].bbox).collect();
            let track_boxes: Vec<BBox> = confirmed.iter().filter_map(|&i| predicted[i]).collect();
            classify(&det_boxes, &track_boxes, &cfg.gate)
        } else {
            vec![RiskLabel::Risky; high.len()]
        };
        let overrides = if cfg.gate.mode == GateMode::BaseGate {
            base_gate_labels(&labels, &cfg.gate)?
        } else {
            vec![AppearanceOverride::Untouched; labels.len()]
        };

        // 4. selective extraction
        let mut pending = Vec::with_capacity(high.len());
        for (k, &j) in high.iter().enumerate() {
            let det = &detections[j];
            let (appearance, fetched) = if !use_appearance {
                (Appearance::Missing, false)
            } else if overrides[k] == AppearanceOverride::Saturated {
                (Appearance::Saturated, false)
            } else {
                match labels[k] {
                    RiskLabel::NonRisky(c) if tracks[confirmed[c]].ema.is_some() => {
                        (Appearance::Copied(confirmed[c]), false)
                    }
                    RiskLabel::NonRisky(_) => (Appearance::Missing, false),
                    RiskLabel::Risky => {
                        fetches += 1;
                        match provider.fetch(det.frame, det.index)? {
                            Some(f) => (Appearance::Extracted(f), true),
                            None => (Appearance::Missing, true),
                        }
                    }
                }
            };
            pending.push(Pending {
                det: j,
                appearance,
                fetched,
            });
        }

        // 5. association; matches are (track index, pending index)
        let mut matches: Vec<(usize, usize)> = Vec::new();
        let mut track_free = vec![true; tracks.len()];
        let mut pending_free = vec![true; pending.len()];
        let iou_cost = |i: usize, j: usize| -> f64 {
            match predicted[i] {
                Some(p) => {
                    let o = iou(&p, &detections[j].bbox);
                    if o >= mcfg.iou_gate && o > 0.0 {
                        1.0 - o
                    } else {
                        INFEASIBLE
                    }
                }
                None => INFEASIBLE,
            }
        };

        match mcfg.strategy {
            MatchStrategy::Cascade => {
                let rows: Vec<usize> = confirmed
                    .iter()
                    .copied()
                    .filter(|&i| tracks[i].ema.is_some())
                    .collect();
                let cols: Vec<usize> = (0..pending.len())
                    .filter(|&p| {
                        matches!(
                            pending[p].appearance,
                            Appearance::Extracted(_) | Appearance::Copied(_)
                        )
                    })
                    .collect();
                let costs = stage_one_costs(&tracks, &rows, &pending, &cols)?;
                for (r, c) in solve(&costs, mcfg.appearance_gate).matches {
                    matches.push((rows[r], cols[c]));
                    track_free[rows[r]] = false;
                    pending_free[cols[c]] = false;
                }

                let rows: Vec<usize> = (0..tracks.len()).filter(|&i| track_free[i]).collect();
                let cols: Vec<usize> = (0..pending.len()).filter(|&p| pending_free[p]).collect();
                let costs = CostMatrix::from_fn(rows.len(), cols.len(), |r, c| {
                    iou_cost(rows[r], pending[cols[c]].det)
                });
                for (r, c) in solve(&costs, 1.0).matches {
                    matches.push((rows[r], cols[c]));
                    track_free[rows[r]] = false;
                    pending_free[cols[c]] = false;
                }
            }
            MatchStrategy::Fused => {
                let costs = CostMatrix::from_fn(tracks.len(), pending.len(), |i, p| {
                    let motion = iou_cost(i, pending[p].det);
                    if motion == INFEASIBLE {
                        return INFEASIBLE;
                    }
                    let app = pending[p].appearance.cost_to(&tracks, i).unwrap_or(0.0);
                    mcfg.fused_weight * app + motion
                });
                let gate = mcfg.fused_weight * MAX_APPEARANCE_COST + 1.0;
                for (i, p) in solve(&costs, gate).matches {
                    matches.push((i, p));
                    track_free[i] = false;
                    pending_free[p] = false;
                }
            }
            MatchStrategy::IouOnly => {
                let costs = CostMatrix::from_fn(tracks.len(), pending.len(), |i, p| {
                    iou_cost(i, pending[p].det)
                });
                for (i, p) in solve(&costs, 1.0).matches {
                    matches.push((i, p));
                    track_free[i] = false;
                    pending_free[p] = false;
                }
            }
        }

        // optional second association of low-confidence detections
        let mut byte_matches: Vec<(usize, usize)> = Vec::new();
        if mcfg.byte_low && !low.is_empty() {
            let rows: Vec<usize> = (0..tracks.len())
                .filter(|&i| track_free[i] && tracks[i].status == TrackStatus::Confirmed)
                .collect();
            let costs =
                CostMatrix::from_fn(rows.len(), low.len(), |r, c| iou_cost(rows[r], low[c]));
            for (r, c) in solve(&costs, 1.0).matches {
                byte_matches.push((rows[r], low[c]));
                track_free[rows[r]] = false;
            }
        }

        // 6. updates
        let mut emitted_box: HashMap<usize, BBox> = HashMap::new();
        let mut fresh_feature = vec![false; tracks.len()];
        let all_matches = matches
            .iter()
            .map(|&(i, p)| (i, pending[p].det, Some(p)))
            .chain(byte_matches.iter().map(|&(i, j)| (i, j, None)));
        for (i, j, p) in all_matches {
            let det_box = detections[j].bbox;
            let t = &mut tracks[i];
            t.kalman = t.kalman.update(&det_box)?;
            t.time_since_update = 0;
            t.hits += 1;
            if t.status == TrackStatus::Tentative && t.hits >= mcfg.min_hits {
                t.status = TrackStatus::Confirmed;
            }
            if let Some(Appearance::Extracted(f)) = p.map(|p| &pending[p].appearance) {
                fresh_feature[i] = true;
                match t.ema.as_mut() {
                    Some(ema) => match ema.update(f) {
                        Ok(_) => {}
                        Err(AppearanceError::Cancelled) => ema.mark_skipped(),
                        Err(e) => return Err(e.into()),
                    },
                    None => t.ema = Some(new_ema(f.clone(), &cfg)?),
                }
            }
            let out = match cfg.output {
                OutputBox::Kalman => t.kalman.to_box()?,
                OutputBox::Detection => det_box,
            };
            emitted_box.insert(i, out);
        }
        for (i, t) in tracks.iter_mut().enumerate() {
            if !fresh_feature[i] {
                if let Some(ema) = t.ema.as_mut() {
                    ema.mark_skipped();
                }
            }
            if t.time_since_update > mcfg.max_age || predicted[i].is_none() {
                t.status = TrackStatus::Deleted;
            }
        }

        // 7. births from unmatched confident detections
        let mut next_id = self.next_id;
        for (p, pend) in pending.iter().enumerate() {
            if !pending_free[p] {
                continue;
            }
            let det = &detections[pend.det];
            let feature = match &pend.appearance {
                Appearance::Extracted(f) => Some(f.clone()),
                _ if use_appearance && !pend.fetched => {
                    fetches += 1;
                    provider.fetch(det.frame, det.index)?
                }
                _ => None,
            };
            let ema = feature.map(|f| new_ema(f, &cfg)).transpose()?;
            let status = if first_frame {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            };
            let idx = tracks.len();
            tracks.push(Track {
                id: next_id,
                kalman: KalmanState::initiate(&det.bbox),
                ema,
                status,
                hits: 0,
                age: 1,
                time_since_update: 0,
            });
            next_id += 1;
            if status == TrackStatus::Confirmed {
                emitted_box.insert(idx, det.bbox);
            }
        }

        // 8. emit
        let mut out: Vec<OutputRow> = emitted_box
            .into_iter()
            .filter(|(i, _)| tracks[*i].status == TrackStatus::Confirmed)
            .map(|(i, bbox)| OutputRow {
                frame,
                id: tracks[i].id,
                bbox,
            })
            .collect();
        out.sort_by_key(|r| r.id);

        tracks.retain(|t| t.status != TrackStatus::Deleted);
        self.tracks = tracks;
        self.next_id = next_id;
        self.last_frame = Some(frame);
        self.fetches += fetches;
        self.high_confidence += high.len() as u64;
        self.total_detections += detections.len() as u64;
        Ok(out)
    }
}

fn new_ema(f: FeatureVector, cfg: &TrackerConfig) -> Result<EmaState, AppearanceError> {
    let ema = EmaState::new(f, cfg.ema_alpha)?;
    Ok(if cfg.feature_decay {
        ema
    } else {
        ema.without_decay()
    })
}

/// Appearance costs for the first cascade stage. Copied detections refer to
/// tracks by their index in `tracks`; those are remapped to stage rows.
fn stage_one_costs(
    tracks: &[Track],
    rows: &[usize],
    pending: &[Pending],
    cols: &[usize],
) -> Result<CostMatrix, AppearanceError> {
    let states: Vec<&EmaState> = rows
        .iter()
        .map(|&i| tracks[i].ema.as_ref().expect("stage rows carry embeddings"))
        .collect();
    let row_of: HashMap<usize, usize> = rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut copies = HashMap::new();
    let mut feats = Vec::with_capacity(cols.len());
    for (c, &p) in cols.iter().enumerate() {
        match &pending[p].appearance {
            Appearance::Extracted(f) => feats.push(Some(f)),
            Appearance::Copied(t) => {
                feats.push(None);
                if let Some(&r) = row_of.get(t) {
                    copies.insert(c, r);
                }
            }
            _ => feats.push(None),
        }
    }
    appearance_cost_matrix(&states, &feats, &copies)
}

/// Counters and timings of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub fetches: u64,
    /// Confident detections, the denominator of PDE.
    pub detections: u64,
    pub total_detections: u64,
    pub frames: u64,
    pub frame_times: Vec<Duration>,
}

impl RunStats {
    /// Percentage of confident detections whose features were extracted.
    pub fn pde(&self) -> Option<f64> {
        (self.detections > 0).then(|| 100.0 * self.fetches as f64 / self.detections as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<OutputRow>,
    pub stats: RunStats,
}

/// Runs a whole sequence. Frames missing between the first and last frame are
/// processed as empty frames.
pub fn run_sequence<P: FeatureProvider + ?Sized>(
    frames: &[Frame],
    provider: &P,
    config: &TrackerConfig,
) -> Result<RunOutput, TrackerError> {
    let counting = CountingProvider::new(provider);
    let mut tracker = Tracker::new(*config)?;
    let mut out = RunOutput::default();
    let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
        return Ok(out);
    };
    let by_frame: HashMap<u32, &Frame> = frames.iter().map(|f| (f.frame, f)).collect();
    if by_frame.len() != frames.len() {
        return Err(TrackerError::Config("duplicate frame numbers".into()));
    }
    for frame in first.frame..=last.frame {
        let dets = by_frame
            .get(&frame)
            .map(|f| f.detections.as_slice())
            .unwrap_or(&[]);
        let start = Instant::now();
        let rows = tracker.step(frame, dets, &counting)?;
        out.stats.frame_times.push(start.elapsed());
        out.rows.extend(rows);
    }
    out.stats.fetches = counting.count();
    debug_assert_eq!(out.stats.fetches, tracker.fetches());
    out.stats.detections = tracker.high_confidence_detections();
    out.stats.total_detections = tracker.total_detections();
    out.stats.frames = out.stats.frame_times.len() as u64;
    Ok(out)
}
