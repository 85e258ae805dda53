//! Risk classification: decides which detections need a fresh appearance
//! feature and which can be matched through their single candidate track.
//!
//! A detection is non-risky when exactly one confirmed track overlaps it with
//! IoU above `theta_iou`, and (with aspect-ratio screening enabled) the
//! IoU-blended aspect-ratio similarity to that track reaches `theta_alpha`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{ars, blended_alpha, iou, BBox};

pub const DEFAULT_THETA_IOU: f64 = 0.2;
pub const DEFAULT_THETA_ALPHA: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatingError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("base-gate overrides requested in {0} mode")]
    WrongMode(GateMode),
    #[error("unknown gate mode '{0}' (expected selective, base or always)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Non-risky detections borrow their candidate's embedding.
    Selective,
    /// Non-risky detections get a saturated appearance cost and are left to
    /// the IoU stage (the earlier single-candidate baseline).
    BaseGate,
    /// Every detection is risky: features are always extracted.
    AlwaysExtract,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Selective => "selective",
            GateMode::BaseGate => "base",
            GateMode::AlwaysExtract => "always",
        })
    }
}

impl FromStr for GateMode {
    type Err = GatingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "selective" => Ok(GateMode::Selective),
            "base" | "base_gate" => Ok(GateMode::BaseGate),
            "always" | "always_extract" => Ok(GateMode::AlwaysExtract),
            other => Err(GatingError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub theta_iou: f64,
    pub theta_alpha: f64,
    pub ars_enabled: bool,
    pub mode: GateMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            theta_iou: DEFAULT_THETA_IOU,
            theta_alpha: DEFAULT_THETA_ALPHA,
            ars_enabled: true,
            mode: GateMode::Selective,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GatingError> {
        for (name, value) in [
            ("theta_iou", self.theta_iou),
            ("theta_alpha", self.theta_alpha),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GatingError::OutOfRange { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskLabel {
    Risky,
    /// Index into the confirmed-track list passed to [`classify`].
    NonRisky(usize),
}

impl RiskLabel {
    pub fn candidate(&self) -> Option<usize> {
        match self {
            RiskLabel::Risky => None,
            RiskLabel::NonRisky(c) => Some(*c),
        }
    }
}

/// Labels every detection against the predicted boxes of confirmed tracks.
pub fn classify(dets: &[BBox], confirmed: &[BBox], cfg: &GateConfig) -> Vec<RiskLabel> {
    if cfg.mode == GateMode::AlwaysExtract {
        return vec![RiskLabel::Risky; dets.len()];
    }
    dets.iter()
        .map(|d| {
            let mut candidate = None;
            for (t, tb) in confirmed.iter().enumerate() {
                let overlap = iou(d, tb);
                if overlap > cfg.theta_iou {
                    if candidate.is_some() {
                        return RiskLabel::Risky;
                    }
                    candidate = Some((t, overlap));
                }
            }
            let Some((c, overlap)) = candidate else {
                return RiskLabel::Risky;
            };
            if cfg.ars_enabled {
                let v = ars(d, &confirmed[c]);
                // iou and v are in [0, 1] by construction
                let alpha = blended_alpha(overlap, v).unwrap_or(0.0);
                if alpha < cfg.theta_alpha {
                    return RiskLabel::Risky;
                }
            }
            RiskLabel::NonRisky(c)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppearanceOverride {
    Untouched,
    /// Maximal appearance cost against every track.
    Saturated,
}

/// In base-gate mode, non-risky detections are pushed out of appearance
/// matching entirely.
pub fn base_gate_labels(
    labels: &[RiskLabel],
    cfg: &GateConfig,
) -> Result<Vec<AppearanceOverride>, GatingError> {
    if cfg.mode != GateMode::BaseGate {
        return Err(GatingError::WrongMode(cfg.mode));
    }
    Ok(labels
        .iter()
        .map(|l| match l {
            RiskLabel::Risky => AppearanceOverride::Untouched,
            RiskLabel::NonRisky(_) => AppearanceOverride::Saturated,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn no_tracks_all_risky() {
        let dets = [bb(0.0, 0.0, 10.0, 20.0), bb(50.0, 0.0, 10.0, 20.0)];
        assert_eq!(
            classify(&dets, &[], &GateConfig::default()),
            vec![RiskLabel::Risky; 2]
        );
    }

    #[test]
    fn sole_candidate_same_aspect_non_risky() {
        let track = bb(0.0, 0.0, 10.0, 10.0);
        let det = bb(1.0, 0.0, 10.0, 10.0);
        let overlap = iou(&det, &track);
        assert!((overlap - 9.0 / 11.0).abs() < 1e-12);
        let alpha = blended_alpha(overlap, ars(&det, &track)).unwrap();
        assert!(alpha >= 0.6);
        let cfg = GateConfig::default();
        assert_eq!(
            classify(&[det], &[track], &cfg),
            vec![RiskLabel::NonRisky(0)]
        );
    }

    #[test]
    fn exact_iou_point_eight_example() {
        // 10x10 track, detection shifted so that IoU = 0.8 exactly
        let track = bb(0.0, 0.0, 10.0, 10.0);
        let shift = 10.0 / 9.0;
        let det = bb(shift, 0.0, 10.0, 10.0);
        let overlap = iou(&det, &track);
        assert!((overlap - 0.8).abs() < 1e-12);
        let alpha = blended_alpha(overlap, 1.0).unwrap();
        assert!((alpha - 1.0 / 1.2).abs() < 1e-12);
        assert_eq!(
            classify(&[det], &[track], &GateConfig::default()),
            vec![RiskLabel::NonRisky(0)]
        );
    }

    #[test]
    fn two_candidates_risky() {
        // detection 10x10 at origin; tracks give IoU 0.5 and 0.4
        let det = bb(0.0, 0.0, 10.0, 10.0);
        let t_half = bb(0.0, 0.0, 10.0, 5.0);
        let t_four = bb(0.0, 0.0, 10.0, 4.0);
        assert!((iou(&det, &t_half) - 0.5).abs() < 1e-12);
        assert!((iou(&det, &t_four) - 0.4).abs() < 1e-12);
        let cfg = GateConfig {
            theta_iou: 0.3,
            ..GateConfig::default()
        };
        assert_eq!(
            classify(&[det], &[t_half, t_four], &cfg),
            vec![RiskLabel::Risky]
        );
    }

    #[test]
    fn threshold_is_strict() {
        let track = bb(0.0, 0.0, 10.0, 10.0);
        let det = bb(0.0, 0.0, 10.0, 5.0);
        let cfg = GateConfig {
            theta_iou: 0.5,
            ars_enabled: false,
            ..GateConfig::default()
        };
        assert_eq!(classify(&[det], &[track], &cfg), vec![RiskLabel::Risky]);
    }

    #[test]
    fn aspect_mismatch_is_risky() {
        let track = bb(0.0, 0.0, 40.0, 100.0);
        let det = bb(0.0, 0.0, 100.0, 40.0);
        let cfg = GateConfig::default();
        assert_eq!(classify(&[det], &[track], &cfg), vec![RiskLabel::Risky]);
        let no_ars = GateConfig {
            ars_enabled: false,
            ..cfg
        };
        assert_eq!(
            classify(&[det], &[track], &no_ars),
            vec![RiskLabel::NonRisky(0)]
        );
    }

    #[test]
    fn always_mode_is_all_risky() {
        let track = bb(0.0, 0.0, 10.0, 10.0);
        let cfg = GateConfig {
            mode: GateMode::AlwaysExtract,
            ..GateConfig::default()
        };
        assert_eq!(
            classify(&[track, track], &[track], &cfg),
            vec![RiskLabel::Risky; 2]
        );
    }

    #[test]
    fn base_gate_overrides() {
        let cfg = GateConfig {
            mode: GateMode::BaseGate,
            ..GateConfig::default()
        };
        let labels = [RiskLabel::NonRisky(0), RiskLabel::Risky];
        assert_eq!(
            base_gate_labels(&labels, &cfg).unwrap(),
            vec![AppearanceOverride::Saturated, AppearanceOverride::Untouched]
        );
        assert_eq!(
            base_gate_labels(&[RiskLabel::Risky; 3], &cfg).unwrap(),
            vec![AppearanceOverride::Untouched; 3]
        );
        assert!(base_gate_labels(&labels, &GateConfig::default()).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "always".parse::<GateMode>().unwrap(),
            GateMode::AlwaysExtract
        );
        assert_eq!("base".parse::<GateMode>().unwrap(), GateMode::BaseGate);
        assert!("nope".parse::<GateMode>().is_err());
        for m in [
            GateMode::Selective,
            GateMode::BaseGate,
            GateMode::AlwaysExtract,
        ] {
            assert_eq!(m.to_string().parse::<GateMode>().unwrap(), m);
        }
    }
}
