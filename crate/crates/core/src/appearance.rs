//! Appearance embeddings: unit feature vectors, the per-track moving average
//! with feature decay, and the appearance cost matrix used for matching.

use std::collections::HashMap;

use thiserror::Error;

use crate::assignment::CostMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppearanceError {
    #[error("feature vector is empty, zero or non-finite")]
    Degenerate,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("EMA weight {0} must lie strictly between 0 and 1")]
    BadAlpha(f64),
    #[error("blended embedding cancelled to zero")]
    Cancelled,
    #[error("detection {0} has neither a feature nor a copy source")]
    MissingFeature(usize),
    #[error("detection {det} copies unknown track {track}")]
    BadCopy { det: usize, track: usize },
}

/// L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `values` to unit length.
    pub fn new(values: Vec<f64>) -> Result<Self, AppearanceError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(AppearanceError::Degenerate);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(AppearanceError::Degenerate);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, AppearanceError> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// `1 - a.b`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &FeatureVector, b: &FeatureVector) -> f64 {
    (1.0 - a.dot(b)).clamp(0.0, 2.0)
}

/// Moving-average embedding of one track.
///
/// `effective_alpha` is the weight the next update puts on the current
/// embedding. It is multiplied by `base_alpha` for every frame without a new
/// feature so older evidence keeps fading even when extraction is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    embedding: FeatureVector,
    base_alpha: f64,
    effective_alpha: f64,
    frames_since_feature: u32,
    decay: bool,
}

impl EmaState {
    pub fn new(feature: FeatureVector, base_alpha: f64) -> Result<Self, AppearanceError> {
        if !(base_alpha > 0.0 && base_alpha < 1.0) {
            return Err(AppearanceError::BadAlpha(base_alpha));
        }
        Ok(Self {
            embedding: feature,
            base_alpha,
            effective_alpha: base_alpha,
            frames_since_feature: 0,
            decay: true,
        })
    }

    /// Disables feature decay: skipped frames leave the blend weight at
    /// `base_alpha` (plain EMA over extracted features only).
    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self.effective_alpha = self.base_alpha;
        self
    }

    pub fn embedding(&self) -> &FeatureVector {
        &self.embedding
    }

    pub fn base_alpha(&self) -> f64 {
        self.base_alpha
    }

    pub fn effective_alpha(&self) -> f64 {
        self.effective_alpha
    }

    pub fn frames_since_feature(&self) -> u32 {
        self.frames_since_feature
    }

    pub fn decay_enabled(&self) -> bool {
        self.decay
    }

    /// Records a frame in which the track received no new feature.
    pub fn mark_skipped(&mut self) {
        self.frames_since_feature += 1;
        if self.decay {
            self.effective_alpha *= self.base_alpha;
        }
    }

    /// Blends in a freshly extracted feature and returns the weight that was
    /// applied to the previous embedding. On error the state is unchanged.
    pub fn update(&mut self, feature: &FeatureVector) -> Result<f64, AppearanceError> {
        if feature.dim() != self.embedding.dim() {
            return Err(AppearanceError::Dimension {
                expected: self.embedding.dim(),
                got: feature.dim(),
            });
        }
        let w = self.effective_alpha;
        let blended: Vec<f64> = self
            .embedding
            .0
            .iter()
            .zip(&feature.0)
            .map(|(e, f)| w * e + (1.0 - w) * f)
            .collect();
        let embedding = FeatureVector::new(blended).map_err(|_| AppearanceError::Cancelled)?;
        self.embedding = embedding;
        self.effective_alpha = self.base_alpha;
        self.frames_since_feature = 0;
        Ok(w)
    }
}

/// Appearance cost between tracks (rows) and detections (columns).
///
/// A detection either carries its own feature or, through `copies`, borrows
/// the embedding of a candidate track: its distance to that track is exactly
/// zero and to every other track it is the inter-track embedding distance.
pub fn appearance_cost_matrix(
    tracks: &[&EmaState],
    dets: &[Option<&FeatureVector>],
    copies: &HashMap<usize, usize>,
) -> Result<CostMatrix, AppearanceError> {
    let mut sources = Vec::with_capacity(dets.len());
    for (j, det) in dets.iter().enumerate() {
        let src = match (det, copies.get(&j)) {
            (_, Some(&c)) => {
                if c >= tracks.len() {
                    return Err(AppearanceError::BadCopy { det: j, track: c });
                }
                Err(c)
            }
            (Some(f), None) => Ok(*f),
            (None, None) => return Err(AppearanceError::MissingFeature(j)),
        };
        sources.push(src);
    }
    Ok(CostMatrix::from_fn(
        tracks.len(),
        dets.len(),
        |i, j| match sources[j] {
            Ok(f) => cosine_distance(tracks[i].embedding(), f),
            Err(c) if c == i => 0.0,
            Err(c) => cosine_distance(tracks[i].embedding(), tracks[c].embedding()),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn norm(f: &FeatureVector) -> f64 {
        f.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn init_examples() {
        let s = EmaState::new(fv(&[1.0, 0.0, 0.0]), 0.9).unwrap();
        assert_eq!(s.embedding().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(s.effective_alpha(), 0.9);
        assert_eq!(s.frames_since_feature(), 0);
        assert!(EmaState::new(fv(&[1.0]), 1.0).is_err());
        assert!(EmaState::new(fv(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn normalizes_on_construction() {
        let f = fv(&[3.0, 4.0]);
        assert!((norm(&f) - 1.0).abs() < 1e-12);
        assert!(FeatureVector::new(vec![0.0, 0.0]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn skip_examples() {
        let mut s = EmaState::new(fv(&[1.0, 0.0]), 0.9).unwrap();
        let before = s.embedding().clone();
        s.mark_skipped();
        assert!((s.effective_alpha() - 0.81).abs() < 1e-15);
        s.mark_skipped();
        s.mark_skipped();
        assert!((s.effective_alpha() - 0.6561).abs() < 1e-15);
        assert_eq!(s.frames_since_feature(), 3);
        assert_eq!(s.embedding(), &before);
    }

    #[test]
    fn update_examples() {
        let mut s = EmaState::new(fv(&[1.0, 0.0]), 0.9).unwrap();
        let w = s.update(&fv(&[0.0, 1.0])).unwrap();
        assert_eq!(w, 0.9);
        // normalize((0.9, 0.1))
        let e = s.embedding().as_slice();
        assert!((e[0] - 0.993_883_734_673_618_9).abs() < 1e-12);
        assert!((e[1] - 0.110_431_526_074_846_5).abs() < 1e-12);

        let mut s = EmaState::new(fv(&[0.6, 0.8]), 0.9).unwrap();
        s.update(&fv(&[0.6, 0.8])).unwrap();
        assert!((s.embedding().as_slice()[0] - 0.6).abs() < 1e-15);

        let mut s = EmaState::new(fv(&[1.0, 0.0]), 0.9).unwrap();
        s.mark_skipped();
        s.mark_skipped();
        let w = s.update(&fv(&[0.0, 1.0])).unwrap();
        assert!((w - 0.729).abs() < 1e-15);
        assert_eq!(s.effective_alpha(), 0.9);
        assert_eq!(s.frames_since_feature(), 0);
    }

    #[test]
    fn cancellation_keeps_state() {
        let mut s = EmaState::new(fv(&[1.0, 0.0]), 0.5).unwrap();
        let before = s.clone();
        assert_eq!(s.update(&fv(&[-1.0, 0.0])), Err(AppearanceError::Cancelled));
        assert_eq!(s, before);
        assert!(matches!(
            s.update(&fv(&[1.0, 0.0, 0.0])),
            Err(AppearanceError::Dimension { .. })
        ));
    }

    #[test]
    fn no_decay_freezes_weight() {
        let mut s = EmaState::new(fv(&[1.0, 0.0]), 0.9).unwrap().without_decay();
        s.mark_skipped();
        s.mark_skipped();
        assert_eq!(s.update(&fv(&[0.0, 1.0])).unwrap(), 0.9);
    }

    #[test]
    fn cosine_examples() {
        let a = fv(&[1.0, 0.0]);
        assert_eq!(cosine_distance(&a, &a), 0.0);
        assert_eq!(cosine_distance(&a, &fv(&[0.0, 1.0])), 1.0);
        assert_eq!(cosine_distance(&a, &fv(&[-1.0, 0.0])), 2.0);
    }

    #[test]
    fn cost_matrix_examples() {
        let t0 = EmaState::new(fv(&[1.0, 0.0]), 0.9).unwrap();
        let t1 = EmaState::new(fv(&[0.6, 0.8]), 0.9).unwrap();
        let tracks = [&t0, &t1];
        let f0 = fv(&[1.0, 0.0]);
        let f1 = fv(&[0.6, 0.8]);
        let m = appearance_cost_matrix(&tracks, &[Some(&f0), Some(&f1)], &HashMap::new()).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert!(m.get(1, 1).abs() < 1e-15);

        let copies = HashMap::from([(0usize, 1usize)]);
        let m = appearance_cost_matrix(&tracks, &[None], &copies).unwrap();
        assert_eq!(m.get(1, 0), 0.0);
        // 1 - (1, 0).(0.6, 0.8)
        assert!((m.get(0, 0) - 0.4).abs() < 1e-15);

        assert_eq!(
            appearance_cost_matrix(&tracks, &[None], &HashMap::new()),
            Err(AppearanceError::MissingFeature(0))
        );
        let bad = HashMap::from([(0usize, 5usize)]);
        assert!(appearance_cost_matrix(&tracks, &[None], &bad).is_err());
    }

    fn arb_unit(dim: usize) -> impl Strategy<Value = FeatureVector> {
        proptest::collection::vec(-1.0..1.0f64, dim)
            .prop_filter_map("zero", |v| FeatureVector::new(v).ok())
    }

    proptest! {
        #[test]
        fn decay_law_and_unit_norm(
            e in arb_unit(8),
            f in arb_unit(8),
            alpha in 0.05..0.99f64,
            k in 0u32..=20,
        ) {
            let mut s = EmaState::new(e, alpha).unwrap();
            for _ in 0..k {
                s.mark_skipped();
                prop_assert!((norm(s.embedding()) - 1.0).abs() < 1e-6);
                let law = alpha.powi(s.frames_since_feature() as i32 + 1);
                prop_assert!((s.effective_alpha() - law).abs() < 1e-9);
            }
            if let Ok(w) = s.update(&f) {
                prop_assert!((w - alpha.powi(k as i32 + 1)).abs() < 1e-9);
                prop_assert!((norm(s.embedding()) - 1.0).abs() < 1e-6);
            }
        }
    }
}
