//! Constant-velocity Kalman filter in (cx, cy, a, h) measurement space.
//!
//! State is `(cx, cy, a, h, vcx, vcy, va, vh)` with `a = w / h`. Noise
//! standard deviations scale with the box height so uncertainty is
//! independent of target size.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
type MeasVector = SVector<f64, 4>;
type MeasCovariance = SMatrix<f64, 4, 4>;

const STD_WEIGHT_POSITION: f64 = 1.0 / 20.0;
const STD_WEIGHT_VELOCITY: f64 = 1.0 / 160.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("degenerate state: aspect {aspect}, height {height}")]
    DegenerateState { aspect: f64, height: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> SMatrix<f64, 4, 8> {
    SMatrix::<f64, 4, 8>::identity()
}

/// Process noise for a given current height.
pub fn process_noise(h: f64) -> StateCovariance {
    let sp = STD_WEIGHT_POSITION * h;
    let sv = STD_WEIGHT_VELOCITY * h;
    let std = [sp, sp, 1e-2, sp, sv, sv, 1e-5, sv];
    StateCovariance::from_diagonal(&StateVector::from_iterator(std.iter().map(|s| s * s)))
}

fn measurement_noise(h: f64) -> MeasCovariance {
    let sp = STD_WEIGHT_POSITION * h;
    let std = [sp, sp, 1e-1, sp];
    MeasCovariance::from_diagonal(&MeasVector::from_iterator(std.iter().map(|s| s * s)))
}

fn measurement(b: &BBox) -> MeasVector {
    let (cx, cy) = b.center();
    MeasVector::new(cx, cy, b.aspect(), b.h())
}

impl KalmanState {
    pub fn initiate(b: &BBox) -> Self {
        let z = measurement(b);
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = b.h();
        let sp = 2.0 * STD_WEIGHT_POSITION * h;
        let sv = 10.0 * STD_WEIGHT_VELOCITY * h;
        let std = [sp, sp, 1e-2, sp, sv, sv, 1e-5, sv];
        let covariance =
            StateCovariance::from_diagonal(&StateVector::from_iterator(std.iter().map(|s| s * s)));
        Self { mean, covariance }
    }

    /// One frame of constant-velocity motion.
    pub fn predict(&self) -> Self {
        let f = transition();
        let q = process_noise(self.mean[3]);
        let mean = f * self.mean;
        let covariance = symmetrize(f * self.covariance * f.transpose() + q);
        Self { mean, covariance }
    }

    /// Projected measurement mean and innovation covariance.
    pub fn project(&self) -> (MeasVector, MeasCovariance) {
        let hm = observation();
        let r = measurement_noise(self.mean[3]);
        (hm * self.mean, hm * self.covariance * hm.transpose() + r)
    }

    pub fn update(&self, b: &BBox) -> Result<Self, MotionError> {
        let hm = observation();
        let (projected, s) = self.project();
        let chol = s.cholesky().ok_or(MotionError::SingularInnovation)?;
        // K = P H^T S^-1, computed as (S^-1 H P)^T since S is symmetric.
        let pht = self.covariance * hm.transpose();
        let gain = chol.solve(&pht.transpose()).transpose();
        let innovation = measurement(b) - projected;
        let mean = self.mean + gain * innovation;
        let covariance = symmetrize(self.covariance - gain * s * gain.transpose());
        Ok(Self { mean, covariance })
    }

    pub fn to_box(&self) -> Result<BBox, MotionError> {
        let (aspect, height) = (self.mean[2], self.mean[3]);
        if !(aspect > 0.0 && height > 0.0) {
            return Err(MotionError::DegenerateState { aspect, height });
        }
        Ok(BBox::from_center_aspect(
            self.mean[0],
            self.mean[1],
            aspect,
            height,
        )?)
    }
}

fn symmetrize(m: StateCovariance) -> StateCovariance {
    (m + m.transpose()) * 0.5
}
