//! Per-device performance curves: throughput (batches/second) as a function of
//! batch size, interpolated from profiling samples.

use serde::Serialize;
use thiserror::Error;

use crate::numerics::{fit_natural_spline, CubicSpline, SamplePoint, SplineError};
use crate::profiler::ProfileSample;

/// Batch sizes whose speed is within this fraction of the peak form the peak range.
pub const PEAK_TOLERANCE: f64 = 0.05;

/// Lower clamp on interpolated speed, in batches/second.
pub const SPEED_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("no profiling samples")]
    NoSamples,
    #[error("max batch size must be at least 1")]
    ZeroMbs,
    #[error("sample at batch {batch} exceeds mbs {mbs}")]
    SampleAboveMbs { batch: u32, mbs: u32 },
    #[error("sample at batch {batch} has non-positive time {seconds}")]
    BadSample { batch: u32, seconds: f64 },
    #[error("batch {batch} outside [1, {mbs}]")]
    OutOfRange { batch: u32, mbs: u32 },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedModel {
    Constant { speed: f64 },
    Spline { spline: CubicSpline },
}

impl SpeedModel {
    fn eval(&self, batch: f64) -> f64 {
        let raw = match self {
            Self::Constant { speed } => *speed,
            Self::Spline { spline } => spline.eval(batch),
        };
        raw.max(SPEED_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfCurve {
    pub device_id: usize,
    pub mbs: u32,
    pub speed_model: SpeedModel,
    pub peak_speed: f64,
    /// Inclusive `[lo, hi]` batch interval around the peak.
    pub peak_range: (u32, u32),
    /// Clamped speed at every integer batch 1..=mbs.
    #[serde(skip)]
    speeds: Vec<f64>,
}

impl PerfCurve {
    fn from_model(device_id: usize, speed_model: SpeedModel, mbs: u32) -> Self {
        let speeds: Vec<f64> = (1..=mbs).map(|b| speed_model.eval(b as f64)).collect();
        // First maximum, then the contiguous run around it within tolerance.
        let (peak_idx, peak_speed) =
            speeds
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::MIN),
                    |best, (i, s)| if s > best.1 { (i, s) } else { best },
                );
        let floor = (1.0 - PEAK_TOLERANCE) * peak_speed;
        let mut lo = peak_idx;
        while lo > 0 && speeds[lo - 1] >= floor {
            lo -= 1;
        }
        let mut hi = peak_idx;
        while hi + 1 < speeds.len() && speeds[hi + 1] >= floor {
            hi += 1;
        }
        Self {
            device_id,
            mbs,
            speed_model,
            peak_speed,
            peak_range: (lo as u32 + 1, hi as u32 + 1),
            speeds,
        }
    }

    /// A curve with the same speed at every batch size.
    pub fn constant(device_id: usize, speed: f64, mbs: u32) -> Self {
        Self::from_model(device_id, SpeedModel::Constant { speed }, mbs.max(1))
    }

    /// Speed in batches/second at `batch` (1..=mbs).
    pub fn speed(&self, batch: u32) -> f64 {
        match batch
            .checked_sub(1)
            .and_then(|i| self.speeds.get(i as usize))
        {
            Some(&s) => s,
            None => self.speed_model.eval(batch as f64),
        }
    }

    pub fn predict_step_time(&self, batch: u32) -> Result<f64, CurveError> {
        if batch == 0 || batch > self.mbs {
            return Err(CurveError::OutOfRange {
                batch,
                mbs: self.mbs,
            });
        }
        Ok(self.step_time(batch))
    }

    /// Predicted seconds for a step at `batch`; 0 for an empty step.
    ///
    /// Caller guarantees `batch <= mbs`.
    pub(crate) fn step_time(&self, batch: u32) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        batch as f64 / self.speed(batch)
    }

    /// Largest batch in `[0, mbs]` whose predicted step time is within `t`.
    pub fn find_max_batch_within_time(&self, t: f64) -> u32 {
        (1..=self.mbs)
            .rev()
            .find(|&b| self.step_time(b) <= t)
            .unwrap_or(0)
    }

    /// Predicted step times for batches 1..=mbs.
    pub fn step_times(&self) -> Vec<f64> {
        (1..=self.mbs).map(|b| self.step_time(b)).collect()
    }
}

/// Fits a speed curve over `(batch, batch / seconds)` points.
pub fn build_curve(
    device_id: usize,
    samples: &[ProfileSample],
    mbs: u32,
) -> Result<PerfCurve, CurveError> {
    if samples.is_empty() {
        return Err(CurveError::NoSamples);
    }
    if mbs == 0 {
        return Err(CurveError::ZeroMbs);
    }
    for s in samples {
        if s.batch > mbs {
            return Err(CurveError::SampleAboveMbs {
                batch: s.batch,
                mbs,
            });
        }
        if s.batch == 0 || !s.seconds.is_finite() || s.seconds <= 0.0 {
            return Err(CurveError::BadSample {
                batch: s.batch,
                seconds: s.seconds,
            });
        }
    }
    let speed_of = |s: &ProfileSample| s.batch as f64 / s.seconds;
    let model = if samples.len() == 1 {
        SpeedModel::Constant {
            speed: speed_of(&samples[0]),
        }
    } else {
        let points: Vec<SamplePoint> = samples
            .iter()
            .map(|s| SamplePoint::new(s.batch as f64, speed_of(s)))
            .collect();
        SpeedModel::Spline {
            spline: fit_natural_spline(&points)?,
        }
    };
    Ok(PerfCurve::from_model(device_id, model, mbs))
}

/// Step-time table with suffix minima, for exact `O(log mbs)` find queries.
///
/// Equivalent to [`PerfCurve::find_max_batch_within_time`] for any curve shape:
/// the largest `b` with `time(b) <= t` is the largest `b` whose suffix minimum is `<= t`,
/// and suffix minima are non-decreasing in `b`.
#[derive(Debug, Clone)]
pub(crate) struct StepTimeTable {
    times: Vec<f64>,
    suffix_min: Vec<f64>,
}

impl StepTimeTable {
    pub(crate) fn new(curve: &PerfCurve) -> Self {
        let times = curve.step_times();
        let mut suffix_min = times.clone();
        for i in (0..suffix_min.len().saturating_sub(1)).rev() {
            suffix_min[i] = suffix_min[i].min(suffix_min[i + 1]);
        }
        Self { times, suffix_min }
    }

    pub(crate) fn find(&self, t: f64) -> u32 {
        self.suffix_min.partition_point(|&m| m <= t) as u32
    }

    pub(crate) fn time(&self, batch: u32) -> f64 {
        if batch == 0 {
            0.0
        } else {
            self.times[batch as usize - 1]
        }
    }

    pub(crate) fn times(&self) -> &[f64] {
        &self.times
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn affine_samples(c0: f64, c1: f64, batches: &[u32]) -> Vec<ProfileSample> {
        batches
            .iter()
            .map(|&b| ProfileSample {
                batch: b,
                seconds: c0 + c1 * b as f64,
            })
            .collect()
    }

    #[test]
    fn affine_curve_peaks_at_mbs() {
        let c = build_curve(0, &affine_samples(0.1, 0.05, &[1, 2, 4, 8]), 8).unwrap();
        assert!((c.speed(8) - 16.0).abs() < 1e-9);
        assert!((c.peak_speed - 16.0).abs() < 1e-9);
        assert_eq!(c.peak_range.1, 8);
        assert!((c.predict_step_time(8).unwrap() - 0.5).abs() <= 0.005);
    }

    #[test]
    fn single_sample_is_constant() {
        let c = build_curve(
            3,
            &[ProfileSample {
                batch: 1,
                seconds: 0.2,
            }],
            1,
        )
        .unwrap();
        assert_eq!(c.speed_model, SpeedModel::Constant { speed: 5.0 });
        assert_eq!(c.peak_speed, 5.0);
        assert_eq!(c.peak_range, (1, 1));
    }

    #[test]
    fn predict_from_constant_speed() {
        let c = PerfCurve::constant(0, 5.0, 8);
        assert!((c.predict_step_time(3).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(
            c.predict_step_time(0),
            Err(CurveError::OutOfRange { batch: 0, mbs: 8 })
        );
        assert!(c.predict_step_time(9).is_err());
    }

    #[test]
    fn find_on_affine_curve() {
        let c = build_curve(0, &affine_samples(0.1, 0.05, &[1, 2, 4, 5, 6, 8]), 8).unwrap();
        assert_eq!(c.find_max_batch_within_time(0.35), 5);
        assert_eq!(c.find_max_batch_within_time(10.0), 8);
        assert_eq!(c.find_max_batch_within_time(0.1), 0);
    }

    #[test]
    fn rejects_bad_samples() {
        assert_eq!(build_curve(0, &[], 4), Err(CurveError::NoSamples));
        assert!(matches!(
            build_curve(0, &affine_samples(0.1, 0.1, &[1, 9]), 8),
            Err(CurveError::SampleAboveMbs { batch: 9, mbs: 8 })
        ));
        assert!(matches!(
            build_curve(
                0,
                &[ProfileSample {
                    batch: 2,
                    seconds: 0.0
                }],
                8
            ),
            Err(CurveError::BadSample { .. })
        ));
    }

    #[test]
    fn saturating_peak_range_matches_scan() {
        // Rises then dips slightly: speed table from a curve with an interior maximum.
        let samples: Vec<ProfileSample> = [1u32, 2, 4, 8, 16, 24, 32]
            .iter()
            .map(|&b| {
                let speed = 40.0 * (b as f64) / (4.0 + b as f64) - 0.3 * b as f64;
                ProfileSample {
                    batch: b,
                    seconds: b as f64 / speed,
                }
            })
            .collect();
        let c = build_curve(0, &samples, 32).unwrap();
        let scan: Vec<f64> = (1..=32).map(|b| c.speed(b)).collect();
        let peak = scan.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(c.peak_speed, peak);
        let inside: Vec<u32> = (1..=32)
            .filter(|&b| scan[b as usize - 1] >= 0.95 * peak)
            .collect();
        assert_eq!(c.peak_range, (inside[0], *inside.last().unwrap()));
        assert!(c.peak_range.1 < 32);
    }

    fn curve_strategy() -> impl Strategy<Value = PerfCurve> {
        (1u32..200, prop::collection::vec(0.05f64..5.0, 1..8)).prop_map(|(mbs, secs)| {
            let mut batches: Vec<u32> = (0..secs.len())
                .map(|i| 1 + (i as u32 * mbs) / secs.len() as u32)
                .collect();
            batches.dedup();
            let samples: Vec<ProfileSample> = batches
                .iter()
                .zip(&secs)
                .map(|(&b, &s)| ProfileSample {
                    batch: b,
                    seconds: s * b as f64,
                })
                .collect();
            build_curve(0, &samples, mbs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn find_predict_consistency(curve in curve_strategy(), t in 0.0f64..400.0) {
            let b = curve.find_max_batch_within_time(t);
            if b >= 1 {
                prop_assert!(curve.predict_step_time(b).unwrap() <= t);
            }
            if b < curve.mbs {
                for later in b + 1..=curve.mbs {
                    prop_assert!(curve.predict_step_time(later).unwrap() > t);
                }
            }
            prop_assert_eq!(StepTimeTable::new(&curve).find(t), b);
        }

        #[test]
        fn knots_and_peak(curve in curve_strategy()) {
            let (lo, hi) = curve.peak_range;
            prop_assert!(1 <= lo && lo <= hi && hi <= curve.mbs);
            for b in lo..=hi {
                prop_assert!(curve.speed(b) >= (1.0 - PEAK_TOLERANCE) * curve.peak_speed);
            }
            if let SpeedModel::Spline { spline } = &curve.speed_model {
                for (k, seg) in spline.knots().iter().zip(spline.segments()) {
                    let s = curve.speed(*k as u32);
                    prop_assert!((s - seg.a.max(SPEED_FLOOR)).abs() <= 1e-9 * s.abs().max(1.0));
                }
            }
        }
    }
}
