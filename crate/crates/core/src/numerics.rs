//! Natural cubic spline interpolation.
//!
//! Each interval `[x_i, x_{i+1}]` carries a cubic in local coordinates
//! `S_i(x) = a_i + b_i (x - x_i) + c_i (x - x_i)^2 + d_i (x - x_i)^3`.
//! Second derivatives at the two endpoints are pinned to zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("need at least 2 sample points, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate knot at x = {0}")]
    DuplicateKnot(f64),
    #[error("non-finite sample ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
}

/// A measured `(x, y)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
}

impl SamplePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Coefficients of one cubic piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Segment {
    fn value(&self, dx: f64) -> f64 {
        ((self.d * dx + self.c) * dx + self.b) * dx + self.a
    }

    fn first_derivative(&self, dx: f64) -> f64 {
        (3.0 * self.d * dx + 2.0 * self.c) * dx + self.b
    }

    fn second_derivative(&self, dx: f64) -> f64 {
        6.0 * self.d * dx + 2.0 * self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl CubicSpline {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn first_knot(&self) -> f64 {
        self.knots[0]
    }

    pub fn last_knot(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Index of the segment whose interval contains `x` (clamped to the valid range).
    fn segment_index(&self, x: f64) -> usize {
        let last = self.segments.len() - 1;
        // partition_point returns the count of knots <= x.
        let idx = self.knots.partition_point(|&k| k <= x);
        idx.saturating_sub(1).min(last)
    }

    /// Evaluates the spline. Outside `[first_knot, last_knot]` the endpoint value is returned.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.first_knot() {
            return self.values[0];
        }
        if x >= self.last_knot() {
            return self.values[self.values.len() - 1];
        }
        let i = self.segment_index(x);
        self.segments[i].value(x - self.knots[i])
    }

    /// Analytic derivative of the polynomial piece `segment` at `x`, without clamping.
    ///
    /// `order` must be 0, 1 or 2.
    pub fn piece_derivative(&self, segment: usize, x: f64, order: u8) -> f64 {
        let s = &self.segments[segment];
        let dx = x - self.knots[segment];
        match order {
            0 => s.value(dx),
            1 => s.first_derivative(dx),
            2 => s.second_derivative(dx),
            _ => panic!("derivative order {order} not supported"),
        }
    }
}

/// Fits a natural cubic spline through `points`. Input order does not matter.
pub fn fit_natural_spline(points: &[SamplePoint]) -> Result<CubicSpline, SplineError> {
    if points.len() < 2 {
        return Err(SplineError::TooFewPoints(points.len()));
    }
    if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(SplineError::NonFinite { x: p.x, y: p.y });
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|l, r| l.x.total_cmp(&r.x));
    if let Some(w) = sorted.windows(2).find(|w| w[0].x == w[1].x) {
        return Err(SplineError::DuplicateKnot(w[0].x));
    }

    let x: Vec<f64> = sorted.iter().map(|p| p.x).collect();
    let y: Vec<f64> = sorted.iter().map(|p| p.y).collect();
    let n = x.len() - 1;
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();

    // Second derivatives M_0..M_n; natural boundary fixes M_0 = M_n = 0 and the
    // interior unknowns solve a symmetric diagonally dominant tridiagonal system.
    let mut m = vec![0.0; n + 1];
    if n >= 2 {
        let size = n - 1;
        let mut diag = vec![0.0; size];
        let mut upper = vec![0.0; size];
        let mut rhs = vec![0.0; size];
        for k in 0..size {
            let i = k + 1;
            diag[k] = 2.0 * (h[i - 1] + h[i]);
            upper[k] = h[i];
            rhs[k] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        // Thomas algorithm; the sub-diagonal equals the shifted super-diagonal.
        for k in 1..size {
            let w = h[k] / diag[k - 1];
            diag[k] -= w * upper[k - 1];
            rhs[k] -= w * rhs[k - 1];
        }
        m[size] = rhs[size - 1] / diag[size - 1];
        for k in (0..size - 1).rev() {
            m[k + 1] = (rhs[k] - upper[k] * m[k + 2]) / diag[k];
        }
    }

    let segments = (0..n)
        .map(|i| Segment {
            a: y[i],
            b: (y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
            c: m[i] / 2.0,
            d: (m[i + 1] - m[i]) / (6.0 * h[i]),
        })
        .collect();

    Ok(CubicSpline {
        knots: x,
        values: y,
        segments,
    })
}

/// Evaluates `spline` at `x` with clamped extrapolation.
pub fn eval_spline(spline: &CubicSpline, x: f64) -> f64 {
    spline.eval(x)
}
