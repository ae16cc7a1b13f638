//! Simple linear capacity models: CPU and message volume as functions of peer
//! count, their inversion, and the extrapolated gain of relay suppression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all x values are identical; slope is undefined")]
    DegenerateFit,
    #[error("model has zero slope and cannot be inverted")]
    NonInvertible,
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// `y = intercept + slope * x`, fitted by ordinary least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel<T> {
    pub intercept: T,
    pub slope: T,
    pub r_squared: T,
    pub n_points: usize,
    /// Smallest and largest x seen while fitting.
    pub x_range: (T, T),
    pub x_name: String,
    pub y_name: String,
}

impl<T: Scalar> LinearModel<T> {
    pub fn with_names(mut self, x_name: &str, y_name: &str) -> Self {
        self.x_name = x_name.to_owned();
        self.y_name = y_name.to_owned();
        self
    }

    pub fn predict(&self, x: T) -> T {
        self.intercept + self.slope * x
    }

    /// True when `x` lies outside the fitted x range.
    pub fn extrapolates(&self, x: T) -> bool {
        x < self.x_range.0 || x > self.x_range.1
    }

    /// Solves the model for x: slope `1/slope`, intercept `-intercept/slope`.
    pub fn invert(&self) -> Result<LinearModel<T>, RegressionError> {
        if self.slope.is_zero() {
            return Err(RegressionError::NonInvertible);
        }
        let a = self.predict(self.x_range.0);
        let b = self.predict(self.x_range.1);
        Ok(LinearModel {
            intercept: -self.intercept / self.slope,
            slope: T::one() / self.slope,
            r_squared: self.r_squared,
            n_points: self.n_points,
            x_range: if a <= b { (a, b) } else { (b, a) },
            x_name: self.y_name.clone(),
            y_name: self.x_name.clone(),
        })
    }
}

/// Ordinary least squares over `(x, y)` pairs.
///
/// `r_squared = 1 - SS_res / SS_tot`, defined as 1 when every y is equal.
pub fn fit_linear<T: Scalar>(points: &[(T, T)]) -> Result<LinearModel<T>, RegressionError> {
    if points.len() < 2 {
        return Err(RegressionError::TooFewPoints(points.len()));
    }
    let x0 = points[0].0;
    if points.iter().all(|&(x, _)| x == x0) {
        return Err(RegressionError::DegenerateFit);
    }
    let n = T::from_usize_lossy(points.len());
    let zero = T::zero();
    let mean_x = points.iter().fold(zero, |acc, &(x, _)| acc + x) / n;
    let mean_y = points.iter().fold(zero, |acc, &(_, y)| acc + y) / n;
    let (mut sxx, mut sxy) = (zero, zero);
    for &(x, y) in points {
        let dx = x - mean_x;
        sxx = sxx + dx * dx;
        sxy = sxy + dx * (y - mean_y);
    }
    if sxx.is_zero() {
        return Err(RegressionError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;

    let (mut ss_res, mut ss_tot) = (zero, zero);
    for &(x, y) in points {
        let r = y - (intercept + slope * x);
        let d = y - mean_y;
        ss_res = ss_res + r * r;
        ss_tot = ss_tot + d * d;
    }
    let r_squared = if ss_tot.is_zero() {
        T::one()
    } else {
        let r2 = T::one() - ss_res / ss_tot;
        if r2 < zero {
            zero
        } else if r2 > T::one() {
            T::one()
        } else {
            r2
        }
    };

    let (lo, hi) = points.iter().fold((x0, x0), |(lo, hi), &(x, _)| {
        (if x < lo { x } else { lo }, if x > hi { x } else { hi })
    });
    Ok(LinearModel {
        intercept,
        slope,
        r_squared,
        n_points: points.len(),
        x_range: (lo, hi),
        x_name: "x".to_owned(),
        y_name: "y".to_owned(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint<T> {
    pub peers: u32,
    pub messages_per_s: T,
    pub cpu_percent: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquelchedPoint<T> {
    pub peers_equivalent: u32,
    /// Peer count before flooring to whole slots.
    pub peers_unrounded: T,
    pub messages_per_s: T,
    pub cpu_percent: T,
}

/// Extrapolated effect of a message reduction on a node of a given size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport<T> {
    pub baseline: BaselinePoint<T>,
    pub squelched: SquelchedPoint<T>,
    pub saved_fraction: T,
    pub cpu_saved_percent: T,
    pub freed_slots: u32,
    pub connectivity_gain_percent: T,
}

/// Distance below an integer within which a peer count is taken as that integer
/// before flooring. Absorbs rounding in `predict(invert(m), predict(m, x))`.
const PEER_SNAP: f64 = 1e-6;

fn floor_peers<T: Scalar>(p: T) -> u32 {
    let v = p.to_f64().unwrap_or(0.0);
    let nearest = v.round();
    let snapped = if (v - nearest).abs() < PEER_SNAP {
        nearest
    } else {
        v.floor()
    };
    snapped.max(0.0) as u32
}

/// Peer count and CPU a node would need for the message volume left after
/// removing `saved_fraction` of the traffic at `baseline_peers`.
pub fn compute_gain<T: Scalar>(
    cpu_model: &LinearModel<T>,
    msgs_model: &LinearModel<T>,
    baseline_peers: u32,
    saved_fraction: T,
) -> Result<GainReport<T>, RegressionError> {
    if baseline_peers == 0 {
        return Err(RegressionError::Parameter(
            "baseline_peers must be positive".into(),
        ));
    }
    if !(saved_fraction > T::zero() && saved_fraction < T::one()) {
        return Err(RegressionError::Parameter(format!(
            "saved_fraction must be in (0,1), got {saved_fraction:?}"
        )));
    }
    let peers = T::from_u32(baseline_peers).expect("peer count representable");
    let baseline_msgs = msgs_model.predict(peers);
    let baseline_cpu = cpu_model.predict(peers);

    let squelched_msgs = (T::one() - saved_fraction) * baseline_msgs;
    let peers_unrounded = msgs_model.invert()?.predict(squelched_msgs);
    let peers_equivalent = floor_peers(peers_unrounded).min(baseline_peers);
    let squelched_cpu =
        cpu_model.predict(T::from_u32(peers_equivalent).expect("peer count representable"));

    let freed_slots = baseline_peers - peers_equivalent;
    let hundred = T::hundred();
    let cpu_saved_percent = if baseline_cpu.is_zero() {
        T::zero()
    } else {
        hundred * (baseline_cpu - squelched_cpu) / baseline_cpu
    };
    let connectivity_gain_percent =
        hundred * T::from_u32(freed_slots).expect("slot count representable") / peers;

    Ok(GainReport {
        baseline: BaselinePoint {
            peers: baseline_peers,
            messages_per_s: baseline_msgs,
            cpu_percent: baseline_cpu,
        },
        squelched: SquelchedPoint {
            peers_equivalent,
            peers_unrounded,
            messages_per_s: squelched_msgs,
            cpu_percent: squelched_cpu,
        },
        saved_fraction,
        cpu_saved_percent,
        freed_slots,
        connectivity_gain_percent,
    })
}
