use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("grid needs at least one point")]
    Empty,
    #[error("{what} = {value} is not an integer multiple of the time step {dt}")]
    NotMultiple { what: &'static str, value: f64, dt: f64 },
    #[error("sample points are not uniformly spaced")]
    NonUniform,
}

/// Points `k * step` for `k = 0..len`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(step: f64, len: usize) -> Result<Self, GridError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(GridError::BadStep(step));
        }
        if len == 0 {
            return Err(GridError::Empty);
        }
        Ok(Self { step, len })
    }

    /// Grid `0, step, ..., max` (rounded to the nearest whole number of steps).
    pub fn up_to(max: f64, step: f64) -> Result<Self, GridError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(GridError::BadStep(step));
        }
        Self::new(step, (max / step).round() as usize + 1)
    }

    /// Checks that `points` are `0, h, 2h, ...` and returns the grid.
    pub fn from_points(points: &[f64]) -> Result<Self, GridError> {
        match points {
            [] => Err(GridError::Empty),
            [x] if *x == 0.0 => Ok(Self { step: 1.0, len: 1 }),
            [_] => Err(GridError::NonUniform),
            _ => {
                let h = points[1] - points[0];
                let ok = points
                    .iter()
                    .enumerate()
                    .all(|(k, &x)| (x - k as f64 * h).abs() <= 1e-9 * h.abs().max(1.0));
                if !ok || points[0] != 0.0 {
                    return Err(GridError::NonUniform);
                }
                Self::new(h, points.len())
            }
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn max(&self) -> f64 {
        self.value(self.len - 1)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|k| self.value(k)).collect()
    }

    /// Number of `dt` steps per grid step.
    pub fn steps_per_point(&self, dt: f64, what: &'static str) -> Result<usize, GridError> {
        steps_of(self.step, dt, what)
    }
}

/// `value / dt` when it is a whole number.
pub fn steps_of(value: f64, dt: f64, what: &'static str) -> Result<usize, GridError> {
    let n = (value / dt).round();
    if value < 0.0 || (n * dt - value).abs() > 1e-9 * value.abs().max(1.0) {
        return Err(GridError::NotMultiple { what, value, dt });
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction() {
        let g = UniformGrid::up_to(10.0, 0.5).unwrap();
        assert_eq!(g.len, 21);
        assert_eq!(g.max(), 10.0);
        assert_eq!(UniformGrid::from_points(&g.points()).unwrap(), g);
        assert!(UniformGrid::from_points(&[0.0, 0.1, 0.3]).is_err());
        assert!(UniformGrid::new(0.0, 3).is_err());
        assert_eq!(g.steps_per_point(0.1, "step").unwrap(), 5);
        assert!(g.steps_per_point(0.3, "step").is_err());
    }
}
