use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Co-registered CT and CTA volumes of one patient, row-major
/// `(slice, row, col)`. Label 1 is a favorable outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStudy {
    pub id: String,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub ct: Vec<f32>,
    pub cta: Vec<f32>,
    pub label: u8,
}

impl PatientStudy {
    pub fn new(
        id: impl Into<String>,
        (slices, height, width): (usize, usize, usize),
        ct: Vec<f32>,
        cta: Vec<f32>,
        label: u8,
    ) -> Result<Self> {
        let n = slices * height * width;
        if n == 0 {
            return Err(Error::Argument("study volume has a zero extent".into()));
        }
        if ct.len() != n || cta.len() != n {
            return Err(Error::Argument(format!(
                "CT has {} and CTA {} voxels, shape {slices}x{height}x{width} needs {n}",
                ct.len(),
                cta.len()
            )));
        }
        if label > 1 {
            return Err(Error::Argument(format!("label {label} is not 0 or 1")));
        }
        if ct.iter().chain(&cta).any(|v| !v.is_finite()) {
            return Err(Error::Argument("study contains non-finite intensities".into()));
        }
        Ok(Self {
            id: id.into(),
            slices,
            height,
            width,
            ct,
            cta,
            label,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.slices, self.height, self.width)
    }
}

/// Intensity window mapped linearly onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f32,
    pub high: f32,
}

impl Default for Window {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

/// Maps `[low, high]` to `[0, 1]`, clamping values outside the window.
pub fn normalize(volume: &[f32], window: Window) -> Result<Vec<f32>> {
    if !(window.low < window.high) {
        return Err(Error::Config(format!(
            "window low {} must be below high {}",
            window.low, window.high
        )));
    }
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("cannot normalize non-finite intensities".into()));
    }
    let span = window.high as f64 - window.low as f64;
    Ok(volume
        .iter()
        .map(|&v| ((v as f64 - window.low as f64) / span).clamp(0.0, 1.0) as f32)
        .collect())
}

impl PatientStudy {
    /// Normalizes both modalities in place. The identity window is a no-op.
    pub fn apply_window(&mut self, window: Window) -> Result<()> {
        if window == Window::default() {
            return Ok(());
        }
        self.ct = normalize(&self.ct, window)?;
        self.cta = normalize(&self.cta, window)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let w = Window { low: 0.0, high: 100.0 };
        assert_eq!(normalize(&[50.0, 150.0, -3.0], w).unwrap(), vec![0.5, 1.0, 0.0]);
        let v = vec![0.0, 0.25, 0.7, 1.0];
        assert_eq!(normalize(&v, Window::default()).unwrap(), v);
        assert!(matches!(normalize(&v, Window { low: 1.0, high: 1.0 }), Err(Error::Config(_))));
    }

    #[test]
    fn study_validation() {
        assert!(PatientStudy::new("a", (1, 1, 2), vec![0.0; 2], vec![0.0; 2], 1).is_ok());
        assert!(PatientStudy::new("a", (1, 1, 2), vec![0.0; 2], vec![0.0; 3], 1).is_err());
        assert!(PatientStudy::new("a", (1, 1, 2), vec![0.0; 2], vec![0.0; 2], 2).is_err());
        assert!(PatientStudy::new("a", (1, 1, 2), vec![f32::NAN; 2], vec![0.0; 2], 0).is_err());
    }
}
