//! `LatentGrid`: the (channels, height, width) real-valued carrier used for
//! pixel images, encoded latents, noise draws and noise predictions.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Which domain a grid's values live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pixel,
    Latent,
}

/// A dense (c, h, w) grid of f64 values tagged with its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Array3<f64>,
    pub space: Space,
}

impl LatentGrid {
    pub fn new(data: Array3<f64>, space: Space) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Model("grid contains non-finite values".into()));
        }
        Ok(Self { data, space })
    }

    pub fn zeros(c: usize, h: usize, w: usize, space: Space) -> Self {
        Self { data: Array3::zeros((c, h, w)), space }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Elementwise mean of several grids; used by latent-space ensembling.
    pub fn mean_of(grids: &[LatentGrid]) -> Result<LatentGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Model("mean of zero grids".into()))?;
        let mut acc = Array3::<f64>::zeros(first.data.dim());
        for g in grids {
            if g.data.dim() != first.data.dim() || g.space != first.space {
                return Err(Error::Model("grid shape/space mismatch in mean".into()));
            }
            acc += &g.data;
        }
        acc /= grids.len() as f64;
        Ok(LatentGrid { data: acc, space: first.space })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let mut d = Array3::zeros((1, 2, 2));
        d[[0, 0, 0]] = f64::NAN;
        assert!(LatentGrid::new(d, Space::Pixel).is_err());
    }

    #[test]
    fn mean_of_identical_grids_is_identity() {
        let g = LatentGrid::new(Array3::from_elem((2, 3, 3), 0.25), Space::Latent).unwrap();
        let m = LatentGrid::mean_of(&[g.clone(), g.clone(), g.clone()]).unwrap();
        assert_eq!(m.data, g.data);
    }
}
