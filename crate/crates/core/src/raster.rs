//! Row-major 2D grids and pixel rectangles shared by SAR slices, heatmaps,
//! and RGB channel planes.

use crate::error::{Error, Result};

/// A `w x h` grid of f64 values, row-major (row = y, column = x).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(w: usize, h: usize) -> Self {
        Grid2 { w, h, data: vec![0.0; w * h] }
    }

    pub fn from_data(w: usize, h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != w * h {
            return Err(Error::domain(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                w,
                h
            )));
        }
        Ok(Grid2 { w, h, data })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.w + col]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Location of the maximum value as (row, col); first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for row in 0..self.h {
            for col in 0..self.w {
                let v = self.at(row, col);
                if v > best_v {
                    best_v = v;
                    best = (row, col);
                }
            }
        }
        best
    }

    /// Scale values to `[0, 1]`; a constant grid maps to all zeros.
    pub fn normalized01(&self) -> Grid2 {
        let (lo, hi) = self.min_max();
        let mut out = self.clone();
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for v in &mut out.data {
                *v = (*v - lo) * inv;
            }
        } else {
            out.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn crop(&self, rect: &PixelRect) -> Result<Grid2> {
        rect.check_within(self.w, self.h)?;
        let mut out = Grid2::zeros(rect.w, rect.h);
        for row in 0..rect.h {
            for col in 0..rect.w {
                *out.at_mut(row, col) = self.at(rect.y0 + row, rect.x0 + col);
            }
        }
        Ok(out)
    }
}

/// A pixel rectangle: origin (x0, y0) = (col, row), size w x h.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        PixelRect { x0, y0, w, h }
    }

    pub fn check_within(&self, w: usize, h: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::domain("empty crop rectangle"));
        }
        if self.x0 + self.w > w || self.y0 + self.h > h {
            return Err(Error::domain(format!(
                "crop rectangle {:?} exceeds {}x{} image",
                self, w, h
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_grid_is_zero() {
        let g = Grid2::from_data(2, 2, vec![3.0; 4]).unwrap();
        assert!(g.normalized01().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_exact_endpoints_and_is_idempotent() {
        let g = Grid2::from_data(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let n = g.normalized01();
        let (lo, hi) = n.min_max();
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        assert_eq!(n.normalized01(), n);
    }

    #[test]
    fn crop_full_is_identity_and_single_pixel_works() {
        let g = Grid2::from_data(3, 2, (0..6).map(|i| i as f64).collect()).unwrap();
        let full = g.crop(&PixelRect::new(0, 0, 3, 2)).unwrap();
        assert_eq!(full, g);
        let px = g.crop(&PixelRect::new(2, 1, 1, 1)).unwrap();
        assert_eq!(px.data, vec![5.0]);
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let g = Grid2::zeros(3, 2);
        assert!(g.crop(&PixelRect::new(1, 0, 3, 2)).is_err());
        assert!(g.crop(&PixelRect::new(0, 0, 0, 1)).is_err());
    }
}
