use crate::{Error, Result};

/// A 2-D real-valued grid, used for attention maps and raw images.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the largest value (first occurrence on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Min-max rescales to [0, 1]. A constant grid maps to all zeros.
    pub fn normalized(&self) -> Grid {
        let lo = self.min();
        let hi = self.max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Resizes a grid with corner-aligned bilinear interpolation.
///
/// Output pixel centers are mapped linearly onto input pixel centers, with
/// the four corners fixed. Resizing to the same extents reproduces the input
/// exactly, and constant inputs stay constant at any target size.
pub fn bilinear_resize(grid: &Grid, target_height: usize, target_width: usize) -> Result<Grid> {
    if target_height == 0 || target_width == 0 {
        return Err(Error::Shape(format!(
            "resize target {}x{} has a zero extent",
            target_height, target_width
        )));
    }
    let (h, w) = (grid.height, grid.width);
    let scale = |out: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out <= 1 || n_in <= 1 {
            0.0
        } else {
            out as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Grid::zeros(target_height, target_width);
    for oy in 0..target_height {
        let sy = scale(oy, target_height, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target_width {
            let sx = scale(ox, target_width, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bottom = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            out.set(oy, ox, top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_is_exact() {
        let g = Grid::new(3, 2, vec![4.25; 6]).unwrap();
        let r = bilinear_resize(&g, 7, 5).unwrap();
        assert!(r.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let g = Grid::new(3, 4, (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        let r = bilinear_resize(&g, 3, 4).unwrap();
        assert_eq!(r, g);
    }

    #[test]
    fn resize_interpolates_midpoints() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = bilinear_resize(&g, 2, 3).unwrap();
        assert_eq!(r.get(0, 0), 0.0);
        assert_eq!(r.get(0, 1), 0.5);
        assert_eq!(r.get(0, 2), 1.0);
        assert_eq!(r.get(1, 1), 0.5);
    }

    #[test]
    fn resize_rejects_zero_extent() {
        let g = Grid::zeros(2, 2);
        assert!(bilinear_resize(&g, 0, 3).is_err());
        assert!(bilinear_resize(&g, 3, 0).is_err());
    }

    #[test]
    fn normalized_maps_to_unit_range() {
        let g = Grid::new(1, 4, vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        let n = g.normalized();
        assert_eq!(n.data(), &[0.0, 0.25, 0.5, 1.0]);
        let flat = Grid::new(1, 3, vec![5.0; 3]).unwrap();
        assert_eq!(flat.normalized().data(), &[0.0; 3]);
    }
}
