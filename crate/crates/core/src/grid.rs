//! Dense 2-D grids and the resampling kernels shared by saliency maps and
//! images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::default())
    }
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} elements ({height}x{width})", height * width),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Grid<f32> {
    pub fn min_max(&self) -> Option<(f32, f32)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Overlap weights for mapping the source interval `[start, end)` onto
/// `n` equal output cells. Row `i` lists `(source index, weight)` pairs whose
/// weights sum to one.
pub(crate) fn area_weights(start: f64, end: f64, src_len: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let step = (end - start) / n as f64;
    (0..n)
        .map(|i| {
            let a = start + i as f64 * step;
            let b = if i + 1 == n { end } else { a + step };
            let lo = a.floor().max(0.0) as usize;
            let hi = (b.ceil() as usize).min(src_len);
            let mut row = Vec::with_capacity(hi.saturating_sub(lo));
            for s in lo..hi {
                let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((s, overlap));
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            if total > 0.0 {
                for (_, w) in &mut row {
                    *w /= total;
                }
            }
            row
        })
        .collect()
}

/// Area-average resample of the source rectangle
/// `[y0, y1) × [x0, x1)` (fractional bounds allowed) to `out_h × out_w`.
/// Works for both shrinking and enlarging.
pub(crate) fn area_resample(
    src: &Grid<f32>,
    (y0, y1): (f64, f64),
    (x0, x1): (f64, f64),
    out_h: usize,
    out_w: usize,
) -> Grid<f32> {
    let rows = area_weights(y0, y1, src.height(), out_h);
    let cols = area_weights(x0, x1, src.width(), out_w);
    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; src.height() * out_w];
    for y in 0..src.height() {
        for (ox, col) in cols.iter().enumerate() {
            let mut acc = 0.0;
            for &(sx, w) in col {
                acc += w * src.get(y, sx) as f64;
            }
            tmp[y * out_w + ox] = acc;
        }
    }
    Grid::from_fn(out_h, out_w, |oy, ox| {
        let mut acc = 0.0;
        for &(sy, w) in &rows[oy] {
            acc += w * tmp[sy * out_w + ox];
        }
        acc as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_weights_integer_factor() {
        let w = area_weights(0.0, 4.0, 4, 2);
        assert_eq!(w, vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 0.5), (3, 0.5)]]);
    }

    #[test]
    fn area_weights_fractional() {
        let w = area_weights(0.0, 3.0, 3, 2);
        assert_eq!(w[0], vec![(0, 1.0 / 1.5), (1, 0.5 / 1.5)]);
        assert_eq!(w[1], vec![(1, 0.5 / 1.5), (2, 1.0 / 1.5)]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid::from_vec(2, 2, vec![0.0f32; 3]).is_err());
    }
}
