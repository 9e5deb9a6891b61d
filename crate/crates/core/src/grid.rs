//! Dense 2D containers and the mask/probability types built on them.

use crate::error::{Error, Result};

/// A dense row-major 2D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T> Grid2D<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} grid needs {} elements, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2D<U> {
        Grid2D {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid2D<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::from_fn(height, width, |_, _| value.clone())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid2D<T> {
    type Output = T;

    fn index(&self, (row, col): (usize, usize)) -> &T {
        self.get(row, col)
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid2D<T> {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        self.get_mut(row, col)
    }
}

/// A binary segmentation mask. Every element is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Grid2D<u8>);

impl BinaryMask {
    pub fn new(grid: Grid2D<u8>) -> Result<Self> {
        if let Some(&bad) = grid.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryMask(bad));
        }
        Ok(Self(grid))
    }

    pub fn from_bools(height: usize, width: usize, values: &[bool]) -> Result<Self> {
        let grid = Grid2D::new(height, width, values.iter().map(|&b| b as u8).collect())?;
        Ok(Self(grid))
    }

    /// Thresholds a probability map: `1` where `p >= tau`.
    pub fn threshold(probs: &ForegroundProbMap, tau: f64) -> Self {
        Self(probs.grid().map(|&p| (p >= tau) as u8))
    }

    pub fn grid(&self) -> &Grid2D<u8> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn foreground_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1).count()
    }
}

/// The `K` binary annotations of one image, all of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterStack {
    raters: Vec<BinaryMask>,
}

impl RaterStack {
    pub fn new(raters: Vec<BinaryMask>) -> Result<Self> {
        let first = raters
            .first()
            .ok_or_else(|| Error::InvalidShape("a rater stack needs at least one mask".into()))?
            .dims();
        for (r, mask) in raters.iter().enumerate().skip(1) {
            if mask.dims() != first {
                return Err(Error::DimensionMismatch {
                    context: format!("rater {r}"),
                    expected: first,
                    actual: mask.dims(),
                });
            }
        }
        Ok(Self { raters })
    }

    pub fn num_raters(&self) -> usize {
        self.raters.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raters[0].dims()
    }

    /// Voxels per rater.
    pub fn num_voxels(&self) -> usize {
        self.raters[0].as_slice().len()
    }

    pub fn raters(&self) -> &[BinaryMask] {
        &self.raters
    }

    pub fn rater(&self, r: usize) -> &BinaryMask {
        &self.raters[r]
    }

    /// Foreground vote count at flat voxel index `idx`.
    pub fn votes_at(&self, idx: usize) -> usize {
        self.raters
            .iter()
            .filter(|m| m.as_slice()[idx] == 1)
            .count()
    }
}

/// Per-voxel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundProbMap(Grid2D<f64>);

impl ForegroundProbMap {
    /// Clamps every element into `[0, 1]`. NaN is rejected.
    pub fn new(grid: Grid2D<f64>) -> Result<Self> {
        if grid.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidShape("probability map contains NaN".into()));
        }
        Ok(Self(grid.map(|&v| v.clamp(0.0, 1.0))))
    }

    pub fn grid(&self) -> &Grid2D<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_grid(self) -> Grid2D<f64> {
        self.0
    }
}

/// One image with its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Grid2D<f64>,
    pub annotations: RaterStack,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Grid2D<f64>, annotations: RaterStack) -> Result<Self> {
        let id = id.into();
        if image.dims() != annotations.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("sample {id:?}"),
                expected: image.dims(),
                actual: annotations.dims(),
            });
        }
        Ok(Self {
            id,
            image,
            annotations,
        })
    }
}
