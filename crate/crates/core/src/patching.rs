//! Non-overlapping `k×k` patch extraction over a feature map.
//!
//! Patch `(i, j)` becomes row `i·cols + j` of the patch matrix. Inside a
//! patch, values are laid out in (row, col, channel) lexicographic order.

use std::sync::Arc;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    /// Grid for a `channels×height×width` map cut into `k×k` patches.
    pub fn new(channels: usize, height: usize, width: usize, k: usize) -> Result<Self> {
        if k == 0 || height % k != 0 || width % k != 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "patch size {k} must divide the feature map extents H'={height}, W'={width}"
            )));
        }
        Ok(PatchGrid {
            rows: height / k,
            cols: width / k,
            patch_size: k,
            channels,
        })
    }

    /// A bare `rows×cols` grid (for graph construction tests and tools).
    pub fn of_size(rows: usize, cols: usize) -> Self {
        PatchGrid {
            rows,
            cols,
            patch_size: 1,
            channels: 1,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    /// Grid coordinates `(i, j)` of node `u`.
    pub fn coords(&self, u: usize) -> (usize, usize) {
        (u / self.cols, u % self.cols)
    }

    /// For every element of the patch matrix, its flat index in the
    /// `[D×H'×W']` feature map.
    pub fn unfold_index(&self) -> Vec<usize> {
        let (k, d) = (self.patch_size, self.channels);
        let (h, w) = (self.height(), self.width());
        let mut index = Vec::with_capacity(self.num_nodes() * self.feature_dim());
        for i in 0..self.rows {
            for j in 0..self.cols {
                for dy in 0..k {
                    for dx in 0..k {
                        for c in 0..d {
                            index.push(c * h * w + (i * k + dy) * w + j * k + dx);
                        }
                    }
                }
            }
        }
        index
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix {
    /// `[|V| × k²D]`, one row per patch in raster order.
    pub x: Tensor,
    pub grid: PatchGrid,
}

pub fn unfold(fm: &FeatureMap, k: usize) -> Result<PatchMatrix> {
    let grid = PatchGrid::new(fm.channels(), fm.height(), fm.width(), k)?;
    let src = fm.data.data();
    let data = grid.unfold_index().into_iter().map(|i| src[i]).collect();
    Ok(PatchMatrix {
        x: Tensor::new(vec![grid.num_nodes(), grid.feature_dim()], data)?,
        grid,
    })
}

/// Inverse of [`unfold`]. The stride of the rebuilt map is 1.
pub fn fold(pm: &PatchMatrix) -> Result<FeatureMap> {
    let g = pm.grid;
    if pm.x.shape() != [g.num_nodes(), g.feature_dim()] {
        return Err(Error::shape("fold", pm.x.shape(), &[g.num_nodes(), g.feature_dim()]));
    }
    let mut out = vec![0.0; pm.x.numel()];
    for (v, i) in pm.x.data().iter().zip(g.unfold_index()) {
        out[i] = *v;
    }
    FeatureMap::new(Tensor::new(vec![g.channels, g.height(), g.width()], out)?, 1)
}

/// [`unfold`] on the tape; the gradient flows back as a pure permutation.
pub fn unfold_var(tape: &mut Tape, fm: Var, k: usize) -> Result<(Var, PatchGrid)> {
    let s = tape.shape(fm).to_vec();
    if s.len() != 3 {
        return Err(Error::contract(format!("unfold expects D×H×W, got {s:?}")));
    }
    let grid = PatchGrid::new(s[0], s[1], s[2], k)?;
    let x = tape.gather(fm, Arc::new(grid.unfold_index()), &[grid.num_nodes(), grid.feature_dim()])?;
    Ok((x, grid))
}
