//! Tiling of large images into fixed-size patches and exact reassembly.
//!
//! Extents that are not covered by whole patches are reflect-padded on the
//! bottom/right up to the next patch position; reassembly crops the padding
//! away again. Where patches overlap, each pixel is taken from the patch in
//! which it lies furthest from an edge, so the round trip is exact.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub size: usize,
    pub stride: usize,
    pub channels: usize,
    /// `(height, width)` of the source image.
    pub original: (usize, usize),
    /// `(height, width)` after reflect padding.
    pub padded: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// `[C, size, size]` patches in row-major grid order.
    pub patches: Vec<Tensor<T>>,
}

/// Number of patch positions along an axis of length `len`.
fn positions(len: usize, size: usize, stride: usize) -> usize {
    (len - size).div_ceil(stride) + 1
}

fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

/// For every coordinate, the patch index it is read from on reassembly.
fn owners(len: usize, count: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..len)
        .map(|y| {
            let mut best = (0usize, -1isize);
            for i in 0..count {
                let start = i * stride;
                if y < start || y >= start + size {
                    continue;
                }
                let depth = (y - start).min(start + size - 1 - y) as isize;
                if depth > best.1 {
                    best = (i, depth);
                }
            }
            best.0
        })
        .collect()
}

/// Splits a `[C, H, W]` image into a patch grid.
pub fn extract_patches<T: Scalar>(img: &Tensor<T>, size: usize, stride: usize) -> Result<PatchGrid<T>> {
    if img.rank() != 3 {
        return Err(Error::InvalidArgument(format!("expected a CHW image, got shape {:?}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} and stride {stride} must satisfy 0 < stride <= size"
        )));
    }
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!("patch size {size} exceeds image extent {h}x{w}")));
    }
    let (rows, cols) = (positions(h, size, stride), positions(w, size, stride));
    let padded = ((rows - 1) * stride + size, (cols - 1) * stride + size);
    let src = img.data();
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let (y0, x0) = (r * stride, q * stride);
            let mut data = Vec::with_capacity(c * size * size);
            for ch in 0..c {
                for dy in 0..size {
                    let y = reflect(y0 + dy, h);
                    let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                    if x0 + size <= w {
                        data.extend_from_slice(&row[x0..x0 + size]);
                    } else {
                        data.extend((0..size).map(|dx| row[reflect(x0 + dx, w)]));
                    }
                }
            }
            patches.push(Tensor::from_vec(&[c, size, size], data)?);
        }
    }
    Ok(PatchGrid {
        size,
        stride,
        channels: c,
        original: (h, w),
        padded,
        rows,
        cols,
        patches,
    })
}

impl<T: Scalar> PatchGrid<T> {
    /// Reassembles `patches` (same geometry as this grid) into an image of
    /// the original extents.
    pub fn reassemble_with(&self, patches: &[Tensor<T>]) -> Result<Tensor<T>> {
        if patches.len() != self.rows * self.cols {
            return Err(Error::InvalidArgument(format!(
                "expected {} patches, got {}",
                self.rows * self.cols,
                patches.len()
            )));
        }
        let expected = [self.channels, self.size, self.size];
        if let Some(p) = patches.iter().find(|p| p.shape() != expected) {
            return crate::error::shape_err("reassemble", p.shape(), &expected);
        }
        let (h, w) = self.original;
        let row_owner = owners(h, self.rows, self.size, self.stride);
        let col_owner = owners(w, self.cols, self.size, self.stride);
        let s = self.size;
        let mut out = Vec::with_capacity(self.channels * h * w);
        for ch in 0..self.channels {
            for y in 0..h {
                let r = row_owner[y];
                let dy = y - r * self.stride;
                for x in 0..w {
                    let q = col_owner[x];
                    let dx = x - q * self.stride;
                    out.push(patches[r * self.cols + q].data()[(ch * s + dy) * s + dx]);
                }
            }
        }
        Tensor::from_vec(&[self.channels, h, w], out)
    }

    pub fn reassemble(&self) -> Result<Tensor<T>> {
        self.reassemble_with(&self.patches)
    }
}
