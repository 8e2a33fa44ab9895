//! Partitioning images into fixed-size square patches and reassembling them.
//!
//! Images are reflect-padded up to the next multiple of the patch size (pad
//! split evenly between the two sides of each axis, extra pixel at the
//! bottom/right) and cut in row-major grid order. That order is the
//! canonical token order used by everything downstream.

use haze_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MIN_PATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub original_height: usize,
    pub original_width: usize,
    pub patch_size: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<TileLayout> {
        if patch_size < MIN_PATCH_SIZE {
            return Err(Error::Tiling(format!(
                "patch size {patch_size} is below the minimum of {MIN_PATCH_SIZE}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Tiling(format!("empty image {height}x{width}")));
        }
        if patch_size > 4 * height.max(width) {
            return Err(Error::Tiling(format!(
                "patch size {patch_size} is more than 4x the image extent {height}x{width}"
            )));
        }
        let rows = height.div_ceil(patch_size);
        let cols = width.div_ceil(patch_size);
        let pad_h = rows * patch_size - height;
        let pad_w = cols * patch_size - width;
        Ok(TileLayout {
            original_height: height,
            original_width: width,
            patch_size,
            pad_top: pad_h / 2,
            pad_bottom: pad_h - pad_h / 2,
            pad_left: pad_w / 2,
            pad_right: pad_w - pad_w / 2,
            grid_rows: rows,
            grid_cols: cols,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn padded_height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn padded_width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    /// Source row of every padded row.
    pub fn row_sources(&self) -> Vec<usize> {
        (0..self.padded_height())
            .map(|r| reflect(r as isize - self.pad_top as isize, self.original_height))
            .collect()
    }

    pub fn col_sources(&self) -> Vec<usize> {
        (0..self.padded_width())
            .map(|c| reflect(c as isize - self.pad_left as isize, self.original_width))
            .collect()
    }

    fn check(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.original_height + self.pad_top + self.pad_bottom == self.padded_height()
            && self.original_width + self.pad_left + self.pad_right == self.padded_width()
            && [self.pad_top, self.pad_bottom, self.pad_left, self.pad_right]
                .iter()
                .all(|&p| p < self.patch_size);
        if ok {
            Ok(())
        } else {
            Err(Error::Tiling(format!("inconsistent layout {self:?}")))
        }
    }
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), reflecting repeatedly when needed.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Square patches in row-major grid order, each `patch_size^2 x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    patch_size: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PatchBatch {
    pub fn new(patch_size: usize, channels: usize, data: Vec<f32>) -> Result<PatchBatch> {
        let per = patch_size * patch_size * channels;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form {patch_size}x{patch_size}x{channels} patches",
                data.len()
            )));
        }
        Ok(PatchBatch {
            patch_size,
            channels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.patch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[index * n..(index + 1) * n]
    }

    /// Contiguous data for patches `start..start + count`.
    pub fn range(&self, start: usize, count: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[start * n..(start + count) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Reflect-pad `image` to a multiple of `patch_size` and cut it row-major.
pub fn partition(image: &ImageTensor, patch_size: usize) -> Result<(PatchBatch, TileLayout)> {
    if !image.is_finite() {
        return Err(Error::Tiling("image contains non-finite values".into()));
    }
    let layout = TileLayout::new(image.height(), image.width(), patch_size)?;
    let rows = layout.row_sources();
    let cols = layout.col_sources();
    let c = image.channels();
    let p = patch_size;
    let src = image.data();
    let w = image.width();
    let mut data = Vec::with_capacity(layout.num_patches() * p * p * c);
    for gr in 0..layout.grid_rows {
        for gc in 0..layout.grid_cols {
            for &sy in &rows[gr * p..(gr + 1) * p] {
                let row = &src[sy * w * c..(sy + 1) * w * c];
                for &sx in &cols[gc * p..(gc + 1) * p] {
                    data.extend_from_slice(&row[sx * c..(sx + 1) * c]);
                }
            }
        }
    }
    Ok((PatchBatch::new(p, c, data)?, layout))
}

/// Inverse of [`partition`]: place patches on the padded canvas and crop the
/// padding away.
pub fn reassemble(patches: &PatchBatch, layout: &TileLayout) -> Result<ImageTensor> {
    layout.check()?;
    if patches.patch_size() != layout.patch_size || patches.len() != layout.num_patches() {
        return Err(Error::Tiling(format!(
            "{} patches of {}px do not match a {}x{} grid of {}px",
            patches.len(),
            patches.patch_size(),
            layout.grid_rows,
            layout.grid_cols,
            layout.patch_size
        )));
    }
    let (h, w, p, c) = (
        layout.original_height,
        layout.original_width,
        layout.patch_size,
        patches.channels(),
    );
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        let py = y + layout.pad_top;
        let (gr, iy) = (py / p, py % p);
        // Walk the output row patch-column by patch-column.
        let mut x = 0;
        while x < w {
            let px = x + layout.pad_left;
            let (gc, ix) = (px / p, px % p);
            let run = (p - ix).min(w - x);
            let patch = patches.patch(gr * layout.grid_cols + gc);
            let src = (iy * p + ix) * c;
            data[(y * w + x) * c..(y * w + x + run) * c].copy_from_slice(&patch[src..src + run * c]);
            x += run;
        }
    }
    ImageTensor::new(h, w, c, data)
}

/// Differentiable [`partition`] of an `[H, W, C]` tensor into
/// `[num_patches, p, p, C]`.
pub fn partition_tensor(image: &Tensor, layout: &TileLayout) -> Tensor {
    let c = image.dim(2);
    let p = layout.patch_size;
    image
        .gather(0, &layout.row_sources())
        .gather(1, &layout.col_sources())
        .reshape(&[layout.grid_rows, p, layout.grid_cols, p, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[layout.num_patches(), p, p, c])
}

/// Differentiable [`reassemble`] of `[num_patches, p, p, C]` into `[H, W, C]`.
pub fn reassemble_tensor(patches: &Tensor, layout: &TileLayout) -> Tensor {
    let c = patches.dim(3);
    let p = layout.patch_size;
    patches
        .reshape(&[layout.grid_rows, layout.grid_cols, p, p, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshape(&[layout.padded_height(), layout.padded_width(), c])
        .narrow(0, layout.pad_top, layout.original_height)
        .narrow(1, layout.pad_left, layout.original_width)
}
