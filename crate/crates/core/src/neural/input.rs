//! 2.5D network input: `Z` neighbouring z-slices of every image channel,
//! stacked along the channel axis and centred on the prediction slice.

use super::Tensor;
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_Z_SLICES: usize = 5;

/// A `(C·Z, H, W)` tensor; channel `s·C + c` holds image channel `c` at
/// slice offset `s − Z/2`. Out-of-range slices replicate the edge slice.
pub type InputStack = Tensor<f32>;

/// Axis-aligned in-plane window, `x0..x0+width`, `y0..y0+height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn full(image: &Volume) -> Self {
        let [nx, ny, _] = image.dims();
        Self { x0: 0, y0: 0, width: nx, height: ny }
    }
}

/// Per-channel z-score over the whole volume. Constant channels map to zero.
pub fn standardize(image: &Volume) -> Volume {
    let mut out = image.clone();
    for c in 0..image.channels() {
        let data = out.channel_mut(c);
        let n = data.len() as f64;
        let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for x in data.iter_mut() {
            *x = ((*x as f64 - mean) * scale) as f32;
        }
    }
    out
}

pub fn input_channels(image_channels: usize, z_slices: usize) -> usize {
    image_channels * z_slices
}

/// Full-slice input stack for slice `z`.
pub fn input_stack(image: &Volume, z: usize, z_slices: usize) -> Result<InputStack> {
    input_stack_window(image, z, z_slices, Window::full(image))
}

pub fn input_stack_window(image: &Volume, z: usize, z_slices: usize, win: Window) -> Result<InputStack> {
    let [nx, ny, nz] = image.dims();
    if z >= nz {
        return Err(Error::Shape(format!("slice {z} out of range for depth {nz}")));
    }
    if z_slices == 0 || z_slices.is_multiple_of(2) {
        return Err(Error::Config(format!("z_slices must be odd, got {z_slices}")));
    }
    if win.x0 + win.width > nx || win.y0 + win.height > ny || win.width == 0 || win.height == 0 {
        return Err(Error::Shape(format!("window {win:?} outside {nx}x{ny} slice")));
    }
    let c_img = image.channels();
    let half = (z_slices / 2) as isize;
    let mut out = Tensor::zeros(c_img * z_slices, win.height, win.width);
    let plane = win.width * win.height;
    for s in 0..z_slices {
        let zz = (z as isize + s as isize - half).clamp(0, nz as isize - 1) as usize;
        for c in 0..c_img {
            let src = image.plane(c, zz);
            let dst = &mut out.data[(s * c_img + c) * plane..][..plane];
            for row in 0..win.height {
                let from = (win.y0 + row) * nx + win.x0;
                dst[row * win.width..(row + 1) * win.width].copy_from_slice(&src[from..from + win.width]);
            }
        }
    }
    Ok(out)
}
