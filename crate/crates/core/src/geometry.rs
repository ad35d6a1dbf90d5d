//! Spatial bookkeeping between the satellite and radar grids.
//!
//! Arrays are channel-major with any number of leading axes
//! (`[C,H,W]`, `[T,C,H,W]`, `[B,T,C,H,W]`); every operation acts on the two
//! trailing spatial axes.

use serde::{Deserialize, Serialize};
use wfn_tensor::{kernels, ops, Float, Tensor, Var};

use crate::error::{invalid, Result};

/// A regular grid of square pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
    pub km_per_pixel: f64,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, km_per_pixel: f64) -> Result<Self> {
        if height == 0 || width == 0 || !(km_per_pixel > 0.0) {
            return Err(invalid(format!(
                "grid needs positive size and resolution, got {height}x{width} @ {km_per_pixel} km"
            )));
        }
        Ok(Self {
            height,
            width,
            km_per_pixel,
        })
    }

    /// 252 x 252 pixels at 12 km.
    pub fn satellite() -> Self {
        Self {
            height: 252,
            width: 252,
            km_per_pixel: 12.0,
        }
    }

    /// 252 x 252 pixels at 2 km over the center of the satellite grid.
    pub fn radar() -> Self {
        Self {
            height: 252,
            width: 252,
            km_per_pixel: 2.0,
        }
    }

    pub fn extent_km(&self) -> (f64, f64) {
        (
            self.height as f64 * self.km_per_pixel,
            self.width as f64 * self.km_per_pixel,
        )
    }
}

/// How the satellite grid maps onto network inputs and the radar grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Side of the (square) satellite grid.
    pub sat_size: usize,
    /// Replicate padding added on each side before a U-Net.
    pub unet_pad: usize,
    /// Side of the satellite-grid window covered by radar.
    pub radar_crop: usize,
    /// Satellite-to-radar upsampling factor.
    pub upscale: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            sat_size: 252,
            unet_pad: 2,
            radar_crop: 42,
            upscale: 6,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.sat_size == 0 || self.radar_crop == 0 || self.upscale == 0 {
            return Err(invalid(format!("degenerate geometry {self:?}")));
        }
        if self.radar_crop > self.sat_size || (self.sat_size - self.radar_crop) % 2 != 0 {
            return Err(invalid(format!(
                "radar window {} must fit centrally in the {} satellite grid with an even margin",
                self.radar_crop, self.sat_size
            )));
        }
        Ok(())
    }

    pub fn radar_size(&self) -> usize {
        self.radar_crop * self.upscale
    }

    pub fn unet_input_size(&self) -> usize {
        self.sat_size + 2 * self.unet_pad
    }

    /// Row/column of the first satellite pixel inside the radar window.
    pub fn crop_offset(&self) -> usize {
        (self.sat_size - self.radar_crop) / 2
    }

    pub fn crop_and_upscale<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_spatial(x.shape())?;
        upsample_bilinear(&center_crop(x, self.radar_crop, self.radar_crop)?, self.upscale as i64)
    }

    pub fn crop_and_upscale_var<T: Float>(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check_spatial(x.shape())?;
        upsample_bilinear_var(&center_crop_var(x, self.radar_crop, self.radar_crop)?, self.upscale)
    }

    pub(crate) fn check_spatial(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = spatial(shape)?;
        if h != self.sat_size || w != self.sat_size {
            return Err(invalid(format!(
                "expected {0}x{0} satellite-grid input, got {h}x{w}",
                self.sat_size
            )));
        }
        Ok(())
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] if shape.len() >= 3 => Ok((*h, *w)),
        _ => Err(invalid(format!("expected at least [C,H,W], got {shape:?}"))),
    }
}

/// View any `[.., H, W]` array as `[1, planes, H, W]` for the 4-D kernels.
fn as_planes(shape: &[usize]) -> Result<Vec<usize>> {
    let (h, w) = spatial(shape)?;
    let planes: usize = shape[..shape.len() - 2].iter().product();
    Ok(vec![1, planes, h, w])
}

fn reshaped_like(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

fn crop_window(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    let (h, w) = spatial(shape)?;
    if out_h > h || out_w > w {
        return Err(invalid(format!("crop {out_h}x{out_w} larger than input {h}x{w}")));
    }
    if (h - out_h) % 2 != 0 || (w - out_w) % 2 != 0 {
        return Err(invalid(format!(
            "crop {out_h}x{out_w} from {h}x{w} leaves an odd margin"
        )));
    }
    Ok(((h - out_h) / 2, (w - out_w) / 2))
}

/// Replicate-pad the spatial axes by `pad` pixels on every side.
pub fn pad_replicate<T: Float>(x: &Tensor<T>, pad: i64) -> Result<Tensor<T>> {
    let pad = usize::try_from(pad).map_err(|_| invalid(format!("negative padding {pad}")))?;
    let (h, w) = spatial(x.shape())?;
    let planes = x.clone().reshape(as_planes(x.shape())?)?;
    let out = kernels::pad_replicate(&planes, pad)?;
    Ok(out.reshape(reshaped_like(x.shape(), h + 2 * pad, w + 2 * pad))?)
}

/// Central `out_h x out_w` window; margins must be even.
pub fn center_crop<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (top, left) = crop_window(x.shape(), out_h, out_w)?;
    let planes = x.clone().reshape(as_planes(x.shape())?)?;
    let out = kernels::crop2d(&planes, top, left, out_h, out_w)?;
    Ok(out.reshape(reshaped_like(x.shape(), out_h, out_w))?)
}

/// Bilinear upsampling by an integer factor with half-pixel sample centers:
/// output pixel `i` reads source coordinate `(i + 0.5) / scale - 0.5`,
/// clamped to the grid (edges replicate).
pub fn upsample_bilinear<T: Float>(x: &Tensor<T>, scale: i64) -> Result<Tensor<T>> {
    let scale = check_scale(scale)?;
    let (h, w) = spatial(x.shape())?;
    let planes = x.clone().reshape(as_planes(x.shape())?)?;
    let out = kernels::upsample_bilinear(&planes, scale)?;
    Ok(out.reshape(reshaped_like(x.shape(), h * scale, w * scale))?)
}

fn check_scale(scale: i64) -> Result<usize> {
    if scale < 1 {
        return Err(invalid(format!("upsample scale must be >= 1, got {scale}")));
    }
    Ok(scale as usize)
}

/// Center 42x42 crop of a 252x252 satellite-grid field, upsampled x6 onto
/// the radar grid.
pub fn crop_and_upscale<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Geometry::default().crop_and_upscale(x)
}

pub fn pad_replicate_var<T: Float>(x: &Var<T>, pad: usize) -> Result<Var<T>> {
    let (h, w) = spatial(x.shape())?;
    let out = ops::pad_replicate(&ops::reshape(x, &as_planes(x.shape())?)?, pad)?;
    Ok(ops::reshape(&out, &reshaped_like(x.shape(), h + 2 * pad, w + 2 * pad))?)
}

pub fn center_crop_var<T: Float>(x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
    let (top, left) = crop_window(x.shape(), out_h, out_w)?;
    let out = ops::crop2d(&ops::reshape(x, &as_planes(x.shape())?)?, top, left, out_h, out_w)?;
    Ok(ops::reshape(&out, &reshaped_like(x.shape(), out_h, out_w))?)
}

pub fn upsample_bilinear_var<T: Float>(x: &Var<T>, scale: usize) -> Result<Var<T>> {
    let scale = check_scale(scale as i64)?;
    let (h, w) = spatial(x.shape())?;
    let out = ops::upsample_bilinear(&ops::reshape(x, &as_planes(x.shape())?)?, scale)?;
    Ok(ops::reshape(&out, &reshaped_like(x.shape(), h * scale, w * scale))?)
}
