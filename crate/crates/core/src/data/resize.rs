//! Image and mask resizing.
//!
//! Images use the same half-pixel bilinear convention as the network's
//! 2x upsampling; masks go through nearest-neighbor and are re-binarized
//! so no pathway can manufacture fractional mask values.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

use super::Sample;

/// Bilinear resize of a `[C,H,W]` image to `[C,oh,ow]`.
pub fn resize_bilinear(image: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("resize wants [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (oh, ow) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        out.extend(kernels::resize_bilinear_plane(
            &image.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            oh,
            ow,
        ));
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Nearest-neighbor resize of a `[1,H,W]` mask, re-binarized at 0.5.
pub fn resize_mask_nearest(mask: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Shape(format!("mask resize wants [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if (h, w) == (oh, ow) {
        return Ok(mask.clone());
    }
    let out: Vec<f32> = kernels::resize_nearest_plane(mask.data(), h, w, oh, ow)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, oh, ow], out)
}

/// Resizes a sample to `size x size` (bilinear image, nearest mask).
pub fn resize_sample(sample: &Sample, size: usize) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        image: resize_bilinear(&sample.image, size, size)?,
        mask: resize_mask_nearest(&sample.mask, size, size)?,
    })
}
