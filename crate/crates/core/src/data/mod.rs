//! Dataset ingestion, the synthetic desk-scale dataset, and checkpoints.

pub mod checkpoint;
pub mod netpbm;
pub mod resize;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/mask pair. Images are `[3,H,W]` in `[0,1]`; masks are
/// `[1,H,W]` with elements exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let is = self.image.shape();
        let ms = self.mask.shape();
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::Data(format!(
                "sample '{}': image must be [3,H,W], got {is:?}",
                self.id
            )));
        }
        if ms.len() != 3 || ms[0] != 1 || ms[1..] != is[1..] {
            return Err(Error::Data(format!(
                "sample '{}': mask {ms:?} does not pair with image {is:?}",
                self.id
            )));
        }
        if !self.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!(
                "sample '{}': image values outside [0,1]",
                self.id
            )));
        }
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Data(format!(
                "sample '{}': mask is not binary",
                self.id
            )));
        }
        Ok(())
    }
}
