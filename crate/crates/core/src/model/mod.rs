//! The miniature U-Net: configuration, flat parameter storage with
//! batch-norm tagging, forward passes and the Dice metric.

mod checkpoint;
mod metric;
mod params;
mod unet;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use metric::{binarize, dice, DEFAULT_THRESHOLD};
pub use params::{ParamSet, Segment, SegmentKind};
pub use unet::{
    build_model, forward, forward_on_tape, loss_and_grad, predict, recalibrate_bn, ConvLayer, Mode, ModelConfig,
    SegBatch, TapeParams, TrainStep, UNet, BN_EPS, BN_MOMENTUM,
};

use crate::error::Result;
use crate::tensor::Tensor;

/// Black-box access to a segmentation model: images in, probability maps
/// out. Evaluation and membership inference only ever see this surface.
pub trait Segmenter: Sync {
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

impl Segmenter for ParamSet {
    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        predict(self, images)
    }
}
