//! Procedural CT-like slices with tumor masks, the non-IID client split and
//! the on-disk dataset format.

mod federation;
mod format;
mod generate;

pub use federation::{
    build_federation, federation_plan, generate_federation, load_federation, ClientData,
    ClientEntry, DatasetManifest, Federation, FederationPlan, Scale,
};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_VERSION};
pub use generate::{
    generate_sample, generate_slice, ClientSpec, GenOptions, RadiusDist, SizeSkew, SliceMeta,
    SliceSample,
};

use crate::error::{Error, Result};
use crate::model::SegBatch;
use crate::tensor::Tensor;

/// Stacks slices into an image/mask batch.
pub fn to_batch(samples: &[&SliceSample]) -> Result<SegBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("to_batch", "mixed slice sizes"));
        }
        images.extend_from_slice(&s.image);
        masks.extend(s.mask.iter().map(|&m| m as f32));
    }
    let n = samples.len();
    SegBatch::new(
        Tensor::new([n, 1, h, w], images)?,
        Tensor::new([n, 1, h, w], masks)?,
    )
}
