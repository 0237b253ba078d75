use std::path::Path;

use super::{load_checkpoint, Role};
use crate::data::io::resize_bilinear;
use crate::error::Result;
use crate::fogmodel::ImageTensor;
use crate::networks::{defog_forward, NetworkParams};

/// The trained defog generator with the resolution it was trained at.
#[derive(Debug, Clone)]
pub struct DefogModel {
    pub params: NetworkParams<f32>,
    pub image_size: usize,
}

impl DefogModel {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (mut state, config) = load_checkpoint(checkpoint)?;
        Ok(DefogModel {
            params: state.nets.swap_remove(Role::Defog.index()),
            image_size: config.image_size,
        })
    }

    /// Resizes to the model resolution, removes fog and resizes back.
    pub fn defog(&self, image: &ImageTensor<f64>) -> Result<ImageTensor<f64>> {
        let (h, w) = (image.height(), image.width());
        let small = resize_bilinear(&image.to_unit(), self.image_size, self.image_size)?;
        let out = defog_forward(&self.params, &small.cast::<f32>())?;
        resize_bilinear(&out.cast::<f64>().to_unit(), h, w)
    }
}
