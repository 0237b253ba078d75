use super::{grad_slot, NetworkGrads, NetworkKind, NetworkParams, ShapeLog};
use crate::error::{Error, Result};
use crate::fogmodel::ImageTensor;
use crate::ops::{unit_backward, unit_forward, UnitCache};
use crate::tensor::{Real, Tensor};

pub const DISCRIMINATOR_MIN_SIDE: usize = 32;

pub struct DiscriminatorTrace<T> {
    units: Vec<UnitCache<T>>,
    pub shapes: ShapeLog,
}

/// Five 4×4 stride-2 blocks; the result is a `ceil(H/32)×ceil(W/32)` patch
/// score map.
pub fn discriminator_forward_traced<T: Real>(
    params: &NetworkParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, DiscriminatorTrace<T>)> {
    if params.kind() != NetworkKind::Discriminator {
        return Err(Error::Shape(format!("discriminator pass given {} parameters", params.kind())));
    }
    if x.channels() != 3 || x.height() < DISCRIMINATOR_MIN_SIDE || x.width() < DISCRIMINATOR_MIN_SIDE {
        return Err(Error::Shape(format!(
            "discriminator input must be 3-channel and at least {DISCRIMINATOR_MIN_SIDE}x{DISCRIMINATOR_MIN_SIDE}, got {}",
            x.shape()
        )));
    }
    let mut units = Vec::with_capacity(params.layers().len());
    let mut shapes = ShapeLog::default();
    let mut h = x.clone();
    for l in params.layers() {
        let (y, c) = unit_forward(&l.spec, &l.weight, &l.bias, &h);
        shapes.push(&l.spec.name, y.shape());
        units.push(c);
        h = y;
    }
    Ok((h, DiscriminatorTrace { units, shapes }))
}

pub fn discriminator_forward<T: Real>(params: &NetworkParams<T>, image: &ImageTensor<T>) -> Result<Tensor<T>> {
    let input = image.to_signed();
    discriminator_forward_traced(params, input.pixels()).map(|(s, _)| s)
}

pub fn discriminator_backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &DiscriminatorTrace<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut NetworkGrads<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let mut g = dout.clone();
    for i in (0..params.layers().len()).rev() {
        let l = params.layer(i);
        let need = i > 0 || need_input;
        g = unit_backward(&l.spec, &l.weight, &trace.units[i], &g, grad_slot(&mut grads, i), need)?;
    }
    Some(g)
}
