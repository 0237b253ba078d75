use super::{grad_slot, NetworkGrads, NetworkKind, NetworkParams, ShapeLog};
use crate::error::{Error, Result};
use crate::fogmodel::{ImageTensor, RangeTag};
use crate::ops::{unit_backward, unit_forward, UnitCache};
use crate::tensor::{Real, Tensor};

pub const RESIDUAL_BLOCKS: usize = 9;
const ENCODER: usize = 3;

/// Saved activations of one defog pass.
pub struct DefogTrace<T> {
    units: Vec<UnitCache<T>>,
    pub shapes: ShapeLog,
}

fn check<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<()> {
    if params.kind() != NetworkKind::Defog {
        return Err(Error::Shape(format!("defog pass given {} parameters", params.kind())));
    }
    if x.channels() != 3 || x.height() % 4 != 0 || x.width() % 4 != 0 || x.height() == 0 || x.width() == 0 {
        return Err(Error::Shape(format!(
            "defog input must be 3-channel with sides divisible by 4, got {}",
            x.shape()
        )));
    }
    Ok(())
}

/// Encoder, nine residual blocks, mirrored decoder, tanh output.
pub fn defog_forward_traced<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, DefogTrace<T>)> {
    check(params, x)?;
    let mut units = Vec::with_capacity(params.layers().len());
    let mut shapes = ShapeLog::default();
    let mut run = |i: usize, input: &Tensor<T>, units: &mut Vec<UnitCache<T>>| {
        let l = params.layer(i);
        let (y, c) = unit_forward(&l.spec, &l.weight, &l.bias, input);
        shapes.push(&l.spec.name, y.shape());
        units.push(c);
        y
    };
    let mut h = x.clone();
    for i in 0..ENCODER {
        h = run(i, &h, &mut units);
    }
    for b in 0..RESIDUAL_BLOCKS {
        let a = run(ENCODER + 2 * b, &h, &mut units);
        let mut r = run(ENCODER + 2 * b + 1, &a, &mut units);
        r.add_assign(&h);
        h = r;
    }
    let first_dec = ENCODER + 2 * RESIDUAL_BLOCKS;
    for i in first_dec..params.layers().len() {
        h = run(i, &h, &mut units);
    }
    Ok((h, DefogTrace { units, shapes }))
}

/// Inference on a signed-range image.
pub fn defog_forward<T: Real>(params: &NetworkParams<T>, foggy: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    let input = foggy.to_signed();
    let (out, _) = defog_forward_traced(params, input.pixels())?;
    ImageTensor::new(out, RangeTag::Signed)
}

pub fn defog_backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &DefogTrace<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut NetworkGrads<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let n = params.layers().len();
    let first_dec = ENCODER + 2 * RESIDUAL_BLOCKS;
    let back = |i: usize, g: &Tensor<T>, need: bool, grads: &mut Option<&mut NetworkGrads<T>>| {
        let l = params.layer(i);
        unit_backward(&l.spec, &l.weight, &trace.units[i], g, grad_slot(grads, i), need)
    };
    let mut g = dout.clone();
    for i in (first_dec..n).rev() {
        g = back(i, &g, true, &mut grads).expect("input gradient requested");
    }
    for b in (0..RESIDUAL_BLOCKS).rev() {
        let ga = back(ENCODER + 2 * b + 1, &g, true, &mut grads).expect("input gradient requested");
        let gx = back(ENCODER + 2 * b, &ga, true, &mut grads).expect("input gradient requested");
        g.add_assign(&gx);
    }
    for i in (1..ENCODER).rev() {
        g = back(i, &g, true, &mut grads).expect("input gradient requested");
    }
    back(0, &g, need_input, &mut grads)
}
