use super::{grad_slot, NetworkGrads, NetworkKind, NetworkParams, ShapeLog};
use crate::error::{Error, Result};
use crate::fogmodel::{ImageTensor, RangeTag};
use crate::ops::{unit_backward, unit_forward, upsample_nearest2, upsample_nearest2_adjoint, UnitCache};
use crate::tensor::{Real, Tensor};

const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const DEC1: usize = 3;
const DEC2: usize = 4;
const DEC3: usize = 5;
const FUSE: usize = 6;
const OUT: usize = 7;

/// Saved activations of one enhancer pass.
pub struct EnhancerTrace<T> {
    units: Vec<UnitCache<T>>,
    e1_up: Tensor<T>,
    fused: Tensor<T>,
    pub shapes: ShapeLog,
}

/// Three stride-2 encoder blocks, three upsampling blocks with additive skips,
/// a 1×1 fusion of the decoder output with the upsampled first encoder
/// feature, a multiplicative gate by that same feature, and a tanh output conv.
pub fn enhancer_forward_traced<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, EnhancerTrace<T>)> {
    if params.kind() != NetworkKind::Enhancer {
        return Err(Error::Shape(format!("enhancer pass given {} parameters", params.kind())));
    }
    if x.channels() != 3 || x.height() % 8 != 0 || x.width() % 8 != 0 || x.height() == 0 || x.width() == 0 {
        return Err(Error::Shape(format!(
            "enhancer input must be 3-channel with sides divisible by 8, got {}",
            x.shape()
        )));
    }
    let mut units: Vec<Option<UnitCache<T>>> = (0..params.layers().len()).map(|_| None).collect();
    let mut shapes = ShapeLog::default();
    let mut run = |i: usize, input: &Tensor<T>| {
        let l = params.layer(i);
        let (y, c) = unit_forward(&l.spec, &l.weight, &l.bias, input);
        shapes.push(&l.spec.name, y.shape());
        units[i] = Some(c);
        y
    };
    let e1 = run(ENC1, x);
    let e2 = run(ENC2, &e1);
    let e3 = run(ENC3, &e2);
    let mut s1 = run(DEC1, &e3);
    s1.add_assign(&e2);
    let mut s2 = run(DEC2, &s1);
    s2.add_assign(&e1);
    // No encoder feature exists at full resolution, so the last decoder block has no skip.
    let d3 = run(DEC3, &s2);
    let e1_up = upsample_nearest2(&e1);
    let cat = Tensor::concat_channels(&[&d3, &e1_up])?;
    let fused = run(FUSE, &cat);
    let gated = fused.zip_map(&e1_up, |a, b| a * b);
    let out = run(OUT, &gated);
    let units = units.into_iter().map(|u| u.expect("every layer ran")).collect();
    Ok((
        out,
        EnhancerTrace {
            units,
            e1_up,
            fused,
            shapes,
        },
    ))
}

pub fn enhancer_forward<T: Real>(params: &NetworkParams<T>, image: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    let input = image.to_signed();
    let (out, _) = enhancer_forward_traced(params, input.pixels())?;
    ImageTensor::new(out, RangeTag::Signed)
}

pub fn enhancer_backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &EnhancerTrace<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut NetworkGrads<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let mut back = |i: usize, g: &Tensor<T>, need: bool| {
        let l = params.layer(i);
        unit_backward(&l.spec, &l.weight, &trace.units[i], g, grad_slot(&mut grads, i), need)
    };
    let d_gated = back(OUT, dout, true).unwrap();
    let d_fused = d_gated.zip_map(&trace.e1_up, |g, b| g * b);
    let mut d_e1_up = d_gated.zip_map(&trace.fused, |g, a| g * a);
    let d_cat = back(FUSE, &d_fused, true).unwrap();
    let dec_ch = params.layer(DEC3).spec.out_ch;
    let (d_d3, d_up_part) = d_cat.split_channels(dec_ch);
    d_e1_up.add_assign(&d_up_part);
    let d_s2 = back(DEC3, &d_d3, true).unwrap();
    let mut d_e1 = d_s2.clone();
    let d_s1 = back(DEC2, &d_s2, true).unwrap();
    let mut d_e2 = d_s1.clone();
    let d_e3 = back(DEC1, &d_s1, true).unwrap();
    d_e2.add_assign(&back(ENC3, &d_e3, true).unwrap());
    d_e1.add_assign(&back(ENC2, &d_e2, true).unwrap());
    d_e1.add_assign(&upsample_nearest2_adjoint(&d_e1_up));
    back(ENC1, &d_e1, need_input)
}
