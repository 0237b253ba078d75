use super::{grad_slot, NetworkGrads, NetworkKind, NetworkParams, ShapeLog};
use crate::error::{Error, Result};
use crate::fogmodel::{AtmosphericLight, ImageTensor, RangeTag, TransmissionMap, T_MIN};
use crate::ops::{unit_backward, unit_forward, UnitCache};
use crate::tensor::{Real, Shape, Tensor};

/// Saved activations of one refog pass.
pub struct RefogTrace<T> {
    units: Vec<UnitCache<T>>,
    clear_unit: Tensor<T>,
    transmission: Tensor<T>,
    /// `true` where the sigmoid output sat below the transmission floor.
    floored: Vec<bool>,
    airlight: [T; 3],
    pub shapes: ShapeLog,
}

impl<T: Real> RefogTrace<T> {
    pub fn transmission(&self) -> &Tensor<T> {
        &self.transmission
    }

    pub fn airlight(&self) -> AtmosphericLight {
        AtmosphericLight {
            rgb: self.airlight.map(|v| v.as_f64()),
        }
    }
}

/// Estimates `T` with the five-layer CNN and composes
/// `I = J·T + A·(1 − T)` in the unit range. Input and output are signed.
pub fn refog_forward_traced<T: Real>(
    params: &NetworkParams<T>,
    clear: &Tensor<T>,
    airlight: &AtmosphericLight,
) -> Result<(Tensor<T>, RefogTrace<T>)> {
    if params.kind() != NetworkKind::RefogT {
        return Err(Error::Shape(format!("refog pass given {} parameters", params.kind())));
    }
    if clear.channels() != 3 {
        return Err(Error::Shape(format!("refog input must be 3-channel, got {}", clear.shape())));
    }
    let mut units = Vec::with_capacity(params.layers().len());
    let mut shapes = ShapeLog::default();
    let mut h = clear.clone();
    for l in params.layers() {
        let (y, c) = unit_forward(&l.spec, &l.weight, &l.bias, &h);
        shapes.push(&l.spec.name, y.shape());
        units.push(c);
        h = y;
    }
    let floor = T::lit(T_MIN);
    let floored: Vec<bool> = h.data().iter().map(|&v| v < floor).collect();
    let transmission = h.map(|v| v.max(floor));
    let half = T::lit(0.5);
    let clear_unit = clear.map(|v| (v + T::one()) * half);
    let a = airlight.rgb.map(T::lit);
    let two = T::lit(2.0);
    let out = Tensor::from_fn(clear.shape(), |c, y, x| {
        let t = transmission.at(0, y, x);
        let fog = clear_unit.at(c, y, x) * t + a[c] * (T::one() - t);
        fog * two - T::one()
    });
    Ok((
        out,
        RefogTrace {
            units,
            clear_unit,
            transmission,
            floored,
            airlight: a,
            shapes,
        },
    ))
}

/// Refogs `clear` with the supplied airlight; returns the foggy image in the
/// caller's range together with the estimated transmission.
pub fn refog_forward<T: Real>(
    params: &NetworkParams<T>,
    clear: &ImageTensor<T>,
    airlight: &AtmosphericLight,
) -> Result<(ImageTensor<T>, TransmissionMap<T>)> {
    let signed = clear.to_signed();
    let (out, trace) = refog_forward_traced(params, signed.pixels(), airlight)?;
    let img = ImageTensor::new(out, RangeTag::Signed)?.to_range(clear.range());
    Ok((img, TransmissionMap::new(trace.transmission)?))
}

/// Gradients flow into both the clear image and the transmission estimator;
/// the airlight is a constant.
pub fn refog_backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &RefogTrace<T>,
    dout: &Tensor<T>,
    mut grads: Option<&mut NetworkGrads<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let s = dout.shape();
    let two = T::lit(2.0);
    let mut dt = Tensor::zeros(Shape::new(1, s.h, s.w));
    for c in 0..3 {
        for y in 0..s.h {
            for x in 0..s.w {
                *dt.at_mut(0, y, x) += two * (trace.clear_unit.at(c, y, x) - trace.airlight[c]) * dout.at(c, y, x);
            }
        }
    }
    for (g, &f) in dt.data_mut().iter_mut().zip(&trace.floored) {
        if f {
            *g = T::zero();
        }
    }
    let mut g = dt;
    let n = params.layers().len();
    for i in (0..n).rev() {
        let l = params.layer(i);
        let need = i > 0 || need_input;
        match unit_backward(&l.spec, &l.weight, &trace.units[i], &g, grad_slot(&mut grads, i), need) {
            Some(next) => g = next,
            None => return None,
        }
    }
    // Direct path: d out / d clear = T.
    let t = &trace.transmission;
    for c in 0..3 {
        for y in 0..s.h {
            for x in 0..s.w {
                *g.at_mut(c, y, x) += t.at(0, y, x) * dout.at(c, y, x);
            }
        }
    }
    Some(g)
}

/// Pins the estimated transmission to `t` everywhere by zeroing the head
/// weights and setting its bias to `logit(t)`.
pub fn force_transmission<T: Real>(params: &mut NetworkParams<T>, t: f64) {
    let head = params.layers_mut().last_mut().expect("refog head");
    head.weight.iter_mut().for_each(|w| *w = T::zero());
    let logit = if t >= 1.0 {
        50.0
    } else if t <= 0.0 {
        -50.0
    } else {
        (t / (1.0 - t)).ln()
    };
    head.bias.iter_mut().for_each(|b| *b = T::lit(logit));
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;
    use crate::fogmodel::synthesize_fog;

    fn clear_image() -> ImageTensor<f64> {
        ImageTensor::from_unit_fn(16, 16, |c, y, x| 0.2 + 0.6 * (((c + 1) * (y + 2 * x)) as f64 * 0.05).sin().abs()).unwrap()
    }

    #[test]
    fn preserves_spatial_size() {
        let p: NetworkParams<f64> = init_params(NetworkKind::RefogT, 1);
        let (out, t) = refog_forward(&p, &clear_image(), &AtmosphericLight::gray(0.9)).unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
        assert_eq!((t.height(), t.width()), (16, 16));
        assert_eq!(out.range(), RangeTag::Unit);
    }

    #[test]
    fn unit_transmission_returns_input() {
        let mut p: NetworkParams<f64> = init_params(NetworkKind::RefogT, 1);
        force_transmission(&mut p, 1.0);
        let j = clear_image();
        let (out, t) = refog_forward(&p, &j, &AtmosphericLight::gray(0.9)).unwrap();
        assert!(t.values().data().iter().all(|&v| v == 1.0));
        for (a, b) in out.pixels().data().iter().zip(j.pixels().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn floor_transmission_approaches_airlight() {
        let mut p: NetworkParams<f64> = init_params(NetworkKind::RefogT, 1);
        force_transmission(&mut p, 0.0);
        let (out, t) = refog_forward(&p, &clear_image(), &AtmosphericLight::gray(1.0)).unwrap();
        assert!(t.values().data().iter().all(|&v| v == T_MIN));
        assert!(out.pixels().data().iter().all(|&v| (1.0 - v).abs() <= T_MIN));
    }

    #[test]
    fn output_satisfies_scattering_model_with_returned_transmission() {
        let p: NetworkParams<f64> = init_params(NetworkKind::RefogT, 9);
        let a = AtmosphericLight::new([0.8, 0.85, 0.95]).unwrap();
        let j = clear_image();
        let (out, t) = refog_forward(&p, &j, &a).unwrap();
        let expect = synthesize_fog(&j, &t, &a).unwrap();
        for (x, y) in out.pixels().data().iter().zip(expect.pixels().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
