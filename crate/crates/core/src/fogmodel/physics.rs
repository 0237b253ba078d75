use super::{AtmosphericLight, DepthMap, ImageTensor, RangeTag, TransmissionMap, T_MIN};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `T = max(exp(-beta * d), T_MIN)`.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap<f64>> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::param("beta", format!("must be finite and >= 0, got {beta}")));
    }
    TransmissionMap::new(depth.values().map(|d| (-beta * d).exp().max(T_MIN)))
}

fn check_operands<T: Real>(img: &ImageTensor<T>, t: &TransmissionMap<T>, what: &str) -> Result<()> {
    if img.range() != RangeTag::Unit {
        return Err(Error::Shape(format!("{what}: image must be in the unit range")));
    }
    img.same_size(t.height(), t.width(), what)
}

/// `I = J·T + A·(1 − T)`, with `T` broadcast over channels.
pub fn synthesize_fog<T: Real>(
    clear: &ImageTensor<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight,
) -> Result<ImageTensor<T>> {
    check_operands(clear, t, "synthesize_fog")?;
    let j = clear.pixels();
    let tv = t.values();
    let out = Tensor::from_fn(j.shape(), |c, y, x| {
        let tt = tv.at(0, y, x);
        let av = T::lit(a.rgb[c]);
        j.at(c, y, x) * tt + av * (T::one() - tt)
    });
    ImageTensor::new(out, RangeTag::Unit)
}

/// Analytic inverse `J = (I − A·(1 − T)) / T`.
pub fn invert_fog<T: Real>(
    foggy: &ImageTensor<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight,
) -> Result<ImageTensor<T>> {
    check_operands(foggy, t, "invert_fog")?;
    let i = foggy.pixels();
    let tv = t.values();
    let floor = T::lit(T_MIN);
    let out = Tensor::from_fn(i.shape(), |c, y, x| {
        let tt = tv.at(0, y, x).max(floor);
        let av = T::lit(a.rgb[c]);
        (i.at(c, y, x) - av * (T::one() - tt)) / tt
    });
    ImageTensor::new(out, RangeTag::Unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn img(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(8, 8, [v; 3], RangeTag::Unit).unwrap()
    }

    #[test]
    fn transmission_examples() {
        let d = DepthMap::new(Tensor::full(Shape::new(1, 8, 8), std::f64::consts::LN_2)).unwrap();
        let t = transmission_from_depth(&d, 1.0).unwrap();
        assert!(t.values().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let t0 = transmission_from_depth(&d, 0.0).unwrap();
        assert!(t0.values().data().iter().all(|&v| v == 1.0));
        let zero = DepthMap::new(Tensor::zeros(Shape::new(1, 8, 8))).unwrap();
        assert!(transmission_from_depth(&zero, 7.0).unwrap().values().data().iter().all(|&v| v == 1.0));
        assert!(transmission_from_depth(&d, -0.1).is_err());
        let far = DepthMap::new(Tensor::full(Shape::new(1, 8, 8), 1e6)).unwrap();
        assert!(transmission_from_depth(&far, 1.0).unwrap().values().data().iter().all(|&v| v == T_MIN));
    }

    #[test]
    fn synthesize_examples() {
        let j = img(0.8);
        let a = AtmosphericLight::gray(1.0);
        let i = synthesize_fog(&j, &TransmissionMap::uniform(8, 8, 0.5), &a).unwrap();
        assert!(i.pixels().data().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        let same = synthesize_fog(&j, &TransmissionMap::uniform(8, 8, 1.0), &a).unwrap();
        assert_eq!(same, j);
        let air = AtmosphericLight::new([0.7, 0.75, 0.8]).unwrap();
        let ja = ImageTensor::<f64>::filled(8, 8, air.rgb, RangeTag::Unit).unwrap();
        let lim = synthesize_fog(&ja, &TransmissionMap::uniform(8, 8, T_MIN), &air).unwrap();
        assert!((0..3).all(|c| (lim.pixels().at(c, 4, 4) - air.rgb[c]).abs() < 1e-15));
    }

    #[test]
    fn invert_examples() {
        let a = AtmosphericLight::gray(1.0);
        let j = invert_fog(&img(0.9), &TransmissionMap::uniform(8, 8, 0.5), &a).unwrap();
        assert!(j.pixels().data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
        let air = AtmosphericLight::new([0.3, 0.6, 0.9]).unwrap();
        let ia = ImageTensor::<f64>::filled(8, 8, air.rgb, RangeTag::Unit).unwrap();
        let back = invert_fog(&ia, &TransmissionMap::uniform(8, 8, 0.37), &air).unwrap();
        assert!((0..3).all(|c| (back.pixels().at(c, 1, 2) - air.rgb[c]).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let j = img(0.5);
        let t = TransmissionMap::uniform(9, 8, 0.5);
        assert!(matches!(synthesize_fog(&j, &t, &AtmosphericLight::gray(1.0)), Err(Error::Shape(_))));
        assert!(matches!(invert_fog(&j, &t, &AtmosphericLight::gray(1.0)), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn fog_is_monotone_in_transmission(
            j in 0.0f64..1.0, frac in 0.0f64..1.0, t1 in 0.01f64..1.0, t2 in 0.01f64..1.0
        ) {
            // A >= J: lower transmission can only brighten.
            let av = j + (1.0 - j) * frac;
            let a = AtmosphericLight::gray(av);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let i_lo = synthesize_fog(&img(j), &TransmissionMap::uniform(8, 8, lo), &a).unwrap();
            let i_hi = synthesize_fog(&img(j), &TransmissionMap::uniform(8, 8, hi), &a).unwrap();
            prop_assert!(i_lo.pixels().at(0, 0, 0) >= i_hi.pixels().at(0, 0, 0) - 1e-15);
        }

        #[test]
        fn sky_limit_bound(j in 0.0f64..1.0, a in 0.0f64..1.0) {
            let i = synthesize_fog(&img(j), &TransmissionMap::uniform(8, 8, T_MIN), &AtmosphericLight::gray(a)).unwrap();
            prop_assert!((i.pixels().at(1, 3, 3) - a).abs() <= T_MIN * (j - a).abs() + 1e-15);
        }

        #[test]
        fn outputs_stay_in_unit_range(j in 0.0f64..1.0, t in 0.0f64..1.0, a in 0.0f64..1.0) {
            let i = synthesize_fog(&img(j), &TransmissionMap::uniform(8, 8, t), &AtmosphericLight::gray(a)).unwrap();
            let (lo, hi) = i.pixels().min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
            let back = invert_fog(&i, &TransmissionMap::uniform(8, 8, t), &AtmosphericLight::gray(a)).unwrap();
            let (lo, hi) = back.pixels().min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
        }
    }
}
