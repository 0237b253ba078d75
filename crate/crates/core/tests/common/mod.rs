//! Finite-difference gradient verification shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use defog2refog::fogmodel::AtmosphericLight;
use defog2refog::losses::{
    adversarial_discriminator, adversarial_discriminator_grad, adversarial_generator, adversarial_generator_grad,
    cycle_refog_loss, cycle_refog_loss_grad, enhancer_loss, enhancer_loss_grad, mse, mse_grad, perceptual_pair,
    perceptual_pair_grad, total_generator_loss, GanMode, LossParts, LossWeights, PerceptualExtractor, VGG16_CONVS,
};
use defog2refog::networks::{
    defog_backward, defog_forward_traced, discriminator_backward, discriminator_forward_traced, enhancer_backward,
    enhancer_forward_traced, init_params, refog_backward, refog_forward_traced, NetworkGrads, NetworkKind, NetworkParams,
};
use defog2refog::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COORDS: usize = 100;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that two vanishing gradients do not count as a mismatch.
pub const FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.coords == COORDS && self.max_rel < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic(i)` with a Richardson-extrapolated central difference
/// of `eval` on `COORDS` coordinates drawn from `0..dims`. Instance norm over
/// 2×2 maps is curved enough to defeat a plain central difference.
fn probe(
    name: &str,
    dims: usize,
    rng: &mut ChaCha8Rng,
    analytic: impl Fn(usize) -> f64,
    eval: impl Fn(usize, f64) -> f64,
) -> GradReport {
    let mut report = GradReport {
        name: name.to_string(),
        coords: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for _ in 0..COORDS {
        let i = rng.gen_range(0..dims);
        let central = |h: f64| (eval(i, h) - eval(i, -h)) / (2.0 * h);
        let num = (4.0 * central(STEP / 2.0) - central(STEP)) / 3.0;
        let a = analytic(i);
        let e = rel_err(a, num);
        if e > report.max_rel || report.coords == 0 {
            report.max_rel = report.max_rel.max(e);
            report.worst = format!("coordinate {i}: analytic {a:e}, numeric {num:e}");
        }
        report.coords += 1;
    }
    report
}

/// Draws half the coordinates from the parameters and half from the input.
fn probe_network(
    name: &str,
    params: &NetworkParams<f64>,
    x: &Tensor<f64>,
    grads: &NetworkGrads<f64>,
    dx: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
    objective: impl Fn(&NetworkParams<f64>, &Tensor<f64>) -> f64,
) -> GradReport {
    let gp: Vec<f64> = grads.values().collect();
    let np = gp.len();
    let dims = 2 * np.max(x.len());
    // Even draws land in the parameters, odd draws in the input.
    let pick = |i: usize| if i % 2 == 0 { (true, (i / 2) % np) } else { (false, (i / 2) % x.len()) };
    probe(
        name,
        dims,
        rng,
        |i| match pick(i) {
            (true, k) => gp[k],
            (false, k) => dx.data()[k],
        },
        |i, d| match pick(i) {
            (true, k) => {
                let mut p = params.clone();
                *p.value_mut(k) += d;
                objective(&p, x)
            }
            (false, k) => {
                let mut xx = x.clone();
                xx.data_mut()[k] += d;
                objective(params, &xx)
            }
        },
    )
}

pub fn network_reports() -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c4d);
    let mut out = Vec::new();
    let small = Shape::new(3, 8, 8);

    let p: NetworkParams<f64> = init_params(NetworkKind::Defog, 11);
    let x = random(small, &mut rng);
    let w = random(small, &mut rng);
    let (_, trace) = defog_forward_traced(&p, &x).unwrap();
    let mut g = NetworkGrads::zeros_like(&p);
    let dx = defog_backward(&p, &trace, &w, Some(&mut g), true).unwrap();
    out.push(probe_network("defog network", &p, &x, &g, &dx, &mut rng, |p, x| {
        dot(&defog_forward_traced(p, x).unwrap().0, &w)
    }));

    let p: NetworkParams<f64> = init_params(NetworkKind::RefogT, 12);
    let a = AtmosphericLight::new([0.85, 0.8, 0.9]).unwrap();
    let x = random(small, &mut rng);
    let w = random(small, &mut rng);
    let (_, trace) = refog_forward_traced(&p, &x, &a).unwrap();
    let mut g = NetworkGrads::zeros_like(&p);
    let dx = refog_backward(&p, &trace, &w, Some(&mut g), true).unwrap();
    out.push(probe_network("refog network", &p, &x, &g, &dx, &mut rng, |p, x| {
        dot(&refog_forward_traced(p, x, &a).unwrap().0, &w)
    }));

    let p: NetworkParams<f64> = init_params(NetworkKind::Enhancer, 13);
    let x = random(small, &mut rng);
    let w = random(small, &mut rng);
    let (_, trace) = enhancer_forward_traced(&p, &x).unwrap();
    let mut g = NetworkGrads::zeros_like(&p);
    let dx = enhancer_backward(&p, &trace, &w, Some(&mut g), true).unwrap();
    out.push(probe_network("enhancer network", &p, &x, &g, &dx, &mut rng, |p, x| {
        dot(&enhancer_forward_traced(p, x).unwrap().0, &w)
    }));

    // The discriminator's five stride-2 stages need at least 32 pixels per side.
    let p: NetworkParams<f64> = init_params(NetworkKind::Discriminator, 14);
    let x = random(Shape::new(3, 32, 32), &mut rng);
    let (s, trace) = discriminator_forward_traced(&p, &x).unwrap();
    let w = random(s.shape(), &mut rng);
    let mut g = NetworkGrads::zeros_like(&p);
    let dx = discriminator_backward(&p, &trace, &w, Some(&mut g), true).unwrap();
    out.push(probe_network("discriminator network", &p, &x, &g, &dx, &mut rng, |p, x| {
        dot(&discriminator_forward_traced(p, x).unwrap().0, &w)
    }));
    out
}

/// Probes a loss of several same-shaped tensors, spreading coordinates
/// across all arguments.
fn probe_loss(
    name: &str,
    args: &[Tensor<f64>],
    grads: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradReport {
    let n = args[0].len();
    probe(
        name,
        n * args.len(),
        rng,
        |i| grads[i / n].data()[i % n],
        |i, d| {
            let mut a = args.to_vec();
            a[i / n].data_mut()[i % n] += d;
            f(&a)
        },
    )
}

/// Writes a 16-layer-stack weight file holding the first `layers` convs.
pub fn write_fake_vgg(path: &Path, layers: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut cin = 3;
    for &(cout, key) in VGG16_CONVS.iter().take(layers) {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let bytes = |n: usize, rng: &mut ChaCha8Rng, s: f64| -> Vec<u8> {
            (0..n).flat_map(|_| ((rng.gen_range(-1.0..1.0) * s) as f32).to_le_bytes()).collect()
        };
        blobs.push((format!("features.{key}.weight"), vec![cout, cin, 3, 3], bytes(cout * cin * 9, &mut rng, std)));
        blobs.push((format!("features.{key}.bias"), vec![cout], bytes(cout, &mut rng, 0.1)));
        cin = cout;
    }
    let views: Vec<(String, safetensors::tensor::TensorView)> = blobs
        .iter()
        .map(|(k, s, b)| (k.clone(), safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b).unwrap()))
        .collect();
    safetensors::serialize_to_file(views, &None, path).unwrap();
}

pub fn loss_reports() -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let shape = Shape::new(3, 8, 8);
    let mut out = Vec::new();

    let a = random(shape, &mut rng);
    let b = random(shape, &mut rng);
    let gb = mse_grad(&a, &b).unwrap();
    let ga = gb.map(|v| -v);
    out.push(probe_loss("mse", &[a, b], &[ga, gb], &mut rng, |t| mse(&t[0], &t[1]).unwrap()));

    let t: Vec<Tensor<f64>> = (0..4).map(|_| random(shape, &mut rng)).collect();
    let (grx, gry) = cycle_refog_loss_grad(&t[0], &t[1], &t[2], &t[3]).unwrap();
    out.push(probe_loss(
        "cycle reconstruction loss",
        &[t[1].clone(), t[3].clone()],
        &[grx, gry],
        &mut rng,
        |r| cycle_refog_loss(&t[0], &r[0], &t[2], &r[1]).unwrap(),
    ));

    let t: Vec<Tensor<f64>> = (0..4).map(|_| random(shape, &mut rng)).collect();
    let g = enhancer_loss_grad(&t[0], &t[1], &t[2], &t[3]).unwrap();
    out.push(probe_loss("enhancer consistency loss", &t, &g, &mut rng, |a| {
        enhancer_loss(&a[0], &a[1], &a[2], &a[3]).unwrap()
    }));

    let scores = Shape::new(1, 4, 4);
    for (mode, label) in [(GanMode::LeastSquares, "least-squares"), (GanMode::Log, "log")] {
        let fake = random(scores, &mut rng).map(|v| 3.0 * v);
        let g = adversarial_generator_grad(&fake, mode);
        out.push(probe_loss(
            &format!("{label} generator adversarial loss"),
            &[fake],
            &[g],
            &mut rng,
            |a| adversarial_generator(&a[0], mode),
        ));
        let real = random(scores, &mut rng).map(|v| 3.0 * v);
        let fake = random(scores, &mut rng).map(|v| 3.0 * v);
        let (gr, gf) = adversarial_discriminator_grad(&real, &fake, mode);
        out.push(probe_loss(
            &format!("{label} discriminator adversarial loss"),
            &[real, fake],
            &[gr, gf],
            &mut rng,
            |a| adversarial_discriminator(&a[0], &a[1], mode),
        ));
    }

    for layer in 1..=4 {
        let ex = PerceptualExtractor::<f64>::seeded_random(layer, 21).unwrap();
        out.push(perceptual_report(&format!("perceptual loss, random stack depth {layer}"), &ex, &mut rng));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.safetensors");
    write_fake_vgg(&path, 4, 5);
    let ex = PerceptualExtractor::<f64>::pretrained(&path, 4).unwrap();
    out.push(perceptual_report("perceptual loss, 16-layer stack depth 4", &ex, &mut rng));

    let parts = LossParts {
        refog_adversarial: 0.3,
        defog_adversarial: 0.7,
        cycle: 0.2,
        enhancer: 0.9,
        perceptual: 0.4,
    };
    let weights = LossWeights::default();
    let total = |p: &[f64]| {
        let lp = LossParts {
            refog_adversarial: p[0],
            defog_adversarial: p[1],
            cycle: p[2],
            enhancer: p[3],
            perceptual: p[4],
        };
        total_generator_loss(&lp, &weights).unwrap()
    };
    let base = parts.as_array();
    let coef = weights.as_array();
    out.push(probe(
        "weighted generator total",
        5,
        &mut rng,
        |i| coef[i],
        |i, d| {
            let mut p = base;
            p[i] += d;
            total(&p)
        },
    ));
    out
}

fn perceptual_report(name: &str, ex: &PerceptualExtractor<f64>, rng: &mut ChaCha8Rng) -> GradReport {
    let shape = Shape::new(3, 8, 8);
    let a = random(shape, rng);
    let b = random(shape, rng);
    let (_, g) = perceptual_pair_grad(ex, &a, &b).unwrap();
    probe_loss(name, &[b], &[g], rng, |t| perceptual_pair(ex, &a, &t[0]).unwrap())
}

/// One mismatch-free layer table per network, or the first difference.
pub struct AuditReport {
    pub name: String,
    pub mismatch: Option<String>,
}

fn audit(name: &str, got: &[(String, Shape)], want: &[(&str, (usize, usize, usize))]) -> AuditReport {
    let want: Vec<(String, Shape)> = want.iter().map(|(n, (c, h, w))| (n.to_string(), Shape::new(*c, *h, *w))).collect();
    let mismatch = if got.len() != want.len() {
        Some(format!("{} layers executed, {} expected", got.len(), want.len()))
    } else {
        got.iter()
            .zip(&want)
            .find(|(g, w)| g != w)
            .map(|(g, w)| format!("got {g:?}, expected {w:?}"))
    };
    AuditReport {
        name: name.to_string(),
        mismatch,
    }
}

/// Expected per-layer output shapes for 64×64 generator inputs and a
/// 512×512 discriminator input.
pub fn architecture_audit() -> Vec<AuditReport> {
    use defog2refog::networks::{init_params_with, ArchitectureSpec, UpsampleMode};
    let mut out = Vec::new();
    let x64 = Tensor::<f32>::from_fn(Shape::new(3, 64, 64), |c, y, x| ((c * 7 + y * 3 + x) as f32 * 0.05).sin());
    for up in [UpsampleMode::Transposed, UpsampleMode::NearestConv] {
        let p: NetworkParams<f32> = init_params_with(ArchitectureSpec::new(NetworkKind::Defog, up), 1);
        let (y, t) = defog_forward_traced(&p, &x64).unwrap();
        let mut want = vec![("enc1", (32, 64, 64)), ("enc2", (64, 32, 32)), ("enc3", (128, 16, 16))];
        let names: Vec<String> = (1..=9).flat_map(|b| [format!("res{b}a"), format!("res{b}b")]).collect();
        want.extend(names.iter().map(|n| (n.as_str(), (128, 16, 16))));
        want.extend([("dec1", (64, 32, 32)), ("dec2", (32, 64, 64)), ("out", (3, 64, 64))]);
        let mut r = audit(&format!("defog generator ({up:?})"), &t.shapes.0, &want);
        if r.mismatch.is_none() && y.shape() != x64.shape() {
            r.mismatch = Some(format!("output {:?}", y.shape()));
        }
        out.push(r);

        let p: NetworkParams<f32> = init_params_with(ArchitectureSpec::new(NetworkKind::Enhancer, up), 2);
        let (_, t) = enhancer_forward_traced(&p, &x64).unwrap();
        out.push(audit(
            &format!("enhancer ({up:?})"),
            &t.shapes.0,
            &[
                ("enc1", (64, 32, 32)),
                ("enc2", (64, 16, 16)),
                ("enc3", (64, 8, 8)),
                ("dec1", (64, 16, 16)),
                ("dec2", (64, 32, 32)),
                ("dec3", (64, 64, 64)),
                ("fuse", (64, 64, 64)),
                ("out", (3, 64, 64)),
            ],
        ));
    }
    let p: NetworkParams<f32> = init_params(NetworkKind::RefogT, 3);
    let a = AtmosphericLight::new([0.9; 3]).unwrap();
    let (_, t) = refog_forward_traced(&p, &x64, &a).unwrap();
    out.push(audit(
        "refog transmission estimator",
        &t.shapes.0,
        &[
            ("t1", (64, 64, 64)),
            ("t2", (64, 64, 64)),
            ("t3", (64, 64, 64)),
            ("t4", (64, 64, 64)),
            ("t_head", (1, 64, 64)),
        ],
    ));
    let p: NetworkParams<f32> = init_params(NetworkKind::Discriminator, 4);
    let x512 = Tensor::<f32>::from_fn(Shape::new(3, 512, 512), |c, y, x| ((c + y + 2 * x) as f32 * 0.01).cos());
    let (_, t) = discriminator_forward_traced(&p, &x512).unwrap();
    out.push(audit(
        "discriminator",
        &t.shapes.0,
        &[
            ("d1", (64, 256, 256)),
            ("d2", (128, 128, 128)),
            ("d3", (256, 64, 64)),
            ("d4", (512, 32, 32)),
            ("d5", (1, 16, 16)),
        ],
    ));
    out
}
