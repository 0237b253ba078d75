use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;

use defog2refog::fogmodel::{synthesize_fog, AtmosphericLight, ImageTensor, RangeTag, TransmissionMap};
use defog2refog::trainer::{save_checkpoint, DefogModel, TrainConfig, TrainState};
use defog2refog::{Shape, Tensor};
use defog2refog_ffi::*;
use sha2::{Digest, Sha256};

const H: usize = 32;
const W: usize = 40;

fn checkpoint(dir: &Path) -> PathBuf {
    let config = TrainConfig {
        image_size: 32,
        ..TrainConfig::default()
    };
    let p = dir.join("m.ckpt");
    save_checkpoint(&TrainState::new(2, config.upsample), &config, &p).unwrap();
    p
}

fn interleaved(img: &ImageTensor<f64>) -> Vec<f32> {
    let p = img.pixels();
    (0..p.height() * p.width() * 3)
        .map(|i| p.at(i % 3, i / 3 / p.width(), i / 3 % p.width()) as f32)
        .collect()
}

fn test_image() -> ImageTensor<f64> {
    let t = Tensor::from_fn(Shape::new(3, H, W), |c, y, x| ((c * 13 + y * 7 + x * 3) % 29) as f64 / 28.0);
    ImageTensor::new(t, RangeTag::Unit).unwrap().cast::<f32>().cast::<f64>()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(d2r_last_error()) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> (D2rStatus, *mut D2rModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = std::ptr::null_mut();
    let s = unsafe { d2r_model_load(c.as_ptr(), &mut m) };
    (s, m)
}

#[test]
fn defog_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let (s, model) = load(&ckpt);
    assert_eq!(s, D2rStatus::Ok, "{}", last_error());
    let mut side = 0;
    assert_eq!(unsafe { d2r_model_image_size(model, &mut side) }, D2rStatus::Ok);
    assert_eq!(side, 32);

    let img = test_image();
    let input = interleaved(&img);
    let mut out = vec![0f32; input.len()];
    assert_eq!(unsafe { d2r_defog(model, input.as_ptr(), H, W, out.as_mut_ptr()) }, D2rStatus::Ok);
    unsafe { d2r_model_free(model) };
    let expected = interleaved(&DefogModel::load(&ckpt).unwrap().defog(&img).unwrap());
    assert_eq!(out, expected);
}

#[test]
fn synthesis_and_metrics_match_the_library() {
    let img = test_image();
    let input = interleaved(&img);
    let tvals: Vec<f32> = (0..H * W).map(|i| 0.1 + 0.8 * (i % W) as f32 / W as f32).collect();
    let a = [0.9f32, 0.8, 0.85];
    let mut out = vec![0f32; input.len()];
    let s = unsafe { d2r_synthesize_fog(input.as_ptr(), tvals.as_ptr(), H, W, a.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, D2rStatus::Ok, "{}", last_error());
    let t = TransmissionMap::new(Tensor::from_vec(Shape::new(1, H, W), tvals.iter().map(|&v| v as f64).collect()).unwrap()).unwrap();
    let al = AtmosphericLight::new(a.map(|v| v as f64)).unwrap();
    assert_eq!(out, interleaved(&synthesize_fog(&img, &t, &al).unwrap()));

    let mut b = D2rBave::default();
    assert_eq!(unsafe { d2r_bave(input.as_ptr(), input.as_ptr(), H, W, &mut b) }, D2rStatus::Ok);
    assert_eq!((b.e, b.r_bar, b.delta), (0.0, 1.0, 0.0));
    let mut dense = 0.0;
    let mut clear = 0.0;
    assert_eq!(unsafe { d2r_fog_density(out.as_ptr(), H, W, &mut dense) }, D2rStatus::Ok);
    assert_eq!(unsafe { d2r_fog_density(input.as_ptr(), H, W, &mut clear) }, D2rStatus::Ok);
    assert!(dense > clear);

    let bad_a = [1.5f32, 0.0, 0.0];
    let s = unsafe { d2r_synthesize_fog(input.as_ptr(), tvals.as_ptr(), H, W, bad_a.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, D2rStatus::InvalidArgument);
    assert!(last_error().contains("airlight"));
}

#[test]
fn checkpoint_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let (s, m) = load(&dir.path().join("missing.ckpt"));
    assert_eq!((s, m.is_null()), (D2rStatus::Io, true));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x40;
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(load(&corrupt).0, D2rStatus::Integrity);

    // Rewrite one architecture hash and re-seal the manifest checksum.
    let bytes = std::fs::read(&ckpt).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest = String::from_utf8(bytes[48..48 + len].to_vec()).unwrap();
    let start = manifest.find("\"spec_hash\":\"").unwrap() + 13;
    let mut forged = manifest.clone();
    forged.replace_range(start..start + 4, "ffff");
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(forged.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(forged.as_bytes()));
    out.extend_from_slice(forged.as_bytes());
    out.extend_from_slice(&bytes[48 + len..]);
    let foreign = dir.path().join("foreign.ckpt");
    std::fs::write(&foreign, out).unwrap();
    assert_eq!(load(&foreign).0, D2rStatus::SpecHashMismatch, "{}", last_error());
}

/// Compiles the C smoke program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libdefog2refog_ffi.a");
    if !lib.is_file() {
        panic!("static library not found at {}", lib.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let ckpt = checkpoint(dir.path());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
