use super::*;
use crate::data::io::{load_image, save_png};
use crate::data::make_toy_dataset;
use crate::fogmodel::{synthesize_fog, transmission_from_depth, DepthMap};
use crate::trainer::{save_checkpoint, TrainConfig, TrainState};

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn subcommands_parse() {
    for line in [
        "d2r train --config c.toml --iterations 3 --resume-latest",
        "d2r defog --input a --output b --workers 2 --strict",
        "d2r synth --clear a --beta 1.5 --airlight 0.9,0.8,0.7 --output b",
        "d2r eval --before a --after b --report r.csv",
        "d2r eval --mrfid m --checkpoint c --report r.csv",
        "d2r make-toy-data --output o --scenes 2",
    ] {
        Cli::try_parse_from(args(line)).unwrap_or_else(|e| panic!("{line}: {e}"));
    }
    for line in [
        "d2r train",
        "d2r defog --input a --output b --workers 0",
        "d2r eval --before a --report r.csv",
        "d2r eval --before a --after b --mrfid m --report r.csv",
        "d2r train --config c --resume x --resume-latest",
    ] {
        assert!(Cli::try_parse_from(args(line)).is_err(), "{line}");
    }
}

#[test]
fn airlight_argument_forms() {
    assert_eq!(parse_airlight("0.5").unwrap().rgb, [0.5; 3]);
    assert_eq!(parse_airlight("0.1, 0.2,0.3").unwrap().rgb, [0.1, 0.2, 0.3]);
    assert!(parse_airlight("0.1,0.2").is_err());
    assert!(parse_airlight("x").is_err());
    assert!(parse_airlight("1.5").is_err());
}

#[test]
fn synth_matches_library_bytes_and_writes_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 3, 32, 1).unwrap();
    let out = dir.path().join("out");
    let a = AtmosphericLight::new([0.9, 0.85, 0.8]).unwrap();
    let ramp = DepthSource::Ramp { near: 0.0, far: 1.0 };
    let (written, skipped) = cmd_synth(&toy.clear_dir, &ramp, 1.2, &a, &out, 2).unwrap();
    assert_eq!(written.len(), 3);
    assert!(skipped.is_empty());
    let reference = dir.path().join("ref.png");
    for i in 0..3 {
        let clear = load_image(&toy.clear_path(i)).unwrap();
        let t = transmission_from_depth(&DepthMap::vertical_ramp(32, 32, 0.0, 1.0).unwrap(), 1.2).unwrap();
        save_png(&reference, &synthesize_fog(&clear, &t, &a).unwrap()).unwrap();
        assert_eq!(std::fs::read(&written[i]).unwrap(), std::fs::read(&reference).unwrap());
        let stem = &toy.scenes[i].name;
        assert!(out.join("sidecars").join(format!("{stem}.t.dpth")).is_file());
        assert!(out.join("sidecars").join(format!("{stem}.airlight.txt")).is_file());
    }
}

#[test]
fn synth_reads_depth_files_and_skips_missing_ones() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 2, 32, 1).unwrap();
    let depth = dir.path().join("depth");
    std::fs::create_dir_all(&depth).unwrap();
    crate::data::io::write_dpth(
        &depth.join(format!("{}.dpth", toy.scenes[0].name)),
        DepthMap::vertical_ramp(32, 32, 0.2, 3.0).unwrap().values(),
    )
    .unwrap();
    let a = AtmosphericLight::new([0.8; 3]).unwrap();
    let (written, skipped) =
        cmd_synth(&toy.clear_dir, &DepthSource::Directory(depth.clone()), 1.0, &a, &dir.path().join("o"), 1).unwrap();
    assert_eq!((written.len(), skipped.len()), (1, 1));

    image::GrayImage::from_fn(32, 32, |x, _| image::Luma([(x * 8) as u8]))
        .save(depth.join(format!("{}.png", toy.scenes[1].name)))
        .unwrap();
    let (written, skipped) =
        cmd_synth(&toy.clear_dir, &DepthSource::Directory(depth), 1.0, &a, &dir.path().join("o"), 1).unwrap();
    assert_eq!((written.len(), skipped.len()), (2, 0));
    let t = crate::data::io::read_dpth(&dir.path().join("o/sidecars").join(format!("{}.t.dpth", toy.scenes[1].name))).unwrap();
    assert_eq!(t.at(0, 3, 0), 1.0);
    assert!((t.at(0, 3, 10) - (-(80.0f64 / 255.0)).exp()).abs() < 1e-6);
}

#[test]
fn eval_identity_rows_and_column_means() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 4, 32, 2).unwrap();
    let report = dir.path().join("r.csv");
    let src = EvalSource::Directories {
        before: toy.foggy_dir.clone(),
        after: toy.foggy_dir.clone(),
    };
    let (rows, skipped) = cmd_eval(&src, &report, 1).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!((r.e, r.r_bar, r.delta), (0.0, 1.0, 0.0), "{r:?}");
    }
    assert_eq!(read_eval_csv(&report).unwrap(), rows);

    let src = EvalSource::Directories {
        before: toy.foggy_dir.clone(),
        after: toy.clear_dir.clone(),
    };
    let (rows, _) = cmd_eval(&src, &report, 3).unwrap();
    let back = read_eval_csv(&report).unwrap();
    assert_eq!(back, rows);
    let (per, agg) = back.split_at(4);
    let n = per.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| per.iter().map(f).sum::<f64>() / n;
    let m = &agg[0];
    assert_eq!(m.image, EvalRow::MEAN);
    for (got, want) in [
        (m.e, mean(|r| r.e)),
        (m.r_bar, mean(|r| r.r_bar)),
        (m.delta, mean(|r| r.delta)),
        (m.fog_before, mean(|r| r.fog_before)),
        (m.fog_after, mean(|r| r.fog_after)),
    ] {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn eval_reports_missing_counterparts() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 2, 32, 2).unwrap();
    std::fs::remove_file(toy.clear_path(1)).unwrap();
    let src = EvalSource::Directories {
        before: toy.foggy_dir.clone(),
        after: toy.clear_dir.clone(),
    };
    let (rows, skipped) = cmd_eval(&src, &dir.path().join("r.csv"), 1).unwrap();
    assert_eq!((rows.len(), skipped.len()), (2, 1));
}

#[test]
fn eval_groups_mrfid_by_level() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 2, 32, 4).unwrap();
    let root = dir.path().join("mrfid");
    for (i, s) in toy.scenes.iter().enumerate() {
        let sd = root.join(&s.name);
        std::fs::create_dir_all(&sd).unwrap();
        std::fs::copy(toy.clear_path(i), sd.join("clear.png")).unwrap();
        std::fs::copy(toy.foggy_path(i), sd.join("slight.png")).unwrap();
        if i == 0 {
            std::fs::copy(toy.foggy_path(i), sd.join("high.png")).unwrap();
        }
    }
    std::fs::create_dir_all(root.join("broken")).unwrap();
    let src = EvalSource::Mrfid { root, checkpoint: None };
    let (rows, skipped) = cmd_eval(&src, &dir.path().join("r.csv"), 2).unwrap();
    assert_eq!(skipped.len(), 1);
    let levels: Vec<(&str, &str)> = rows.iter().map(|r| (r.image.as_str(), r.level.as_str())).collect();
    assert_eq!(levels.len(), 3 + 2 + 1);
    assert!(levels.contains(&(EvalRow::MEAN, "slight")));
    assert!(levels.contains(&(EvalRow::MEAN, "high")));
    assert_eq!(levels.last(), Some(&(EvalRow::MEAN, "all")));
    let slight: Vec<&EvalRow> = rows.iter().filter(|r| r.level == "slight" && r.image != EvalRow::MEAN).collect();
    assert_eq!(slight.len(), 2);
    let m = rows.iter().find(|r| r.image == EvalRow::MEAN && r.level == "slight").unwrap();
    assert_eq!(*m, EvalRow::mean(&slight, "slight"));
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let config = TrainConfig {
        image_size: 32,
        ..TrainConfig::toy()
    };
    let state = TrainState::new(3, config.upsample);
    let p = dir.join("m.ckpt");
    save_checkpoint(&state, &config, &p).unwrap();
    p
}

#[test]
fn defog_writes_one_output_per_decodable_input() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy_dataset(&dir.path().join("toy"), 3, 32, 5).unwrap();
    std::fs::write(toy.foggy_dir.join("broken.png"), b"not a png").unwrap();
    let big = load_image(&toy.foggy_path(0)).unwrap();
    let big = crate::data::io::resize_bilinear(&big, 40, 48).unwrap();
    save_png(&toy.foggy_dir.join("wide.png"), &big).unwrap();
    let model = DefogModel::load(&tiny_checkpoint(dir.path())).unwrap();
    let out = dir.path().join("out");
    let (written, skipped) = cmd_defog(&model, &toy.foggy_dir, &out, 2).unwrap();
    assert_eq!((written.len(), skipped.len()), (4, 1));
    for p in &written {
        let src = load_image(&toy.foggy_dir.join(p.file_name().unwrap())).unwrap();
        let img = load_image(p).unwrap();
        assert_eq!((img.height(), img.width()), (src.height(), src.width()));
    }
    let first: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let (again, _) = cmd_defog(&model, &toy.foggy_dir, &out, 1).unwrap();
    assert_eq!(again, written);
    let second: Vec<Vec<u8>> = again.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = RunManifest::new("eval", &args("d2r eval --report r"), Some(4), serde_json::json!({"k": 1.5}));
    let p = dir.path().join(RunManifest::FILE);
    m.write(&p).unwrap();
    assert_eq!(RunManifest::read(&p).unwrap(), m);
}
