use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;
use std::sync::OnceLock;

use ddad::data::generate_toy_corpus;
use ddad::pipeline::{run_all, RunConfig};
use ddad_ffi::*;

const SIDE: usize = 16;

fn run_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        generate_toy_corpus(&corpus, 48, 32, SIDE, 3).unwrap();
        let mut cfg = RunConfig::default();
        cfg.manifest = corpus.join("manifest.csv");
        cfg.out_dir = dir.path().join("run");
        cfg.net.side = SIDE;
        cfg.net.encoder_channels = vec![4, 8];
        cfg.net.fc_widths = vec![8];
        cfg.stage1.k = 2;
        cfg.stage1.epochs = 2;
        cfg.asr.epochs = 1;
        cfg.split.n_normal = Some(12);
        cfg.split.n_unlabeled = Some(10);
        cfg.split.anomaly_ratio = Some(0.5);
        cfg.split.n_test_normal = Some(8);
        cfg.split.n_test_abnormal = Some(8);
        run_all(&cfg).unwrap();
        dir
    })
    .path()
}

fn last_error() -> String {
    let p = ddad_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load() -> *mut DdadModels {
    let path = CString::new(run_dir().join("run").to_str().unwrap()).unwrap();
    let mut models = ptr::null_mut();
    assert_eq!(unsafe { ddad_models_load(path.as_ptr(), &mut models) }, DdadStatus::Ok);
    assert!(!models.is_null());
    models
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ddad_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = 0.0;
    let mut models = ptr::null_mut();
    unsafe {
        assert_eq!(ddad_models_load(ptr::null(), &mut models), DdadStatus::NullPointer);
        assert!(models.is_null());
        assert!(last_error().contains("path"));
        assert_eq!(ddad_auc(ptr::null(), ptr::null(), 0, &mut out), DdadStatus::NullPointer);
        assert_eq!(
            ddad_score_image(ptr::null(), DdadScoreKind::ARec, ptr::null(), 0, &mut out),
            DdadStatus::NullPointer
        );
        assert_eq!(ddad_models_side(ptr::null()), 0);
        assert_eq!(ddad_models_supports(ptr::null(), DdadScoreKind::ARec), 0);
        ddad_models_free(ptr::null_mut());
        ddad_ensemble_free(ptr::null_mut());
    }
}

#[test]
fn missing_run_directory_is_reported() {
    let path = CString::new("/nonexistent/ddad/run").unwrap();
    let mut models = ptr::null_mut();
    let status = unsafe { ddad_models_load(path.as_ptr(), &mut models) };
    assert_eq!(status, DdadStatus::Validation);
    assert!(models.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn success_clears_last_error() {
    let mut out = 0.0;
    unsafe {
        assert_eq!(ddad_auc(ptr::null(), ptr::null(), 0, &mut out), DdadStatus::NullPointer);
        let s = [0.1, 0.9];
        let l = [0u8, 1];
        assert_eq!(ddad_auc(s.as_ptr(), l.as_ptr(), 2, &mut out), DdadStatus::Ok);
    }
    assert!(ddad_last_error().is_null());
    assert_eq!(out, 1.0);
}

#[test]
fn metrics_match_library() {
    let s = [0.2, 0.8, 0.5, 0.5, 0.1];
    let l = [0u8, 1, 0, 1, 1];
    let (mut auc, mut ap) = (0.0, 0.0);
    unsafe {
        assert_eq!(ddad_auc(s.as_ptr(), l.as_ptr(), 5, &mut auc), DdadStatus::Ok);
        assert_eq!(ddad_ap(s.as_ptr(), l.as_ptr(), 5, &mut ap), DdadStatus::Ok);
    }
    let set = ddad::eval::ScoredSet::from_parts((0..5).map(|i| format!("{i:020}")), &s, &l);
    assert_eq!(auc, ddad::eval::auc(&set).unwrap());
    assert_eq!(ap, ddad::eval::ap(&set).unwrap());

    let one = [1u8];
    unsafe {
        assert_eq!(ddad_auc(s.as_ptr(), one.as_ptr(), 1, &mut auc), DdadStatus::Validation);
    }
}

#[test]
fn focal_loss_checks_gamma() {
    let p = [0.9f32, 0.2];
    let t = [1u8, 0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(ddad_focal_loss(p.as_ptr(), t.as_ptr(), 2, 2.0, &mut out), DdadStatus::Ok);
        assert_eq!(out, ddad::asr::focal_loss(&p, &t, 2.0).unwrap());
        assert_eq!(ddad_focal_loss(p.as_ptr(), t.as_ptr(), 2, -1.0, &mut out), DdadStatus::InvalidArgument);
        assert_eq!(ddad_focal_loss(p.as_ptr(), t.as_ptr(), 2, f64::NAN, &mut out), DdadStatus::InvalidArgument);
    }
}

#[test]
fn scores_trained_models() {
    let models = load();
    unsafe {
        assert_eq!(ddad_models_side(models), SIDE);
        for kind in [
            DdadScoreKind::ARec,
            DdadScoreKind::ARecEnsemble,
            DdadScoreKind::AIntra,
            DdadScoreKind::AInter,
            DdadScoreKind::RIntra,
            DdadScoreKind::RDual,
        ] {
            assert_eq!(ddad_models_supports(models, kind), 1);
        }
        let img = ddad::data::toy::toy_normal(SIDE, 99, 0);
        let px = img.data();
        let mut score = f64::NAN;
        let mut map = vec![f32::NAN; SIDE * SIDE];
        for kind in [DdadScoreKind::AInter, DdadScoreKind::RDual] {
            assert_eq!(ddad_score_image(models, kind, px.as_ptr(), px.len(), &mut score), DdadStatus::Ok);
            assert_eq!(ddad_score_map(models, kind, px.as_ptr(), px.len(), map.as_mut_ptr()), DdadStatus::Ok);
            let mean = map.iter().map(|&v| f64::from(v)).sum::<f64>() / map.len() as f64;
            assert!((mean - score).abs() < 1e-6 * score.abs().max(1.0));
        }

        assert_eq!(
            ddad_score_image(models, DdadScoreKind::ARec, px.as_ptr(), 3, &mut score),
            DdadStatus::InvalidArgument
        );
        assert!(last_error().contains("256"));
        ddad_models_free(models);
    }
}

#[test]
fn ensemble_reconstructions() {
    let dir = CString::new(run_dir().join("run").join("NDM").to_str().unwrap()).unwrap();
    let mut ens = ptr::null_mut();
    unsafe {
        assert_eq!(ddad_ensemble_load(dir.as_ptr(), &mut ens), DdadStatus::Ok);
        assert_eq!(ddad_ensemble_size(ens), 2);
        let img = ddad::data::toy::toy_normal(SIDE, 7, 1);
        let mut out = vec![f32::NAN; 2 * SIDE * SIDE];
        assert_eq!(ddad_ensemble_reconstruct(ens, img.data().as_ptr(), SIDE * SIDE, out.as_mut_ptr()), DdadStatus::Ok);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_ne!(out[..SIDE * SIDE], out[SIDE * SIDE..]);
        ddad_ensemble_free(ens);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ddad.h")).unwrap();
    for name in [
        "ddad_version",
        "ddad_last_error",
        "ddad_models_load",
        "ddad_models_free",
        "ddad_models_side",
        "ddad_models_supports",
        "ddad_score_image",
        "ddad_score_map",
        "ddad_ensemble_load",
        "ddad_ensemble_free",
        "ddad_ensemble_size",
        "ddad_ensemble_reconstruct",
        "ddad_auc",
        "ddad_ap",
        "ddad_focal_loss",
        "DDAD_STATUS_NULL_POINTER",
        "typedef struct DdadModels DdadModels",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"ddad.h\"\nint main(void) { return ddad_version() == 0; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
