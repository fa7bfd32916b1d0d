use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use gradleak_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn single_example_round_trip() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gl_model_mlp(6, 10, 3, &mut m), GlStatus::Ok);
        assert_eq!(gl_model_input_len(m), 6);
        assert_eq!(gl_model_output_dim(m), 3);
        assert_eq!(gl_model_init_random(m, GlScheme::XavierUniform, 0.0, 1), GlStatus::Ok);

        let x = [0.1, 0.9, 0.4, 0.0, 0.7, 0.3];
        let y = [2.0];
        let mut g = ptr::null_mut();
        assert_eq!(gl_gradients_compute(m, x.as_ptr(), 1, y.as_ptr(), &mut g), GlStatus::Ok);
        assert!(gl_gradients_norm(g) > 0.0);

        let mut ex = ptr::null_mut();
        assert_eq!(gl_extract(m, g, 0, 1e-12, &mut ex), GlStatus::Ok);
        let n = gl_extraction_count(ex);
        assert!(n > 0);
        let mut buf = [0.0; 6];
        let mut row = usize::MAX;
        for i in 0..n {
            assert_eq!(gl_extraction_candidate(ex, i, buf.as_mut_ptr(), 6, &mut row), GlStatus::Ok);
            assert!(row < 10);
            for (a, b) in buf.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut met = GlMetrics::default();
        assert_eq!(gl_score(ex, x.as_ptr(), 1, 6, 1e-6, &mut met), GlStatus::Ok);
        assert_eq!(met.r, 1.0);
        assert_eq!(met.active, n);

        // clipping leaves the candidates unchanged
        assert_eq!(gl_gradients_clip(g, 1e-3), GlStatus::Ok);
        assert!(gl_gradients_norm(g) <= 1e-3 * (1.0 + 1e-12));
        let mut ex2 = ptr::null_mut();
        assert_eq!(gl_extract(m, g, 0, 0.0, &mut ex2), GlStatus::Ok);
        assert_eq!(gl_extraction_count(ex2), n);

        gl_extraction_free(ex);
        gl_extraction_free(ex2);
        gl_gradients_free(g);
        gl_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gl_model_mlp(4, 3, 2, ptr::null_mut()), GlStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(gl_model_mlp(4, 3, 1, &mut m), GlStatus::Dimension);
        assert!(m.is_null());
        assert_eq!(gl_model_mlp(4, 3, 2, &mut m), GlStatus::Ok);
        assert_eq!(last_error(), "");
        assert_eq!(gl_model_init_trap(m, 0, 1.5, 0), GlStatus::Config);
        assert_eq!(gl_model_init_trap(m, 1, 0.7, 0), GlStatus::Config);
        assert_eq!(gl_model_init_trap(m, 0, 0.7, 0), GlStatus::Ok);

        let x = [0.5; 4];
        let bad = [7.0];
        let mut g = ptr::null_mut();
        assert_eq!(gl_gradients_compute(m, x.as_ptr(), 1, bad.as_ptr(), &mut g), GlStatus::Input);
        assert_eq!(gl_gradients_compute(m, ptr::null(), 1, bad.as_ptr(), &mut g), GlStatus::NullPointer);
        assert_eq!(gl_gradients_clip(ptr::null_mut(), 1.0), GlStatus::NullPointer);

        let ok = [1.0];
        assert_eq!(gl_gradients_compute(m, x.as_ptr(), 1, ok.as_ptr(), &mut g), GlStatus::Ok);
        assert_eq!(gl_gradients_clip(g, -1.0), GlStatus::Input);
        let mut ex = ptr::null_mut();
        assert_eq!(gl_extract(m, g, 1, 1e-12, &mut ex), GlStatus::Config);
        assert_eq!(gl_extract(m, g, 0, 1e-12, &mut ex), GlStatus::Ok);
        let mut buf = [0.0; 3];
        if gl_extraction_count(ex) > 0 {
            assert_eq!(gl_extraction_candidate(ex, 0, buf.as_mut_ptr(), 3, ptr::null_mut()), GlStatus::Dimension);
        }
        assert_eq!(gl_extraction_candidate(ex, 999, buf.as_mut_ptr(), 3, ptr::null_mut()), GlStatus::Input);

        gl_extraction_free(ex);
        gl_gradients_free(g);
        gl_model_free(m);
        // freeing null is a no-op
        gl_model_free(ptr::null_mut());
        gl_gradients_free(ptr::null_mut());
        gl_extraction_free(ptr::null_mut());
        assert_eq!(gl_model_input_len(ptr::null()), 0);
    }
}

#[test]
fn model_json_and_strings() {
    use gradleak::nn::{Dense, Layer, Model, Task};
    let model = Model::new(
        vec![2],
        vec![Layer::Dense(Dense::new(2, 5)), Layer::Relu, Layer::Dense(Dense::new(5, 3))],
        Task::Multiclass,
    )
    .unwrap();
    let json = CString::new(serde_json::to_string(&model).unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gl_model_from_json(json.as_ptr(), &mut m), GlStatus::Ok, "{}", last_error());
        assert_eq!(gl_model_input_len(m), 2);
        assert_eq!(gl_model_output_dim(m), 3);
        gl_model_free(m);
        let garbage = CString::new("{").unwrap();
        assert_eq!(gl_model_from_json(garbage.as_ptr(), &mut m), GlStatus::Json);
        assert_eq!(gl_model_from_json(ptr::null(), &mut m), GlStatus::NullPointer);
        let bytes = [0xffu8, 0xfe, 0];
        assert_eq!(gl_model_from_json(bytes.as_ptr().cast(), &mut m), GlStatus::Utf8);
        assert_eq!(CStr::from_ptr(gl_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn runs_an_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "dataset": "tabular:16",
        "examples": 50,
        "arch": {"kind": "mlp", "neurons": 40},
        "round": {"batch_size": 4},
        "seeds": [0, 1],
        "out": dir.path(),
    });
    let cmd = CString::new("active").unwrap();
    let cfg = CString::new(cfg.to_string()).unwrap();
    unsafe {
        assert_eq!(gl_run_experiment(cmd.as_ptr(), cfg.as_ptr()), GlStatus::Ok, "{}", last_error());
        let bad = CString::new("nope").unwrap();
        assert_eq!(gl_run_experiment(bad.as_ptr(), cfg.as_ptr()), GlStatus::Config);
    }
    assert!(dir.path().join("active.csv").is_file());
}

#[test]
fn header_declares_the_api() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/gradleak.h")).unwrap();
    for f in [
        "gl_last_error",
        "gl_model_mlp",
        "gl_model_free",
        "gl_gradients_compute",
        "gl_extract",
        "gl_score",
        "gl_run_experiment",
        "GL_STATUS_OK",
        "typedef struct GlModel GlModel",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
    // the header must be valid C on its own
    let probe = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(probe.path(), "#include \"gradleak.h\"\nint main(void) { return GL_STATUS_OK; }\n").unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(dir.join("include"))
        .arg(probe.path())
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available, skipped syntax check: {e}"),
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libgradleak_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built, skipped", lib.display());
        return;
    }
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let Ok(out) = Command::new("cc")
        .arg(dir.join("examples/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
    else {
        eprintln!("no C compiler available, skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("R=1.000"));
}
