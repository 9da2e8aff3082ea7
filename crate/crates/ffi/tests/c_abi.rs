use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use histospace::models::{build_autoencoder, build_histospace, save_checkpoint, AutoencoderVariant, HeadConfig};
use histospace::tensor::Tensor;
use histospace_ffi::*;

fn last_error() -> String {
    let p = hs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &Path) -> histospace::models::ModelBundle {
    let ae = build_autoencoder(AutoencoderVariant::Ae2, 16, 3).unwrap();
    let model = build_histospace(&ae, 4, &HeadConfig { hidden: 8, ..HeadConfig::default() }, 4).unwrap();
    save_checkpoint(&model, dir).unwrap();
    model
}

fn tiles(n: usize) -> Vec<f64> {
    (0..n * 3 * 16 * 16).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
}

#[test]
fn model_round_trip_matches_rust_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = saved_model(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hs_model_load(path.as_ptr(), &mut handle) }, HsStatus::Ok);
    assert!(hs_last_error_message().is_null());
    unsafe {
        assert_eq!(hs_model_input_size(handle), 16);
        assert_eq!(hs_model_n_outputs(handle), 4);
    }

    let input = tiles(3);
    let mut out = vec![0.0; 12];
    assert_eq!(unsafe { hs_model_predict(handle, input.as_ptr(), 3, out.as_mut_ptr(), out.len()) }, HsStatus::Ok);
    let expected = model.predict_expression(&Tensor::new(&[3, 3, 16, 16], input.clone()).unwrap()).unwrap();
    assert_eq!(out, expected.data());

    let status = unsafe { hs_model_predict(handle, input.as_ptr(), 3, out.as_mut_ptr(), 11) };
    assert_eq!(status, HsStatus::InvalidArgument);
    assert!(last_error().contains("out_len 11"));

    let mut rec = vec![0.0; input.len()];
    assert_eq!(unsafe { hs_model_reconstruct(handle, input.as_ptr(), 3, rec.as_mut_ptr()) }, HsStatus::InvalidArgument);
    unsafe { hs_model_free(handle) };
}

#[test]
fn autoencoder_reconstructs_but_does_not_predict() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&build_autoencoder(AutoencoderVariant::Ae3, 16, 1).unwrap(), dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hs_model_load(path.as_ptr(), &mut handle) }, HsStatus::Ok);
    assert_eq!(unsafe { hs_model_n_outputs(handle) }, 0);
    let input = tiles(2);
    let mut rec = vec![-1.0; input.len()];
    assert_eq!(unsafe { hs_model_reconstruct(handle, input.as_ptr(), 2, rec.as_mut_ptr()) }, HsStatus::Ok);
    assert!(rec.iter().all(|v| (0.0..=1.0).contains(v)));
    let mut out = [0.0; 1];
    assert_eq!(unsafe { hs_model_predict(handle, input.as_ptr(), 2, out.as_mut_ptr(), 0) }, HsStatus::InvalidArgument);
    assert!(last_error().contains("no expression head"));
    unsafe { hs_model_free(handle) };
}

#[test]
fn load_failures_set_codes() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hs_model_load(ptr::null(), &mut handle) }, HsStatus::NullPointer);
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { hs_model_load(missing.as_ptr(), &mut handle) }, HsStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("nonexistent"));
    unsafe { hs_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_through_the_abi() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [-1.0, -2.0, -3.0, -4.0];
    let mut r = 0.0;
    assert_eq!(unsafe { hs_pearson_r(x.as_ptr(), y.as_ptr(), 4, &mut r) }, HsStatus::Ok);
    assert_eq!(r, -1.0);
    assert_eq!(unsafe { hs_pearson_r(x.as_ptr(), y.as_ptr(), 1, &mut r) }, HsStatus::InvalidArgument);

    let pts = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0];
    let mut labels = [9u32; 4];
    assert_eq!(unsafe { hs_kmeans(pts.as_ptr(), 4, 2, 2, 0, 50, labels.as_mut_ptr()) }, HsStatus::Ok);
    assert_eq!(labels[0], labels[1]);
    assert_eq!(labels[2], labels[3]);
    assert_ne!(labels[0], labels[2]);
    assert_eq!(unsafe { hs_kmeans(pts.as_ptr(), 4, 2, 5, 0, 50, labels.as_mut_ptr()) }, HsStatus::InvalidArgument);

    let classes = [1, 1, 0, -1];
    let (mut matched, mut total) = (0, 0);
    assert_eq!(unsafe { hs_contingency(labels.as_ptr(), classes.as_ptr(), 4, &mut matched, &mut total) }, HsStatus::Ok);
    assert_eq!((matched, total), (3, 3));
}

fn target_dir() -> PathBuf {
    // tests/<name>-<hash> lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header_and_static_lib() {
    let lib = target_dir().join("libhistospace_ffi.a");
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    saved_model(&dir.path().join("model"));
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "histospace.h"
int main(int argc, char **argv) {
    HsModel *m = NULL;
    if (hs_model_load(argv[1], &m) != HS_STATUS_OK) { fprintf(stderr, "%s\n", hs_last_error_message()); return 1; }
    size_t s = hs_model_input_size(m), g = hs_model_n_outputs(m);
    double tiles[3 * 16 * 16];
    for (size_t i = 0; i < 3 * s * s; i++) tiles[i] = 0.5;
    double out[4];
    if (hs_model_predict(m, tiles, 1, out, g) != HS_STATUS_OK) return 2;
    hs_model_free(m);
    double x[3] = {1, 2, 3}, r = 0;
    hs_pearson_r(x, x, 3, &r);
    HsModel *bad = NULL;
    HsStatus st = hs_model_load("/nonexistent", &bad);
    printf("%zu %zu %.1f %d %s\n", s, g, r, (int)st, hs_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(dir.path().join("model")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("16 4 1.0 4 {}", env!("CARGO_PKG_VERSION")));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
