use std::ffi::{CStr, CString};
use std::ptr;

use s3tta_core::experiment::train_models;
use s3tta_core::synthdata::{generate_many, DomainSpec};
use s3tta_core::trainer::TrainConfig;
use s3tta_ffi::*;

fn last_error() -> String {
    let p = s3tta_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn total_loss_uses_default_weights() {
    let mut out = 0.0;
    let st = unsafe { s3tta_total_loss(1.0, 1.0, 1.0, ptr::null(), &mut out) };
    assert_eq!(st, S3ttaStatus::Ok);
    assert_eq!(out, 8.0);
    let w = S3ttaLossWeights {
        content: 0.0,
        style: 0.0,
        seg: 1.0,
    };
    unsafe { s3tta_total_loss(0.25, 9.0, 9.0, &w, &mut out) };
    assert_eq!(out, 0.25);
    assert!(s3tta_last_error_message().is_null());
}

#[test]
fn f1_ignores_label_numbering() {
    let gt = [0u32, 1, 1, 0, 2, 2, 0, 0, 0];
    let pred = [0u32, 7, 7, 0, 3, 3, 0, 0, 0];
    let mut f1 = -1.0;
    assert_eq!(unsafe { s3tta_f1(pred.as_ptr(), gt.as_ptr(), 3, 3, 0.5, &mut f1) }, S3ttaStatus::Ok);
    assert_eq!(f1, 1.0);
    let half = [0u32, 1, 1, 0, 0, 0, 0, 0, 0];
    unsafe { s3tta_f1(half.as_ptr(), gt.as_ptr(), 3, 3, 0.5, &mut f1) };
    assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn null_and_invalid_arguments_report_errors() {
    let gt = [0u32; 4];
    let mut f1 = 0.0;
    let st = unsafe { s3tta_f1(ptr::null(), gt.as_ptr(), 2, 2, 0.5, &mut f1) };
    assert_eq!(st, S3ttaStatus::NullPointer);
    assert!(last_error().contains("pred"));
    let st = unsafe { s3tta_f1(gt.as_ptr(), gt.as_ptr(), 2, 2, 1.5, &mut f1) };
    assert_eq!(st, S3ttaStatus::InvalidArgument);
    let st = unsafe { s3tta_total_loss(1.0, 1.0, 1.0, ptr::null(), ptr::null_mut()) };
    assert_eq!(st, S3ttaStatus::NullPointer);
}

#[test]
fn dice_and_jaccard_of_masks() {
    let a = [1u8, 1, 0, 0];
    let b = [1u8, 0, 0, 0];
    let (mut d, mut j) = (0.0, 0.0);
    assert_eq!(unsafe { s3tta_dice_jaccard(a.as_ptr(), b.as_ptr(), 4, &mut d, &mut j) }, S3ttaStatus::Ok);
    assert!((d - 2.0 / 3.0).abs() < 1e-12);
    assert!((j - 0.5).abs() < 1e-12);
}

#[test]
fn select_prefers_the_consistent_policy() {
    // Two policies at 2x3, angles 0 and 90. The first rotates cleanly, the
    // second gives unrelated variants.
    let base: Vec<f32> = (0..6).map(|i| i as f32 / 6.0).collect();
    // 90 degrees counterclockwise of a 2x3 image is 3x2.
    let rot: Vec<f32> = {
        let (h, w) = (2usize, 3usize);
        let mut out = vec![0.0; 6];
        for y in 0..w {
            for x in 0..h {
                out[y * h + x] = base[(h - 1 - x) * w + y];
            }
        }
        out
    };
    let noisy = [0.9f32, 0.1, 0.8, 0.2, 0.7, 0.3];
    let mut data = Vec::new();
    data.extend(&base);
    data.extend(&rot);
    data.extend(&base);
    data.extend(&noisy);
    let (h, w) = ([2usize, 2], [3usize, 3]);
    let scales = [1.0, 1.0];
    let styles = [0i64, 1];
    let turns = [0u8, 1];
    let mut winner = 9;
    let mut scores = [0.0; 2];
    let st = unsafe {
        s3tta_select(
            data.as_ptr(),
            1,
            2,
            h.as_ptr(),
            w.as_ptr(),
            scales.as_ptr(),
            styles.as_ptr(),
            turns.as_ptr(),
            2,
            &mut winner,
            scores.as_mut_ptr(),
        )
    };
    assert_eq!(st, S3ttaStatus::Ok, "{}", if st == S3ttaStatus::Ok { String::new() } else { last_error() });
    assert_eq!(winner, 0);
    assert_eq!(scores[0], 0.0);
    assert!(scores[1] > 0.0);

    let bad_turns = [0u8, 5];
    let st = unsafe {
        s3tta_select(
            data.as_ptr(),
            1,
            2,
            h.as_ptr(),
            w.as_ptr(),
            scales.as_ptr(),
            styles.as_ptr(),
            bad_turns.as_ptr(),
            2,
            &mut winner,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, S3ttaStatus::InvalidArgument);
}

#[test]
fn loading_a_missing_model_fails_cleanly() {
    let dir = CString::new("/nonexistent/s3tta-model").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { s3tta_model_load(dir.as_ptr(), &mut model) };
    assert_eq!(st, S3ttaStatus::MissingArtifact);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    unsafe { s3tta_model_free(ptr::null_mut()) };
}

#[test]
fn trained_model_round_trip_and_prediction() {
    let spec = DomainSpec {
        height: 16,
        width: 16,
        channels: 1,
        cell_radius_range: (3.0, 4.0),
        cell_count_range: (1, 2),
        ..DomainSpec::cells_a()
    };
    let train = generate_many(&spec, 3, 1, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        pretrain_steps: 2,
        joint_steps: 2,
        scales: vec![1.0, 2.0],
        style_count: 1,
        angles: vec![0, 90, 180, 270],
        encoder_widths: vec![4, 6, 8, 8],
        seg_base_width: 4,
        ..TrainConfig::default()
    };
    let trained = train_models(&train, &cfg, None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    trained.models(&cfg).save(tmp.path()).unwrap();

    let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { s3tta_model_load(dir.as_ptr(), &mut model) }, S3ttaStatus::Ok);
    let mut n = 0;
    unsafe { s3tta_model_channels(model, &mut n) };
    assert_eq!(n, 1);
    unsafe { s3tta_model_policy_count(model, &mut n) };
    assert_eq!(n, 2);

    let img = &train[0].image;
    let mut labels = vec![u32::MAX; 256];
    let mut count = 0;
    let (mut scale, mut style) = (0.0, 0i64);
    for method in [S3ttaMethod::Baseline, S3ttaMethod::AggregateAll, S3ttaMethod::S3tta] {
        let st = unsafe {
            s3tta_predict(
                model,
                method,
                img.data().as_ptr(),
                1,
                16,
                16,
                labels.as_mut_ptr(),
                &mut count,
                &mut scale,
                &mut style,
            )
        };
        assert_eq!(st, S3ttaStatus::Ok);
        assert!(labels.iter().all(|&l| l as usize <= count));
    }
    assert!(scale == 1.0 || scale == 2.0);
    assert_eq!(style, 0);

    // wrong channel count is rejected, not a crash
    let rgb = vec![0.5f32; 3 * 256];
    let st = unsafe {
        s3tta_predict(
            model,
            S3ttaMethod::Baseline,
            rgb.as_ptr(),
            3,
            16,
            16,
            labels.as_mut_ptr(),
            &mut count,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, S3ttaStatus::InvalidArgument, "{}", last_error());
    unsafe { s3tta_model_free(model) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/s3tta.h")).unwrap();
    for name in [
        "S3ttaModel",
        "s3tta_model_load",
        "s3tta_model_free",
        "s3tta_predict",
        "s3tta_select",
        "s3tta_f1",
        "s3tta_dice_jaccard",
        "s3tta_total_loss",
        "s3tta_last_error_message",
        "S3TTA_STATUS_PANIC",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "s3tta.h"
int main(void) {
    double out = 0.0;
    S3ttaModel *model = NULL;
    S3ttaStatus st = s3tta_total_loss(1.0, 1.0, 1.0, NULL, &out);
    if (st != S3TTA_STATUS_OK) return 1;
    st = s3tta_model_load("missing", &model);
    s3tta_model_free(model);
    return st == S3TTA_STATUS_MISSING_ARTIFACT ? 0 : 1;
}
"#,
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(status.success(), "header failed to compile");
}
