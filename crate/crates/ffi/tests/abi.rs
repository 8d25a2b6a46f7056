use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use slotmoe::pipeline::{ExperimentConfig, Model};
use slotmoe_ffi::*;

fn last_error() -> String {
    let p = slotmoe_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tensor(shape: &[usize], data: &[f64]) -> *mut SlotmoeTensor {
    let mut out = ptr::null_mut();
    let status = unsafe { slotmoe_tensor_new(shape.as_ptr(), shape.len(), data.as_ptr(), data.len(), &mut out) };
    assert_eq!(status, SlotmoeStatus::Ok);
    out
}

fn values(t: *const SlotmoeTensor) -> Vec<f64> {
    let n = unsafe { slotmoe_tensor_len(t) };
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { slotmoe_tensor_data(t, buf.as_mut_ptr(), n) }, SlotmoeStatus::Ok);
    buf
}

#[test]
fn tensor_round_trip_and_errors() {
    let t = tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    unsafe {
        assert_eq!(slotmoe_tensor_ndim(t), 2);
        let mut shape = [0usize; 2];
        assert_eq!(slotmoe_tensor_shape(t, shape.as_mut_ptr(), 2), SlotmoeStatus::Ok);
        assert_eq!(shape, [2, 3]);
        assert!(slotmoe_last_error().is_null());
        assert_eq!(slotmoe_tensor_shape(t, shape.as_mut_ptr(), 1), SlotmoeStatus::InvalidArgument);
        assert!(last_error().contains("too small"));
    }
    assert_eq!(values(t), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    unsafe { slotmoe_tensor_free(t) };

    let mut out = ptr::null_mut();
    let data = [1.0, 2.0, 3.0];
    let status = unsafe { slotmoe_tensor_new([2usize, 2].as_ptr(), 2, data.as_ptr(), 3, &mut out) };
    assert_eq!(status, SlotmoeStatus::InvalidArgument);
    assert!(out.is_null());
    let status = unsafe { slotmoe_tensor_new(ptr::null(), 1, data.as_ptr(), 3, &mut out) };
    assert_eq!(status, SlotmoeStatus::NullPointer);
    unsafe { slotmoe_tensor_free(ptr::null_mut()) };
}

#[test]
fn sinkhorn_plan_has_uniform_marginals() {
    let logits = tensor(&[3, 2], &[0.3, -0.1, 1.2, 0.4, -0.7, 0.0]);
    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { slotmoe_sinkhorn(logits, 0.5, 200, &mut plan) }, SlotmoeStatus::Ok);
    let p = values(plan);
    for j in 0..2 {
        assert!(((p[j] + p[2 + j] + p[4 + j]) - 0.5).abs() < 1e-9);
    }
    for i in 0..3 {
        assert!(((p[2 * i] + p[2 * i + 1]) - 1.0 / 3.0).abs() < 1e-9);
    }
    assert_eq!(unsafe { slotmoe_sinkhorn(logits, 0.0, 8, &mut plan) }, SlotmoeStatus::Config);
    unsafe {
        slotmoe_tensor_free(plan);
        slotmoe_tensor_free(logits);
    }
}

#[test]
fn weighting_steps_keep_state_and_sum_to_task_count() {
    let mut state = ptr::null_mut();
    assert_eq!(unsafe { slotmoe_weighting_new(0.7, 0.1, &mut state) }, SlotmoeStatus::Ok);
    let names = [CString::new("a").unwrap(), CString::new("b").unwrap()];
    let ptrs: Vec<_> = names.iter().map(|n| n.as_ptr()).collect();
    let mut w = [0.0; 2];
    unsafe {
        assert_eq!(slotmoe_weighting_step(state, ptrs.as_ptr(), [1.0, 2.0].as_ptr(), 2, w.as_mut_ptr()), SlotmoeStatus::Ok);
        assert_eq!(w, [1.0, 1.0]);
        // a rises relative to its average, b falls
        assert_eq!(slotmoe_weighting_step(state, ptrs.as_ptr(), [1.5, 1.0].as_ptr(), 2, w.as_mut_ptr()), SlotmoeStatus::Ok);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-12 && w[0] > w[1]);
        let before = slotmoe_weighting_ema(state, names[0].as_ptr());
        assert!((before - (0.7 * 1.0 + 0.3 * 1.5)).abs() < 1e-12);
        let status = slotmoe_weighting_step(state, ptrs.as_ptr(), [f64::NAN, 1.0].as_ptr(), 2, w.as_mut_ptr());
        assert_eq!(status, SlotmoeStatus::InvalidArgument);
        assert_eq!(slotmoe_weighting_ema(state, names[0].as_ptr()), before);
        assert!(slotmoe_weighting_ema(state, CString::new("zzz").unwrap().as_ptr()).is_nan());
        slotmoe_weighting_free(state);
    }
}

#[test]
fn metrics_and_samples() {
    let task = CString::new("denoise").unwrap();
    let (mut clean, mut degraded) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { slotmoe_make_sample(task.as_ptr(), 3, 4, 8, &mut clean, &mut degraded) }, SlotmoeStatus::Ok);
    let mut same = SlotmoeScores::default();
    let mut noisy = SlotmoeScores::default();
    unsafe {
        assert_eq!(slotmoe_metrics(clean, clean, &mut same), SlotmoeStatus::Ok);
        assert_eq!(slotmoe_metrics(degraded, clean, &mut noisy), SlotmoeStatus::Ok);
    }
    assert_eq!(same.psnr, 100.0);
    assert!((same.ssim - 1.0).abs() < 1e-12 && same.sam == 0.0 && same.ergas == 0.0);
    assert!(noisy.psnr < same.psnr && noisy.sam > 0.0);

    let bad = CString::new("sharpen").unwrap();
    let status = unsafe { slotmoe_make_sample(bad.as_ptr(), 3, 4, 8, &mut clean, &mut degraded) };
    assert_eq!(status, SlotmoeStatus::Config);
    assert!(last_error().contains("sharpen"));
    unsafe {
        slotmoe_tensor_free(clean);
        slotmoe_tensor_free(degraded);
    }
}

#[test]
fn model_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        d: 4,
        d_e: 4,
        d_p: 4,
        slots: 4,
        ..ExperimentConfig::desk()
    };
    let model = Model::build(&cfg).unwrap();
    model.save(dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { slotmoe_model_load(path.as_ptr(), &mut handle) }, SlotmoeStatus::Ok);

    let x: Vec<f64> = (0..4 * 8 * 8).map(|i| (i % 7) as f64 / 7.0).collect();
    let input = tensor(&[4, 8, 8], &x);
    let prompt = CString::new("remove the noise").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { slotmoe_model_predict(handle, input, prompt.as_ptr(), &mut out) }, SlotmoeStatus::Ok);
    let expected = model
        .predict(&slotmoe::Tensor::new(&[4, 8, 8], x).unwrap(), "remove the noise")
        .unwrap();
    assert_eq!(values(out), expected.data());

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { slotmoe_model_load(missing.as_ptr(), &mut other) }, SlotmoeStatus::Io);
    unsafe {
        slotmoe_tensor_free(out);
        slotmoe_tensor_free(input);
        slotmoe_model_free(handle);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        "#include \"slotmoe.h\"\nint main(void) { SlotmoeScores s = {0}; return (int)s.psnr + (int)SLOTMOE_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipping header check");
        return;
    };
    assert!(status.success());
}
