use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cmsa_vqa::data::TensorBundle;
use cmsa_vqa::harness::{build_vqa, save_checkpoint, RunConfig};
use cmsa_vqa::image::spatial_map;
use cmsa_vqa::numerics::{Graph, SplitRng, Tensor};
use cmsa_vqa_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { cmsa_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn spatial_map_matches_core() {
    let mut out = vec![0.0; 7 * 7 * 8];
    assert_eq!(unsafe { cmsa_spatial_map(7, out.as_mut_ptr(), out.len()) }, CmsaStatus::Ok);
    assert_eq!(out, spatial_map(7).unwrap().data());
}

#[test]
fn errors_are_reported() {
    let mut out = [0.0; 4];
    assert_eq!(unsafe { cmsa_spatial_map(2, out.as_mut_ptr(), 4) }, CmsaStatus::BufferTooSmall);
    assert!(last_error().contains("needs 32"), "{}", last_error());
    assert_eq!(unsafe { cmsa_spatial_map(0, out.as_mut_ptr(), 4) }, CmsaStatus::InvalidArgument);
    assert_eq!(unsafe { cmsa_spatial_map(2, ptr::null_mut(), 32) }, CmsaStatus::NullArgument);

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.cmtb").unwrap();
    assert_eq!(unsafe { cmsa_model_load(missing.as_ptr(), &mut model) }, CmsaStatus::Io);
    assert!(model.is_null());
    assert_eq!(unsafe { cmsa_model_load(ptr::null(), &mut model) }, CmsaStatus::NullArgument);
    unsafe { cmsa_model_free(ptr::null_mut()) };
}

#[test]
fn bundle_access() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.cmtb");
    let mut b = TensorBundle::new();
    b.insert_tensor("w", Tensor::from_fn([3, 4], |i| i as f64)).unwrap();
    b.insert_tensor("s", Tensor::scalar(2.5)).unwrap();
    b.insert_bytes("__config__", b"x".to_vec()).unwrap();
    b.write(&path).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cmsa_bundle_read(cpath(&path).as_ptr(), &mut h) }, CmsaStatus::Ok);
    assert_eq!(unsafe { cmsa_bundle_len(h) }, 3);
    let mut name = [0 as c_char; 16];
    assert_eq!(unsafe { cmsa_bundle_entry_name(h, 1, name.as_mut_ptr(), 16) }, CmsaStatus::Ok);
    assert_eq!(name[0] as u8, b's');
    assert_eq!(name[1], 0);

    let (mut dims, mut rank) = ([0usize; 4], 0usize);
    let w = CString::new("w").unwrap();
    assert_eq!(unsafe { cmsa_bundle_tensor_shape(h, w.as_ptr(), dims.as_mut_ptr(), 4, &mut rank) }, CmsaStatus::Ok);
    assert_eq!((rank, &dims[..2]), (2, &[3usize, 4][..]));
    let mut data = [0.0; 12];
    assert_eq!(unsafe { cmsa_bundle_tensor_data(h, w.as_ptr(), data.as_mut_ptr(), 12) }, CmsaStatus::Ok);
    assert_eq!(data[11], 11.0);

    let s = CString::new("s").unwrap();
    assert_eq!(unsafe { cmsa_bundle_tensor_shape(h, s.as_ptr(), ptr::null_mut(), 0, &mut rank) }, CmsaStatus::Ok);
    assert_eq!(rank, 0);
    let cfg = CString::new("__config__").unwrap();
    assert_eq!(unsafe { cmsa_bundle_tensor_data(h, cfg.as_ptr(), data.as_mut_ptr(), 12) }, CmsaStatus::InvalidArgument);
    unsafe { cmsa_bundle_free(h) };

    std::fs::write(&path, b"CMTB").unwrap();
    assert_eq!(unsafe { cmsa_bundle_read(cpath(&path).as_ptr(), &mut h) }, CmsaStatus::Bundle);
}

fn tiny_config() -> RunConfig {
    RunConfig::parse("image_size = 16\nchannels = 2,3,4\nstem_channels = 2\nemb_half = 2\nd_q = 4\nl_w = 3\n").unwrap()
}

#[test]
fn model_predictions_match_core() {
    let cfg = tiny_config();
    let (model, store) = build_vqa(&cfg, 10, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vqa.cmtb");
    save_checkpoint(&path, &store, &cfg, 0).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cmsa_model_load(cpath(&path).as_ptr(), &mut h) }, CmsaStatus::Ok);
    let mut info = CmsaModelInfo::default();
    assert_eq!(unsafe { cmsa_model_info(h, &mut info) }, CmsaStatus::Ok);
    assert_eq!((info.image_size, info.question_len, info.vocab_size, info.num_answers, info.grid), (16, 3, 10, 5, 2));

    let mut rng = SplitRng::new(3);
    let image = Tensor::from_fn([16, 16, 1], |_| rng.uniform(-1.0, 1.0));
    let tokens = [4u32, 7, 0];
    let (mut logits, mut gate) = ([0.0; 5], [0.0; 3]);
    let status = unsafe {
        cmsa_model_predict(h, image.data().as_ptr(), image.numel(), tokens.as_ptr(), 3, logits.as_mut_ptr(), 5, gate.as_mut_ptr(), 3)
    };
    assert_eq!(status, CmsaStatus::Ok, "{}", last_error());

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &store, &image, &[4, 7, 0]).unwrap();
    assert_eq!(&logits[..], g.value(fwd.answer_logits).data());
    assert_eq!(&gate[..], g.value(fwd.gate.weights).data());

    let (mut answer, mut image_type) = (0u32, 0u32);
    let status = unsafe {
        cmsa_model_predict_class(h, image.data().as_ptr(), image.numel(), tokens.as_ptr(), 3, &mut answer, &mut image_type)
    };
    assert_eq!(status, CmsaStatus::Ok);
    assert!(answer < 5 && image_type < 3);

    let status = unsafe {
        cmsa_model_predict(h, image.data().as_ptr(), 10, tokens.as_ptr(), 3, logits.as_mut_ptr(), 5, gate.as_mut_ptr(), 3)
    };
    assert_eq!(status, CmsaStatus::InvalidArgument);
    let status = unsafe {
        cmsa_model_predict(h, image.data().as_ptr(), image.numel(), tokens.as_ptr(), 2, logits.as_mut_ptr(), 5, gate.as_mut_ptr(), 3)
    };
    assert_eq!(status, CmsaStatus::Shape);
    unsafe { cmsa_model_free(h) };
}

#[test]
fn gradcheck_through_ffi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.conf");
    std::fs::write(&path, tiny_config().to_text()).unwrap();
    let mut worst = f64::NAN;
    assert_eq!(unsafe { cmsa_gradcheck(cpath(&path).as_ptr(), &mut worst) }, CmsaStatus::Ok, "{}", last_error());
    assert!(worst <= 1e-4);

    std::fs::write(&path, "bogus = 1\n").unwrap();
    assert_eq!(unsafe { cmsa_gradcheck(cpath(&path).as_ptr(), ptr::null_mut()) }, CmsaStatus::Config);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(crate_dir().join("include/cmsa_vqa.h")).unwrap();
    for f in [
        "cmsa_last_error_message",
        "cmsa_model_load",
        "cmsa_model_free",
        "cmsa_model_info",
        "cmsa_model_predict",
        "cmsa_model_predict_class",
        "cmsa_spatial_map",
        "cmsa_gradcheck",
        "cmsa_bundle_read",
        "cmsa_bundle_free",
        "cmsa_bundle_len",
        "cmsa_bundle_entry_name",
        "cmsa_bundle_tensor_shape",
        "cmsa_bundle_tensor_data",
        "CMSA_STATUS_BUFFER_TOO_SMALL",
        "typedef struct CmsaModel CmsaModel",
    ] {
        assert!(header.contains(f), "header is missing {f}");
    }
}

/// Compiles the C smoke test against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libcmsa_vqa_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");

    let bundle = dir.path().join("w.cmtb");
    let mut b = TensorBundle::new();
    b.insert_tensor("w", Tensor::from_fn([3, 4], |i| i as f64)).unwrap();
    b.write(&bundle).unwrap();
    let out = Command::new(&bin).arg(&bundle).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
