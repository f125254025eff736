use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use gsnpose_ffi::*;

fn last_error() -> String {
    let p = gsn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn synth(seed: u64, stream: u64, count: usize) -> *mut GsnDataset {
    let mut d = ptr::null_mut();
    let st = unsafe { gsn_dataset_synth(c("mpii16").as_ptr(), seed, stream, count, 32, 0.3, &mut d) };
    assert_eq!(st, GsnStatus::Ok);
    d
}

#[test]
fn datasets_round_trip_through_a_file() {
    let d = synth(1, 1, 5);
    unsafe {
        assert_eq!(gsn_dataset_len(d), 5);
        assert_eq!(gsn_dataset_n_joints(d), 16);
        assert_eq!(gsn_dataset_image_size(d), 32);
        let dir = tempfile::tempdir().unwrap();
        let file = c(dir.path().join("d.annot").to_str().unwrap());
        assert_eq!(gsn_dataset_write(d, file.as_ptr()), GsnStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(gsn_dataset_read(file.as_ptr(), &mut back), GsnStatus::Ok);

        let mut a = vec![0.0; 32 * 32];
        let mut b = vec![0.0; 32 * 32];
        assert_eq!(gsn_dataset_image(d, 4, a.as_mut_ptr(), a.len()), GsnStatus::Ok);
        assert_eq!(gsn_dataset_image(back, 4, b.as_mut_ptr(), b.len()), GsnStatus::Ok);
        assert_eq!(a, b);
        let mut ja = vec![0.0; 48];
        let mut jb = vec![0.0; 48];
        assert_eq!(gsn_dataset_joints(d, 0, ja.as_mut_ptr(), ja.len()), GsnStatus::Ok);
        assert_eq!(gsn_dataset_joints(back, 0, jb.as_mut_ptr(), jb.len()), GsnStatus::Ok);
        assert_eq!(ja, jb);
        assert!(ja.chunks(3).all(|j| j[2] == 0.0 || j[2] == 1.0));

        assert_eq!(gsn_dataset_joints(d, 0, ja.as_mut_ptr(), 47), GsnStatus::BufferTooSmall);
        assert_eq!(gsn_dataset_image(d, 5, a.as_mut_ptr(), a.len()), GsnStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        gsn_dataset_free(back);
        gsn_dataset_free(d);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut d = ptr::null_mut();
    unsafe {
        assert_eq!(
            gsn_dataset_synth(c("coco").as_ptr(), 0, 1, 4, 32, 0.0, &mut d),
            GsnStatus::InvalidArgument
        );
        assert!(last_error().contains("unknown skeleton"));
        assert!(d.is_null());
        assert_eq!(
            gsn_dataset_synth(ptr::null(), 0, 1, 4, 32, 0.0, &mut d),
            GsnStatus::NullPointer
        );
        assert_eq!(
            gsn_dataset_read(c("/nonexistent/x.annot").as_ptr(), &mut d),
            GsnStatus::Io
        );
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.annot");
        std::fs::write(&junk, "not an annotation file\n").unwrap();
        assert_eq!(
            gsn_dataset_read(c(junk.to_str().unwrap()).as_ptr(), &mut d),
            GsnStatus::Format
        );
        assert_eq!(gsn_dataset_len(ptr::null()), 0);
        gsn_dataset_free(ptr::null_mut());
        gsn_model_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(gsn_version()) }.to_bytes().is_empty());
}

#[test]
fn train_save_load_predict_and_evaluate() {
    let tr = synth(2, 1, 8);
    let va = synth(2, 2, 4);
    let opts = c("max_epochs = 1\nbatch_size = 4\nhidden_dim = 4\nggnn_steps = 1\n");
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gsn_train(tr, va, opts.as_ptr(), &mut m), GsnStatus::Ok);
        assert_eq!(gsn_model_n_joints(m), 16);
        assert_eq!(gsn_model_image_size(m), 32);

        let mut img = vec![0.0; 32 * 32];
        assert_eq!(gsn_dataset_image(va, 0, img.as_mut_ptr(), img.len()), GsnStatus::Ok);
        let mut joints = vec![0.0; 48];
        assert_eq!(
            gsn_model_predict(m, img.as_ptr(), img.len(), joints.as_mut_ptr(), joints.len()),
            GsnStatus::Ok
        );
        assert!(joints.chunks(3).all(|j| (0.0..32.0).contains(&j[0]) && (0.0..32.0).contains(&j[1])));
        assert_eq!(
            gsn_model_predict(m, img.as_ptr(), 100, joints.as_mut_ptr(), joints.len()),
            GsnStatus::InvalidArgument
        );

        let dir = tempfile::tempdir().unwrap();
        let file = c(dir.path().join("m.ckpt").to_str().unwrap());
        assert_eq!(gsn_model_save(m, file.as_ptr()), GsnStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(gsn_model_load(file.as_ptr(), c("mpii16").as_ptr(), &mut loaded), GsnStatus::Ok);
        let mut again = vec![0.0; 48];
        assert_eq!(
            gsn_model_predict(loaded, img.as_ptr(), img.len(), again.as_mut_ptr(), again.len()),
            GsnStatus::Ok
        );
        assert_eq!(joints, again);
        assert_eq!(
            gsn_model_load(file.as_ptr(), c("lsp14").as_ptr(), &mut loaded),
            GsnStatus::InvalidArgument
        );
        assert!(last_error().contains("skeleton mismatch"));

        let mut s = GsnScores::default();
        assert_eq!(gsn_model_evaluate(m, va, &mut s), GsnStatus::Ok);
        assert!((0.0..=1.0).contains(&s.pck) && (0.0..=1.0).contains(&s.pckh));
        assert!((0.0..=1.0).contains(&s.oks_ap));

        let bad = c("colour = red");
        let mut none = ptr::null_mut();
        assert_eq!(gsn_train(tr, va, bad.as_ptr(), &mut none), GsnStatus::InvalidArgument);
        assert!(last_error().contains("unknown training option"));
        assert!(none.is_null());

        gsn_model_free(loaded);
        gsn_model_free(m);
        gsn_dataset_free(tr);
        gsn_dataset_free(va);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gsnpose.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["gsn_train", "gsn_model_predict", "gsn_last_error", "GSN_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from the header");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler found; skipping the syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
