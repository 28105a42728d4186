use std::ffi::{CStr, CString};
use std::ptr;

use mgcd::io::checkpoint::save_checkpoint;
use mgcd::textures::{generate, TextureKind};
use mgcd::{TrainConfig, TrainState};
use mgcd_ffi::*;

fn trained_checkpoint(dir: &std::path::Path) -> CString {
    let config = TrainConfig {
        batch_size: 4,
        iterations: 1,
        learning_rate: 1e-3,
        langevin_steps: 2,
        grids: 2,
        scale_factor: 2,
        channels: 1,
        channel_scale: 0.125,
        ..TrainConfig::default()
    };
    let data = generate(TextureKind::Stripes, 8, 1, 4, 1).unwrap().images;
    let mut state = TrainState::new(config, &data).unwrap();
    state.step(&data).unwrap();
    let path = dir.join("m.mgcd");
    save_checkpoint(&state, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = mgcd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_info_score_sample_inpaint() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained_checkpoint(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mgcd_model_load(path.as_ptr(), &mut model), MgcdStatus::Ok);
        let mut info = MgcdModelInfo::default();
        assert_eq!(mgcd_model_info(model, &mut info), MgcdStatus::Ok);
        assert_eq!(
            info,
            MgcdModelInfo { models: 2, grids: 2, scale_factor: 2, channels: 1, image_side: 4, iteration: 1 }
        );

        let n = 3;
        let mut images = vec![0.0f32; n * 16];
        assert_eq!(mgcd_model_sample(model, n, 7, images.as_mut_ptr()), MgcdStatus::Ok);
        assert!(images.iter().all(|v| v.is_finite()));

        let mut scores = vec![f32::NAN; 2 * n];
        assert_eq!(mgcd_model_score(model, images.as_ptr(), n, scores.as_mut_ptr()), MgcdStatus::Ok);
        assert!(scores.iter().all(|v| v.is_finite()));

        let mut masks = vec![0.0f32; n * 16];
        masks[5] = 1.0;
        masks[16 + 10] = 1.0;
        let mut out = vec![0.0f32; n * 16];
        assert_eq!(mgcd_model_inpaint(model, images.as_ptr(), masks.as_ptr(), n, 1, out.as_mut_ptr()), MgcdStatus::Ok);
        for i in 0..n * 16 {
            if masks[i] == 0.0 {
                assert_eq!(out[i].to_bits(), images[i].to_bits());
            }
        }

        let copy = CString::new(dir.path().join("copy.mgcd").to_str().unwrap()).unwrap();
        assert_eq!(mgcd_model_save(model, copy.as_ptr()), MgcdStatus::Ok);
        assert_eq!(std::fs::read(dir.path().join("copy.mgcd")).unwrap(), std::fs::read(dir.path().join("m.mgcd")).unwrap());
        mgcd_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mgcd_model_load(ptr::null(), &mut model), MgcdStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = CString::new(dir.path().join("none.mgcd").to_str().unwrap()).unwrap();
        assert_eq!(mgcd_model_load(missing.as_ptr(), &mut model), MgcdStatus::Io);
        assert!(model.is_null());

        let junk = dir.path().join("junk.mgcd");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(mgcd_model_load(junk.as_ptr(), &mut model), MgcdStatus::Format);

        let mut info = MgcdModelInfo::default();
        assert_eq!(mgcd_model_info(ptr::null(), &mut info), MgcdStatus::NullPointer);

        let path = trained_checkpoint(dir.path());
        assert_eq!(mgcd_model_load(path.as_ptr(), &mut model), MgcdStatus::Ok);
        let mut out = [0.0f32; 16];
        assert_eq!(mgcd_model_sample(model, 0, 0, out.as_mut_ptr()), MgcdStatus::InvalidArgument);
        assert_eq!(mgcd_model_sample(model, 1, 0, ptr::null_mut()), MgcdStatus::NullPointer);
        mgcd_model_free(model);
        mgcd_model_free(ptr::null_mut());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(mgcd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mgcd.h")).unwrap();
    for name in [
        "mgcd_last_error",
        "mgcd_version",
        "mgcd_model_load",
        "mgcd_model_save",
        "mgcd_model_free",
        "mgcd_model_info",
        "mgcd_model_score",
        "mgcd_model_sample",
        "mgcd_model_inpaint",
        "typedef struct MgcdModel MgcdModel",
        "MGCD_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
