use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vaeve::config::RunConfig;
use vaeve::training::{train_fingerprint, Checkpoint, RngState};
use vaeve::vaeve::{encode, VaeveParams};
use vaeve_ffi::*;

fn fixture(dir: &Path) -> (RunConfig, VaeveParams, CString, CString) {
    let mut cfg = RunConfig::default();
    cfg.corpus.feature_dim = 3;
    cfg.vaeve.feature_dim = 3;
    cfg.vaeve.latent_dim = 2;
    cfg.vaeve.enc_cells = 4;
    cfg.vaeve.dec_cells = 4;
    let rng = ChaCha8Rng::seed_from_u64(5);
    let params = VaeveParams::init(&cfg.vaeve, &mut rng.clone());
    let ckpt = Checkpoint {
        fingerprint: train_fingerprint(&cfg.vaeve, &cfg.train),
        params: params.as_set().clone(),
        optimizer: vaeve::autodiff::ParamSet::new(),
        epoch: 0,
        steps: 0,
        rng: RngState::capture(&rng),
    };
    let (cpath, kpath) = (dir.join("run.toml"), dir.join("model.vec"));
    std::fs::write(&cpath, cfg.to_toml()).unwrap();
    ckpt.save(&kpath).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    (cfg, params, c(&cpath), c(&kpath))
}

fn last_error() -> String {
    let p = vaeve_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_encode_free() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, params, cpath, kpath) = fixture(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            vaeve_model_load(cpath.as_ptr(), kpath.as_ptr(), &mut model),
            VaeveStatus::Ok
        );
        assert!(vaeve_last_error().is_null());
        let (mut f, mut d, mut p) = (0, 0, 0);
        assert_eq!(
            vaeve_model_dims(model, &mut f, &mut d, &mut p),
            VaeveStatus::Ok
        );
        assert_eq!((f, d, p), (3, 2, 8));

        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut mean = vec![0.0; 8];
        let mut sd = vec![0.0; 8];
        assert_eq!(
            vaeve_model_encode_mean(model, x.as_ptr(), 4, 3, mean.as_mut_ptr(), 8),
            VaeveStatus::Ok
        );
        let direct = encode(
            &vaeve::autodiff::Tensor::matrix(4, 3, x.clone()).unwrap(),
            &cfg.vaeve,
            &params,
        )
        .unwrap();
        assert_eq!(mean, direct.mu.data());
        assert_eq!(
            vaeve_model_encode(
                model,
                x.as_ptr(),
                4,
                3,
                mean.as_mut_ptr(),
                sd.as_mut_ptr(),
                8
            ),
            VaeveStatus::Ok
        );
        assert_eq!(sd, direct.sd.data());

        assert_eq!(
            vaeve_model_encode_mean(model, x.as_ptr(), 4, 3, mean.as_mut_ptr(), 7),
            VaeveStatus::Dimension
        );
        assert!(last_error().contains("8 needed"), "{}", last_error());
        assert_eq!(
            vaeve_model_encode_mean(model, x.as_ptr(), 3, 4, mean.as_mut_ptr(), 8),
            VaeveStatus::Dimension
        );
        assert!(last_error().contains("expected 3, got 4"));
        vaeve_model_free(model);
        vaeve_model_free(ptr::null_mut());
    }
}

#[test]
fn failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _, cpath, kpath) = fixture(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            vaeve_model_load(ptr::null(), kpath.as_ptr(), &mut model),
            VaeveStatus::NullArgument
        );
        assert!(model.is_null());
        let missing = CString::new("/nonexistent/model.vec").unwrap();
        assert_eq!(
            vaeve_model_load(cpath.as_ptr(), missing.as_ptr(), &mut model),
            VaeveStatus::Io
        );
        let junk = dir.path().join("junk.vec");
        std::fs::write(&junk, b"VEC1\x01").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            vaeve_model_load(cpath.as_ptr(), junk.as_ptr(), &mut model),
            VaeveStatus::Format
        );

        cfg.train.epochs += 1;
        let other = dir.path().join("other.toml");
        std::fs::write(&other, cfg.to_toml()).unwrap();
        let other = CString::new(other.to_str().unwrap()).unwrap();
        assert_eq!(
            vaeve_model_load(other.as_ptr(), kpath.as_ptr(), &mut model),
            VaeveStatus::Fingerprint
        );
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[vaeve]\nwidth = 1\n").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(
            vaeve_model_load(bad.as_ptr(), kpath.as_ptr(), &mut model),
            VaeveStatus::Config
        );
        assert!(last_error().contains("width"));
        assert_eq!(
            vaeve_model_dims(
                ptr::null(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut()
            ),
            VaeveStatus::NullArgument
        );
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(vaeve_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(
        src.path(),
        "#include \"vaeve.h\"\n\
         int main(void) {\n\
           VaeveModel *m = 0;\n\
           VaeveStatus s = vaeve_model_load(\"a\", \"b\", &m);\n\
           return s == VAEVE_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header)
        .arg(src.path())
        .output()
    {
        Ok(o) => o,
        Err(_) => {
            eprintln!("no C compiler on PATH; skipping header check");
            return;
        }
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
