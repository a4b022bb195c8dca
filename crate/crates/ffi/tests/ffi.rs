use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use veriforge::data::{write_wav_pcm16, Waveform};
use veriforge::nn::{build_trunk, save_checkpoint, Checkpoint, Family, TrunkConfig};
use veriforge_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = vf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tone(freq: f64, seconds: f64) -> Waveform {
    let sr = 16_000;
    let n = (seconds * sr as f64) as usize;
    Waveform::new(
        (0..n)
            .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect(),
        sr,
    )
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut cfg = TrunkConfig::new(Family::TdnnLite).with_scale(0.125);
    cfg.embedding_dim = 16;
    let model = build_trunk::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model)).unwrap();
    path
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(vf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn eer_and_min_dcf_on_fixture() {
    let scores = [0.9, 0.8, 0.7, 0.1];
    let labels = [1u8, 0, 1, 0];
    let mut eer = f64::NAN;
    let s = unsafe { vf_eer(scores.as_ptr(), labels.as_ptr(), 4, &mut eer) };
    assert_eq!(s, VfStatus::Ok);
    assert!(vf_last_error().is_null());
    // One target sits below one non-target: both error rates are 1/2 at
    // the crossing threshold.
    assert!((eer - 0.5).abs() < 1e-12, "{eer}");
    let mut dcf = f64::NAN;
    let s = unsafe { vf_min_dcf(scores.as_ptr(), labels.as_ptr(), 4, 0.05, 1.0, 1.0, &mut dcf) };
    assert_eq!(s, VfStatus::Ok);
    assert!((0.0..=1.0).contains(&dcf));
}

#[test]
fn bad_arguments_report_usage() {
    let scores = [0.5, 0.4];
    let mut out = 0.0;
    let s = unsafe { vf_eer(scores.as_ptr(), ptr::null(), 2, &mut out) };
    assert_eq!(s, VfStatus::Usage);
    assert!(last_error().contains("labels"));
    let labels = [1u8, 7];
    let s = unsafe { vf_eer(scores.as_ptr(), labels.as_ptr(), 2, &mut out) };
    assert_eq!(s, VfStatus::Usage);
    let s = unsafe { vf_min_dcf(scores.as_ptr(), [1u8, 0].as_ptr(), 2, 1.5, 1.0, 1.0, &mut out) };
    assert_eq!(s, VfStatus::Usage);
}

#[test]
fn degenerate_labels_are_data_errors() {
    let scores = [0.5, 0.4];
    let labels = [1u8, 1];
    let mut out = 0.0;
    let s = unsafe { vf_eer(scores.as_ptr(), labels.as_ptr(), 2, &mut out) };
    assert_eq!(s, VfStatus::Data);
    assert!(!last_error().is_empty());
}

#[test]
fn missing_checkpoint_is_data_error_and_out_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut m: *mut VfModel = ptr::null_mut();
    let s = unsafe { vf_model_load(cstr(&dir.path().join("none.ckpt")).as_ptr(), &mut m) };
    assert_eq!(s, VfStatus::Data);
    assert!(m.is_null());
    assert!(last_error().contains("none.ckpt"));
    unsafe { vf_model_free(ptr::null_mut()) };
}

#[test]
fn fuse_search_prefers_the_better_system() {
    // System 0 separates the classes, system 1 is reversed.
    let labels = [1u8, 1, 0, 0];
    let scores = [0.9, 0.8, 0.2, 0.1, 0.1, 0.2, 0.8, 0.9];
    let mut w = [9u8; 2];
    let mut v = f64::NAN;
    let s = unsafe {
        vf_fuse_search(
            scores.as_ptr(),
            2,
            4,
            labels.as_ptr(),
            VfObjective::Eer,
            w.as_mut_ptr(),
            &mut v,
        )
    };
    assert_eq!(s, VfStatus::Ok, "{}", last_error());
    assert_eq!(w, [1, 0]);
    assert_eq!(v, 0.0);
}

#[test]
fn model_round_trip_embed_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let mut m: *mut VfModel = ptr::null_mut();
    assert_eq!(unsafe { vf_model_load(cstr(&ck).as_ptr(), &mut m) }, VfStatus::Ok);
    assert!(!m.is_null());
    let dim = unsafe { vf_model_embedding_dim(m) };
    assert_eq!(dim, 16);

    let a = tone(220.0, 4.5);
    write_wav_pcm16(dir.path().join("b.wav"), &tone(330.0, 5.0)).unwrap();

    let mut emb = vec![0.0; dim];
    let s = unsafe { vf_model_embed_samples(m, a.samples.as_ptr(), a.len(), a.sample_rate, emb.as_mut_ptr(), dim) };
    assert_eq!(s, VfStatus::Ok, "{}", last_error());
    assert!(emb.iter().all(|x| x.is_finite()));
    let norm: f64 = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0 && norm <= 1.0 + 1e-9);

    let mut small = vec![0.0; dim - 1];
    let s = unsafe {
        vf_model_embed_samples(
            m,
            a.samples.as_ptr(),
            a.len(),
            a.sample_rate,
            small.as_mut_ptr(),
            dim - 1,
        )
    };
    assert_eq!(s, VfStatus::Usage);

    // Offsets of a 13 s utterance are whole seconds and a 220 Hz tone is
    // 1 s periodic, so all segments coincide and the self score is exactly 1.
    write_wav_pcm16(dir.path().join("a.wav"), &tone(220.0, 13.0)).unwrap();
    let mut self_score = 0.0;
    let pa = cstr(&dir.path().join("a.wav"));
    let s = unsafe { vf_model_score_files(m, pa.as_ptr(), pa.as_ptr(), &mut self_score) };
    assert_eq!(s, VfStatus::Ok, "{}", last_error());
    assert!((self_score - 1.0).abs() < 1e-5, "{self_score}");

    std::fs::write(dir.path().join("trials.txt"), "1 a.wav a.wav\n0 a.wav b.wav\n").unwrap();
    let mut t: *mut VfTrials = ptr::null_mut();
    assert_eq!(
        unsafe { vf_trials_load(cstr(&dir.path().join("trials.txt")).as_ptr(), &mut t) },
        VfStatus::Ok
    );
    assert_eq!(unsafe { vf_trials_len(t) }, 2);
    let mut labels = [9u8; 2];
    assert_eq!(unsafe { vf_trials_labels(t, labels.as_mut_ptr(), 2) }, VfStatus::Ok);
    assert_eq!(labels, [1, 0]);
    let mut scores = [0.0; 2];
    let root = cstr(dir.path());
    let s = unsafe { vf_score_trials(m, t, root.as_ptr(), scores.as_mut_ptr(), 2) };
    assert_eq!(s, VfStatus::Ok, "{}", last_error());
    assert!((scores[0] - self_score).abs() < 1e-12);

    unsafe {
        vf_trials_free(t);
        vf_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/veriforge.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "vf_model_load",
        "vf_model_free",
        "vf_eer",
        "vf_min_dcf",
        "vf_fuse_search",
        "vf_last_error",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"veriforge.h\"\nint main(void){VfModel*m=0;return vf_model_load(\"x\",&m)==VF_STATUS_OK;}\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C compile: {cc} unavailable ({e})"),
    }
}
