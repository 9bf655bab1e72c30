use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use uchfr_core::backbone::{BackboneConfig, InputSpec, Network, Provenance};
use uchfr_core::cmd::{symmetric_score, CmdConfig};
use uchfr_core::eval::{rank1, roc, tpr_at_far};
use uchfr_core::Tensor;
use uchfr_ffi::*;

fn backbone() -> BackboneConfig {
    BackboneConfig {
        input: InputSpec::Vector { dim: 6 },
        hidden: vec![8, 8],
        se_channels: 4,
        se_reduction: 2,
        embedding_dim: 4,
        num_pretrain_classes: 3,
        ..BackboneConfig::default()
    }
}

fn hfr_net() -> Network<f64> {
    let pre = Network::<f64>::new_pretrain(backbone(), 1).unwrap();
    let ckpt = pre.to_checkpoint(Provenance::default());
    Network::swap_head(&ckpt, CmdConfig { hidden: [5, 3], ..CmdConfig::default() }, 2).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(uchfr_last_error()) }.to_string_lossy().into_owned()
}

fn load(p: &Path) -> (UchfrStatus, *mut UchfrModel) {
    let mut m = ptr::null_mut();
    let s = unsafe { uchfr_model_load(cpath(p).as_ptr(), &mut m) };
    (s, m)
}

#[test]
fn embed_and_score_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let net = hfr_net();
    net.to_checkpoint(Provenance::default()).save(&path).unwrap();

    let (status, m) = load(&path);
    assert_eq!(status, UchfrStatus::Ok, "{}", last_error());
    let (mut din, mut dout, mut has) = (0usize, 0usize, 0u8);
    unsafe {
        assert_eq!(uchfr_model_input_dim(m, &mut din), UchfrStatus::Ok);
        assert_eq!(uchfr_model_embedding_dim(m, &mut dout), UchfrStatus::Ok);
        assert_eq!(uchfr_model_has_cmd(m, &mut has), UchfrStatus::Ok);
    }
    assert_eq!((din, dout, has), (6, 4, 1));

    let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut e = vec![0.0; 12];
    let s = unsafe { uchfr_model_embed(m, x.as_ptr(), 3, 6, e.as_mut_ptr(), e.len()) };
    assert_eq!(s, UchfrStatus::Ok, "{}", last_error());
    let want = net.embed(&Tensor::new(vec![3, 6], x).unwrap()).unwrap();
    assert_eq!(e, want.data());

    let mut p = 0.0;
    let s = unsafe { uchfr_model_cmd_score(m, e.as_ptr(), e[4..].as_ptr(), 4, &mut p) };
    assert_eq!(s, UchfrStatus::Ok);
    assert_eq!(p, symmetric_score(&e[..4], &e[4..8], &net.params).unwrap());
    let mut q = 0.0;
    unsafe { uchfr_model_cmd_score(m, e[4..].as_ptr(), e.as_ptr(), 4, &mut q) };
    assert_eq!(p, q);

    let mut small = vec![0.0; 11];
    let s = unsafe { uchfr_model_embed(m, e.as_ptr(), 3, 6, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, UchfrStatus::InvalidArgument);
    let s = unsafe { uchfr_model_embed(m, e.as_ptr(), 3, 5, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, UchfrStatus::InvalidArgument);
    assert!(last_error().contains("width 6"));
    unsafe { uchfr_model_free(m) };
}

#[test]
fn load_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load(&dir.path().join("missing.bin")).0, UchfrStatus::Io);

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not an archive").unwrap();
    assert_eq!(load(&junk).0, UchfrStatus::Format);

    let pre = dir.path().join("pre.bin");
    Network::<f32>::new_pretrain(backbone(), 0)
        .unwrap()
        .to_checkpoint(Provenance::default())
        .save(&pre)
        .unwrap();
    let (s, m) = load(&pre);
    assert_eq!(s, UchfrStatus::Stage);
    assert!(m.is_null());
    assert!(last_error().contains("stage") || last_error().contains("expected"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { uchfr_model_load(ptr::null(), &mut out) }, UchfrStatus::NullPointer);
    let mut d = 0usize;
    assert_eq!(unsafe { uchfr_model_input_dim(ptr::null(), &mut d) }, UchfrStatus::NullPointer);
    unsafe { uchfr_model_free(ptr::null_mut()) };
}

#[test]
fn model_without_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nocmd.bin");
    let mut net = hfr_net();
    net.cmd = None;
    net.params.remove_prefix("cmd.");
    net.to_checkpoint(Provenance::default()).save(&path).unwrap();
    let (s, m) = load(&path);
    assert_eq!(s, UchfrStatus::Ok, "{}", last_error());
    let e = [0.5; 4];
    let mut p = -1.0;
    assert_eq!(unsafe { uchfr_model_cmd_score(m, e.as_ptr(), e.as_ptr(), 4, &mut p) }, UchfrStatus::Undefined);
    assert_eq!(p, -1.0);
    unsafe { uchfr_model_free(m) };
}

#[test]
fn scoring_helpers() {
    assert_eq!(uchfr_fuse(0.8, 0.6), 0.7);
    assert_eq!(uchfr_embd_score(1.0), 1.0);
    assert_eq!(uchfr_embd_score(-1.0), 0.0);

    let scores = [0.9, 0.1, 0.2, 0.8, 0.5, 0.5];
    let (pc, gc) = ([1u32, 2, 2], [1u32, 2]);
    let mut r = 0.0;
    let s = unsafe { uchfr_rank1(scores.as_ptr(), 3, 2, pc.as_ptr(), gc.as_ptr(), &mut r) };
    assert_eq!(s, UchfrStatus::Ok);
    assert_eq!(r, rank1(&scores, &pc, &gc).unwrap());

    let genuine: Vec<u8> = (0..200).map(|i| u8::from(i % 10 == 0)).collect();
    let sc: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
    let mut t = 0.0;
    let s = unsafe { uchfr_tpr_at_far(sc.as_ptr(), genuine.as_ptr(), 200, 0.01, &mut t) };
    assert_eq!(s, UchfrStatus::Ok);
    let labels: Vec<bool> = genuine.iter().map(|&g| g != 0).collect();
    assert_eq!(Some(t), tpr_at_far(&roc(&sc, &labels).unwrap(), 0.01));
    let s = unsafe { uchfr_tpr_at_far(sc.as_ptr(), genuine.as_ptr(), 200, 0.001, &mut t) };
    assert_eq!(s, UchfrStatus::Undefined);
    let s = unsafe { uchfr_tpr_at_far(sc.as_ptr(), genuine.as_ptr(), 200, 0.0, &mut t) };
    assert_eq!(s, UchfrStatus::InvalidArgument);
    let s = unsafe { uchfr_rank1(ptr::null(), 3, 2, pc.as_ptr(), gc.as_ptr(), &mut r) };
    assert_eq!(s, UchfrStatus::NullPointer);

    let v = unsafe { CStr::from_ptr(uchfr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/uchfr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["uchfr_model_load", "uchfr_model_free", "uchfr_model_embed", "uchfr_tpr_at_far", "UCHFR_STATUS_PANIC = 7"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"uchfr.h\"\nint main(void) { UchfrModel *m = 0; double f = uchfr_fuse(0.5, 0.5);\n\
         return (int)uchfr_model_load(\"x\", &m) + (int)f; }\n",
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; header syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
