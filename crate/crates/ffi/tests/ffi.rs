//! The C ABI against the Rust library it wraps.

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lafs::config::KvConfig;
use lafs::eval::{kfold_accuracy, tar_at_far, ScoreSet};
use lafs::finetune::{CosFaceHead, FaceModel};
use lafs::geometry::Image;
use lafs::localizer::Localizer;
use lafs::pipeline::{model_checkpoint, BenchConfig};
use lafs::rng::CounterRng;
use lafs::vit::Vit;
use lafs_ffi::*;

const CONFIG: &str = "preset=small\ndepth=1\n";

fn bench() -> BenchConfig {
    let mut b = BenchConfig::default();
    b.apply(&KvConfig::parse(CONFIG).unwrap()).unwrap();
    b
}

fn saved_model(dir: &Path) -> (PathBuf, FaceModel) {
    let b = bench();
    let model = FaceModel {
        localizer: Some(Localizer::new(b.localizer_config(), 1).unwrap()),
        vit: Vit::new(b.vit_config(), 2).unwrap(),
        head: CosFaceHead::new(5, b.dim, b.cosface_scale, b.cosface_margin, 3).unwrap(),
    };
    let path = dir.join("model.ckpt");
    model_checkpoint(model.localizer.as_ref(), &model.vit, Some(&model.head), &[]).save(&path).unwrap();
    (path, model)
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        lafs_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn load(path: &Path, config: Option<&str>) -> (LafsStatus, *mut LafsModel) {
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let c = config.map(|c| CString::new(c).unwrap());
    let mut out = ptr::null_mut();
    let s = unsafe { lafs_model_load(p.as_ptr(), c.as_ref().map_or(ptr::null(), |c| c.as_ptr()), &mut out) };
    (s, out)
}

#[test]
fn embeddings_match_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let (s, handle) = load(&path, Some(CONFIG));
    assert_eq!(s, LafsStatus::Ok, "{}", last_error());
    let (mut dim, mut size) = (0usize, 0usize);
    unsafe {
        assert_eq!(lafs_model_embedding_dim(handle, &mut dim), LafsStatus::Ok);
        assert_eq!(lafs_model_input_size(handle, &mut size), LafsStatus::Ok);
    }
    assert_eq!((dim, size), (bench().dim, bench().canvas));
    let mut rng = CounterRng::new(4);
    let pixels: Vec<f32> = (0..3 * size * size).map(|_| rng.uniform() as f32).collect();
    let mut out = vec![0f32; 3 * dim];
    let s = unsafe { lafs_model_embed(handle, pixels.as_ptr(), 3, size, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, LafsStatus::Ok, "{}", last_error());
    let imgs: Vec<Image> = pixels.chunks(size * size).map(|c| Image::new(1, size, size, c.to_vec()).unwrap()).collect();
    let want = model.embed(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out), bits(want.data()));

    let s = unsafe { lafs_model_embed(handle, pixels.as_ptr(), 3, size, out.as_mut_ptr(), dim) };
    assert_eq!(s, LafsStatus::BufferTooSmall);
    let s = unsafe { lafs_model_embed(handle, pixels.as_ptr(), 1, size + 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, LafsStatus::Dimension);
    assert!(last_error().contains("expects"));
    unsafe { lafs_model_free(handle) };
}

#[test]
fn load_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    assert_eq!(load(&dir.path().join("absent.ckpt"), None).0, LafsStatus::Io);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    assert_eq!(load(&bad, None).0, LafsStatus::CheckpointBadMagic);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(load(&bad, Some(CONFIG)).0, LafsStatus::CheckpointTruncated);
    // Default architecture does not match the saved shapes.
    let (s, h) = load(&path, None);
    assert!(matches!(s, LafsStatus::CheckpointCorrupt | LafsStatus::CheckpointMissingEntry), "{s:?}");
    assert!(h.is_null());
    assert_eq!(load(&path, Some("no_such_key=1")).0, LafsStatus::InvalidArgument);
    assert!(last_error().contains("no_such_key"));
    let s = unsafe { lafs_model_load(ptr::null(), ptr::null(), &mut ptr::null_mut()) };
    assert_eq!(s, LafsStatus::NullPointer);
    unsafe { lafs_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_the_library() {
    let mut rng = CounterRng::new(8);
    let genuine: Vec<f32> = (0..40).map(|_| rng.normal() as f32 + 1.0).collect();
    let impostor: Vec<f32> = (0..60).map(|_| rng.normal() as f32).collect();
    let (mut tar, mut thr) = (0.0, 0.0f32);
    let s = unsafe { lafs_tar_at_far(genuine.as_ptr(), 40, impostor.as_ptr(), 60, 0.1, &mut tar, &mut thr) };
    assert_eq!(s, LafsStatus::Ok);
    let want = tar_at_far(&ScoreSet { genuine: genuine.clone(), impostor: impostor.clone() }, 0.1).unwrap();
    assert_eq!((tar, thr.to_bits()), (want.tar, want.threshold.to_bits()));

    let records: Vec<(f32, bool)> = genuine.iter().map(|&g| (g, true)).chain(impostor.iter().map(|&i| (i, false))).collect();
    let scores: Vec<f32> = records.iter().map(|r| r.0).collect();
    let flags: Vec<u8> = records.iter().map(|r| r.1 as u8).collect();
    let (mut mean, mut std) = (0.0, 0.0);
    let s = unsafe { lafs_kfold_accuracy(scores.as_ptr(), flags.as_ptr(), 100, 10, &mut mean, &mut std) };
    assert_eq!(s, LafsStatus::Ok);
    let k = kfold_accuracy(&records, 10).unwrap();
    assert_eq!((mean, std), (k.mean, k.std));

    let s = unsafe { lafs_tar_at_far(genuine.as_ptr(), 40, impostor.as_ptr(), 60, 1.5, &mut tar, ptr::null_mut()) };
    assert_eq!(s, LafsStatus::InvalidArgument);
    let mut c = 0.0f32;
    let a = [1.0f32, 0.0];
    let b = [0.0f32, 2.0];
    assert_eq!(unsafe { lafs_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, &mut c) }, LafsStatus::Ok);
    assert_eq!(c, 0.0);
    assert_eq!(unsafe { CStr::from_ptr(lafs_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn c_program_links_against_the_header_and_static_library() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    // Test builds do not reliably emit the staticlib, so build it into a
    // separate target dir; the outer cargo holds the lock on the main one.
    let exe = std::env::current_exe().unwrap();
    let target = exe.ancestors().nth(3).unwrap().join("ffi-smoke");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let st = Command::new(cargo)
        .args(["build", "--quiet", "--lib", "--manifest-path"])
        .arg(crate_dir.join("Cargo.toml"))
        .arg("--target-dir")
        .arg(&target)
        .status()
        .expect("cargo runs");
    assert!(st.success());
    let lib = target.join("debug/liblafs_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let st = Command::new(cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is installed");
    assert!(st.success());
    let (path, _) = saved_model(dir.path());
    let out = Command::new(&bin).arg(&path).arg(CONFIG).output().unwrap();
    assert!(out.status.success(), "{} {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains(&format!("dim {}", bench().dim)), "{stdout}");
}
