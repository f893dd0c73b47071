use innet_core::quant::{self, QuantConfig};
use innet_core::wire::{Packet, PacketKind, Payload};
use innet_ffi::*;
use proptest::prelude::*;
use std::ffi::{c_void, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = innet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

proptest! {
    #[test]
    fn fixed_point_matches_the_core(v in prop::collection::vec(-100.0f32..100.0, 0..64), bits in 8u32..24, n in 1u32..9) {
        let q = QuantConfig::new(bits, n).unwrap();
        let (want, want_clamped) = quant::to_fixed(&v, &q);
        let mut got = vec![0i32; v.len()];
        let mut clamped = usize::MAX;
        let s = unsafe { innet_to_fixed(v.as_ptr(), v.len(), bits, n, got.as_mut_ptr(), &mut clamped) };
        prop_assert_eq!(s, InnetStatus::Ok);
        prop_assert_eq!(&got, &want);
        prop_assert_eq!(clamped, want_clamped);
        let mut back = vec![0f32; v.len()];
        let s = unsafe { innet_from_fixed(got.as_ptr(), got.len(), bits, back.as_mut_ptr()) };
        prop_assert_eq!(s, InnetStatus::Ok);
        prop_assert_eq!(back, quant::from_fixed(&want, &QuantConfig::new(bits, 1).unwrap()));
    }

    #[test]
    fn encoded_packets_decode_in_the_core(worker in 0u8..8, seq in any::<u32>(), v in prop::collection::vec(any::<i32>(), 1..64)) {
        let info = InnetPacketInfo { kind: 1, worker_id: worker, seq_num: seq, len: v.len(), ack: 0, credit: 0 };
        let mut buf = vec![0u8; 512];
        let mut n = 0;
        let s = unsafe { innet_packet_encode(&info, v.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut n) };
        prop_assert_eq!(s, InnetStatus::Ok);
        prop_assert_eq!(Packet::decode(&buf[..n]).unwrap(), Packet::data(PacketKind::GradData, worker, seq, v.clone()));
        let mut out = InnetPacketInfo::default();
        let mut vals = vec![0i32; v.len()];
        let s = unsafe { innet_packet_decode(buf.as_ptr(), n, &mut out, vals.as_mut_ptr(), vals.len()) };
        prop_assert_eq!(s, InnetStatus::Ok);
        prop_assert_eq!(out, info);
        prop_assert_eq!(vals, v);
    }
}

#[test]
fn heartbeat_round_trip_and_short_buffers() {
    let info = InnetPacketInfo { kind: 3, worker_id: 2, seq_num: 0, len: 0, ack: 300, credit: 363 };
    let mut n = 0;
    let mut small = [0u8; 4];
    let s = unsafe { innet_packet_encode(&info, ptr::null(), small.as_mut_ptr(), small.len(), &mut n) };
    assert_eq!(s, InnetStatus::BufferTooSmall);
    assert_eq!(n, 18);
    assert!(last_error().contains("18"));
    let mut buf = [0u8; 18];
    let s = unsafe { innet_packet_encode(&info, ptr::null(), buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(s, InnetStatus::Ok);
    let mut out = InnetPacketInfo::default();
    let s = unsafe { innet_packet_decode(buf.as_ptr(), n, &mut out, ptr::null_mut(), 0) };
    assert_eq!((s, out), (InnetStatus::Ok, info));
    assert!(innet_last_error().is_null(), "success clears the error");
}

#[test]
fn invalid_arguments_report_errors() {
    let mut out = 0i32;
    let s = unsafe { innet_to_fixed(ptr::null(), 1, 20, 1, &mut out, ptr::null_mut()) };
    assert_eq!(s, InnetStatus::NullPointer);
    let x = 1.0f32;
    let s = unsafe { innet_to_fixed(&x, 1, 40, 1, &mut out, ptr::null_mut()) };
    assert_eq!(s, InnetStatus::InvalidArgument);
    let info = InnetPacketInfo { kind: 9, ..Default::default() };
    let mut n = 0;
    let s = unsafe { innet_packet_encode(&info, ptr::null(), ptr::null_mut(), 0, &mut n) };
    assert_eq!(s, InnetStatus::InvalidArgument);
    assert!(last_error().contains("kind"));
    let mut sw = ptr::null_mut();
    assert_eq!(unsafe { innet_switch_new(0, 16, 0, &mut sw) }, InnetStatus::InvalidArgument);
    assert!(sw.is_null());
    unsafe { innet_switch_free(ptr::null_mut()) };
    unsafe { innet_config_free(ptr::null_mut()) };
}

unsafe extern "C" fn collect(ctx: *mut c_void, port: i32, bytes: *const u8, len: usize) {
    let out = &mut *(ctx as *mut Vec<(i32, Packet)>);
    out.push((port, Packet::decode(std::slice::from_raw_parts(bytes, len)).unwrap()));
}

#[test]
fn switch_handle_aggregates_gradients() {
    let mut sw = ptr::null_mut();
    assert_eq!(unsafe { innet_switch_new(3, 8, 1, &mut sw) }, InnetStatus::Ok);
    let mut emitted: Vec<(i32, Packet)> = Vec::new();
    for w in 0..3u8 {
        let bytes = Packet::data(PacketKind::GradData, w, 0, vec![w as i32 + 1, -(w as i32)]).encode().unwrap();
        let ctx = &mut emitted as *mut _ as *mut c_void;
        assert_eq!(unsafe { innet_switch_handle(sw, bytes.as_ptr(), bytes.len(), Some(collect), ctx) }, InnetStatus::Ok);
    }
    assert_eq!(emitted.len(), 1);
    assert_eq!(emitted[0].0, -1);
    assert_eq!(emitted[0].1.payload, Payload::Data(vec![6, -3]));
    let mut c = [0u64; 3];
    assert_eq!(unsafe { innet_switch_counters(sw, c.as_mut_ptr()) }, InnetStatus::Ok);
    assert_eq!(c, [1, 0, 0]);
    let bad = [0u8; 5];
    assert_eq!(unsafe { innet_switch_handle(sw, bad.as_ptr(), bad.len(), None, ptr::null_mut()) }, InnetStatus::Wire);
    unsafe { innet_switch_free(sw) };
}

fn run_both(cfg: *const InnetConfig, dir: &Path) -> (f64, f64) {
    let (mut a, mut b) = (0.0, 0.0);
    let t = CString::new(dir.join("train").to_str().unwrap()).unwrap();
    let o = CString::new(dir.join("ref").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { innet_train_sim(cfg, t.as_ptr(), &mut a) }, InnetStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { innet_oracle(cfg, o.as_ptr(), &mut b) }, InnetStatus::Ok, "{}", last_error());
    (a, b)
}

#[test]
fn configured_runs_agree_with_the_reference() {
    let cfg = innet_config_new();
    for (k, v) in [("run.workers", "3"), ("run.rounds", "3"), ("model.layers", "2"), ("model.hidden", "6")] {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        assert_eq!(unsafe { innet_config_set(cfg, k.as_ptr(), v.as_ptr()) }, InnetStatus::Ok);
    }
    let k = CString::new("run.workers").unwrap();
    let v = CString::new("many").unwrap();
    assert_eq!(unsafe { innet_config_set(cfg, k.as_ptr(), v.as_ptr()) }, InnetStatus::Config);
    assert!(last_error().contains("run.workers"));
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = run_both(cfg, dir.path());
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
    let bad = CString::new("0").unwrap();
    unsafe { innet_config_set(cfg, k.as_ptr(), bad.as_ptr()) };
    let out = CString::new(dir.path().join("x").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { innet_train_sim(cfg, out.as_ptr(), ptr::null_mut()) }, InnetStatus::Run);
    unsafe { innet_config_free(cfg) };
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libinnet_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("roundtrip");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/roundtrip.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
