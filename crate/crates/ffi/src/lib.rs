//! C ABI for the innet core library.
//!
//! Every fallible function returns an [`InnetStatus`]; on failure a message
//! is kept per thread and can be fetched with [`innet_last_error`]. Objects
//! are opaque handles created by `*_new` and released by `*_free`.

use innet_core::config::RunConfig;
use innet_core::quant::{self, QuantConfig};
use innet_core::run;
use innet_core::switch::{Port, Switch, SwitchConfig};
use innet_core::wire::{Packet, PacketKind, Payload, ELEMS_PER_PACKET};
use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Wire = 4,
    Switch = 5,
    Config = 6,
    Run = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: InnetStatus, msg: impl Into<String>) -> InnetStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into [`InnetStatus::Panic`].
fn guard(f: impl FnOnce() -> InnetStatus) -> InnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(InnetStatus::Panic, "internal panic"))
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn innet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn innet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Elements carried by one data packet.
#[no_mangle]
pub extern "C" fn innet_elems_per_packet() -> usize {
    ELEMS_PER_PACKET
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Option<&'a [T]> {
    if n == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, n))
    }
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize) -> Option<&'a mut [T]> {
    if n == 0 {
        Some(&mut [])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(p, n))
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, InnetStatus> {
    if p.is_null() {
        return Err(fail(InnetStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(InnetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn quant_config(frac_bits: u32, workers: u32) -> Result<QuantConfig, InnetStatus> {
    QuantConfig::new(frac_bits, workers).map_err(|e| fail(InnetStatus::InvalidArgument, e.to_string()))
}

/// Converts `n` floats to fixed point. `clamped` may be NULL.
///
/// # Safety
/// `input` and `output` must point to `n` valid elements.
#[no_mangle]
pub unsafe extern "C" fn innet_to_fixed(
    input: *const f32,
    n: usize,
    frac_bits: u32,
    workers: u32,
    output: *mut i32,
    clamped: *mut usize,
) -> InnetStatus {
    guard(|| {
        let q = match quant_config(frac_bits, workers) {
            Ok(q) => q,
            Err(s) => return s,
        };
        let (Some(src), Some(dst)) = (slice(input, n), slice_mut(output, n)) else {
            return fail(InnetStatus::NullPointer, "input or output is NULL");
        };
        let mut v = Vec::with_capacity(n);
        let c = quant::to_fixed_into(src, &q, &mut v);
        dst.copy_from_slice(&v);
        if !clamped.is_null() {
            *clamped = c;
        }
        InnetStatus::Ok
    })
}

/// Converts `n` fixed-point integers back to floats.
///
/// # Safety
/// `input` and `output` must point to `n` valid elements.
#[no_mangle]
pub unsafe extern "C" fn innet_from_fixed(input: *const i32, n: usize, frac_bits: u32, output: *mut f32) -> InnetStatus {
    guard(|| {
        let q = match quant_config(frac_bits, 1) {
            Ok(q) => q,
            Err(s) => return s,
        };
        let (Some(src), Some(dst)) = (slice(input, n), slice_mut(output, n)) else {
            return fail(InnetStatus::NullPointer, "input or output is NULL");
        };
        dst.copy_from_slice(&quant::from_fixed(src, &q));
        InnetStatus::Ok
    })
}

/// Decoded packet header. For data kinds `ack` and `credit` are zero; for
/// heartbeat kinds `len` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InnetPacketInfo {
    /// 0 param data, 1 gradient data, 2 param heartbeat, 3 gradient heartbeat.
    pub kind: u8,
    pub worker_id: u8,
    pub seq_num: u32,
    pub len: usize,
    pub ack: u32,
    pub credit: u32,
}

fn packet_from_info(info: &InnetPacketInfo, values: &[i32]) -> Result<Packet, InnetStatus> {
    let kind = PacketKind::from_u8(info.kind)
        .ok_or_else(|| fail(InnetStatus::InvalidArgument, format!("unknown packet kind {}", info.kind)))?;
    Ok(if kind.is_data() {
        Packet::data(kind, info.worker_id, info.seq_num, values.to_vec())
    } else {
        Packet::heartbeat(kind, info.worker_id, info.ack, info.credit)
    })
}

fn info_of(p: &Packet) -> InnetPacketInfo {
    let hb = p.heartbeat_payload().unwrap_or_default();
    InnetPacketInfo { kind: p.kind as u8, worker_id: p.worker_id, seq_num: p.seq_num, len: p.elems(), ack: hb.ack, credit: hb.credit }
}

/// Serializes a packet. `values` holds `info.len` elements for data kinds.
/// `written` receives the encoded length; with a short buffer it receives
/// the required size and [`InnetStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `info` and `written` must be valid; `values` must hold `info.len`
/// elements and `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn innet_packet_encode(
    info: *const InnetPacketInfo,
    values: *const i32,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> InnetStatus {
    guard(|| {
        if info.is_null() || written.is_null() {
            return fail(InnetStatus::NullPointer, "info or written is NULL");
        }
        let info = &*info;
        let n = if PacketKind::from_u8(info.kind).is_some_and(PacketKind::is_data) { info.len } else { 0 };
        let Some(vals) = slice(values, n) else { return fail(InnetStatus::NullPointer, "values is NULL") };
        let pkt = match packet_from_info(info, vals) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match pkt.encode() {
            Ok(b) => b,
            Err(e) => return fail(InnetStatus::Wire, e.to_string()),
        };
        *written = bytes.len();
        if bytes.len() > cap {
            return fail(InnetStatus::BufferTooSmall, format!("need {} bytes, have {cap}", bytes.len()));
        }
        let Some(dst) = slice_mut(out, bytes.len()) else { return fail(InnetStatus::NullPointer, "out is NULL") };
        dst.copy_from_slice(&bytes);
        InnetStatus::Ok
    })
}

/// Parses a packet. Data values are copied into `values` (capacity `cap`
/// elements); `info.len` tells how many there are.
///
/// # Safety
/// `bytes` must hold `len` bytes, `info` must be valid and `values` must
/// hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn innet_packet_decode(
    bytes: *const u8,
    len: usize,
    info: *mut InnetPacketInfo,
    values: *mut i32,
    cap: usize,
) -> InnetStatus {
    guard(|| {
        let (Some(src), false) = (slice(bytes, len), info.is_null()) else {
            return fail(InnetStatus::NullPointer, "bytes or info is NULL");
        };
        let pkt = match Packet::decode(src) {
            Ok(p) => p,
            Err(e) => return fail(InnetStatus::Wire, e.to_string()),
        };
        *info = info_of(&pkt);
        if let Payload::Data(v) = &pkt.payload {
            if v.len() > cap {
                return fail(InnetStatus::BufferTooSmall, format!("need {} values, have {cap}", v.len()));
            }
            let Some(dst) = slice_mut(values, v.len()) else { return fail(InnetStatus::NullPointer, "values is NULL") };
            dst.copy_from_slice(v);
        }
        InnetStatus::Ok
    })
}

/// Opaque aggregation switch.
pub struct InnetSwitch {
    inner: Switch,
}

/// Receives each packet the switch emits. `port` is the destination worker
/// id, or -1 for the optimizer. The bytes are only valid during the call.
pub type InnetEmitFn = Option<unsafe extern "C" fn(ctx: *mut c_void, port: i32, bytes: *const u8, len: usize)>;

/// # Safety
/// `out` must be a valid pointer; the handle is released with
/// [`innet_switch_free`].
#[no_mangle]
pub unsafe extern "C" fn innet_switch_new(workers: u32, window: u32, leader: u32, out: *mut *mut InnetSwitch) -> InnetStatus {
    guard(|| {
        if out.is_null() {
            return fail(InnetStatus::NullPointer, "out is NULL");
        }
        match SwitchConfig::new(workers, window, leader) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(InnetSwitch { inner: Switch::new(cfg) }));
                InnetStatus::Ok
            }
            Err(e) => fail(InnetStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `sw` must come from [`innet_switch_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn innet_switch_free(sw: *mut InnetSwitch) {
    if !sw.is_null() {
        drop(Box::from_raw(sw));
    }
}

/// Feeds one encoded packet to the switch and reports every packet it emits
/// through `emit`.
///
/// # Safety
/// `sw` must be a live handle and `bytes` must hold `len` bytes. `emit` is
/// called synchronously with `ctx`.
#[no_mangle]
pub unsafe extern "C" fn innet_switch_handle(
    sw: *mut InnetSwitch,
    bytes: *const u8,
    len: usize,
    emit: InnetEmitFn,
    ctx: *mut c_void,
) -> InnetStatus {
    guard(|| {
        let (Some(sw), Some(src)) = (sw.as_mut(), slice(bytes, len)) else {
            return fail(InnetStatus::NullPointer, "switch or bytes is NULL");
        };
        let pkt = match Packet::decode(src) {
            Ok(p) => p,
            Err(e) => return fail(InnetStatus::Wire, e.to_string()),
        };
        let out = match sw.inner.handle(pkt) {
            Ok(o) => o,
            Err(e) => return fail(InnetStatus::Switch, e.to_string()),
        };
        for (port, p) in out {
            let bytes = match p.encode() {
                Ok(b) => b,
                Err(e) => return fail(InnetStatus::Wire, e.to_string()),
            };
            let port = match port {
                Port::Worker(i) => i as i32,
                Port::Optimizer => -1,
            };
            if let Some(f) = emit {
                f(ctx, port, bytes.as_ptr(), bytes.len());
            }
        }
        InnetStatus::Ok
    })
}

/// Counters of a switch, in the order aggregates emitted, shadow
/// re-emissions, duplicates absorbed.
///
/// # Safety
/// `sw` must be a live handle and `out` must hold three elements.
#[no_mangle]
pub unsafe extern "C" fn innet_switch_counters(sw: *const InnetSwitch, out: *mut u64) -> InnetStatus {
    guard(|| {
        let (Some(sw), Some(dst)) = (sw.as_ref(), slice_mut(out, 3)) else {
            return fail(InnetStatus::NullPointer, "switch or out is NULL");
        };
        let m = sw.inner.metrics();
        dst.copy_from_slice(&[m.aggregates_emitted, m.shadow_reemissions, m.duplicates_absorbed]);
        InnetStatus::Ok
    })
}

/// Opaque run configuration.
pub struct InnetConfig {
    inner: RunConfig,
}

/// A configuration with default values.
#[no_mangle]
pub extern "C" fn innet_config_new() -> *mut InnetConfig {
    Box::into_raw(Box::new(InnetConfig { inner: RunConfig::default() }))
}

/// # Safety
/// `cfg` must come from [`innet_config_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn innet_config_free(cfg: *mut InnetConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one `key = value` entry.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn innet_config_set(cfg: *mut InnetConfig, key: *const c_char, value: *const c_char) -> InnetStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else { return fail(InnetStatus::NullPointer, "config is NULL") };
        let (k, v) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.inner.set(k, v) {
            Ok(()) => InnetStatus::Ok,
            Err(e) => fail(InnetStatus::Config, e.to_string()),
        }
    })
}

/// Trains on the simulated fabric, writing results under `out_dir`.
/// `final_loss` may be NULL.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn innet_train_sim(cfg: *const InnetConfig, out_dir: *const c_char, final_loss: *mut f64) -> InnetStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else { return fail(InnetStatus::NullPointer, "config is NULL") };
        let dir = match str_arg(out_dir, "out_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match run::train_sim(&cfg.inner, Path::new(dir)) {
            Ok(r) => {
                if !final_loss.is_null() {
                    *final_loss = r.records.last().map_or(f64::NAN, |x| x.loss);
                }
                InnetStatus::Ok
            }
            Err(e) => fail(InnetStatus::Run, e.to_string()),
        }
    })
}

/// Runs the single-process reference, writing results under `out_dir`.
///
/// # Safety
/// As for [`innet_train_sim`].
#[no_mangle]
pub unsafe extern "C" fn innet_oracle(cfg: *const InnetConfig, out_dir: *const c_char, final_loss: *mut f64) -> InnetStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else { return fail(InnetStatus::NullPointer, "config is NULL") };
        let dir = match str_arg(out_dir, "out_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match run::oracle(&cfg.inner, Path::new(dir)) {
            Ok(r) => {
                if !final_loss.is_null() {
                    *final_loss = r.losses.last().copied().unwrap_or(f64::NAN);
                }
                InnetStatus::Ok
            }
            Err(e) => fail(InnetStatus::Run, e.to_string()),
        }
    })
}
