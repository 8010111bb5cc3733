//! C interface to `lipi-core`.
//!
//! Every function returns a [`LipiStatus`]; results come back through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`lipi_last_error`] until the next call on that thread. Strings handed
//! out by the library must be released with [`lipi_string_free`], topologies
//! with [`lipi_topology_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lipi_core::aggspec::AggregationSpec;
use lipi_core::harness::{execute, render_records, ExperimentConfig, OutputFormat, TopologySpec};
use lipi_core::lipi::{run_periodic, PeriodicPlan};
use lipi_core::modmath::mod_pow;
use lipi_core::stnet::{SimConfig, Topology};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LipiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// The run itself failed or did not complete.
    ProtocolError = 4,
    Panic = 5,
}

/// Opaque network handle.
pub struct LipiTopology {
    inner: Topology,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(LipiStatus, String);

impl Fail {
    fn arg(msg: impl ToString) -> Self {
        Fail(LipiStatus::InvalidArgument, msg.to_string())
    }

    fn protocol(msg: impl ToString) -> Self {
        Fail(LipiStatus::ProtocolError, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LipiStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LipiStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside lipi");
            LipiStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(Fail(LipiStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(LipiStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn non_null<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(LipiStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. Owned by the
/// library; do not free.
#[no_mangle]
pub extern "C" fn lipi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a topology from a spelling such as `ring:8` or `geometric:24:300`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lipi_topology_new(
    spec: *const c_char,
    seed: u64,
    out: *mut *mut LipiTopology,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec: TopologySpec = read_str(spec, "spec")?.parse().map_err(Fail::arg)?;
        let inner = spec.build(seed).map_err(Fail::arg)?;
        *out = Box::into_raw(Box::new(LipiTopology { inner }));
        Ok(())
    })
}

/// Parses the edge-list text format: the node count, then `u v [prob]` per line.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lipi_topology_parse(
    text: *const c_char,
    out: *mut *mut LipiTopology,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = Topology::parse(read_str(text, "text")?).map_err(Fail::arg)?;
        *out = Box::into_raw(Box::new(LipiTopology { inner }));
        Ok(())
    })
}

/// # Safety
/// `topo` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn lipi_topology_free(topo: *mut LipiTopology) {
    if !topo.is_null() {
        drop(Box::from_raw(topo));
    }
}

/// # Safety
/// `topo` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lipi_topology_node_count(
    topo: *const LipiTopology,
    out: *mut u32,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        let topo = topo
            .as_ref()
            .ok_or(Fail(LipiStatus::NullPointer, "topo is null".into()))?;
        *out = topo.inner.len();
        Ok(())
    })
}

/// Hop diameter; fails on a disconnected network.
///
/// # Safety
/// `topo` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lipi_topology_diameter(
    topo: *const LipiTopology,
    out: *mut u32,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        let topo = topo
            .as_ref()
            .ok_or(Fail(LipiStatus::NullPointer, "topo is null".into()))?;
        *out = topo
            .inner
            .diameter()
            .ok_or_else(|| Fail::arg("topology is disconnected"))?;
        Ok(())
    })
}

/// Key exchange plus one failure-free LiPI sum round. `secrets[i]` belongs
/// to node `i + 1`; `len` must equal the node count.
///
/// # Safety
/// `topo` must be a live handle, `secrets` must point to `len` values and
/// `out_total` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lipi_sum_round(
    topo: *const LipiTopology,
    secrets: *const u64,
    len: usize,
    seed: u64,
    out_total: *mut u64,
) -> LipiStatus {
    guard(|| {
        non_null(out_total, "out_total")?;
        let topo = &topo
            .as_ref()
            .ok_or(Fail(LipiStatus::NullPointer, "topo is null".into()))?
            .inner;
        if secrets.is_null() {
            return Err(Fail(LipiStatus::NullPointer, "secrets is null".into()));
        }
        if len != topo.len() as usize {
            return Err(Fail::arg(format!("{len} secrets for {} nodes", topo.len())));
        }
        let values = std::slice::from_raw_parts(secrets, len);
        let secrets = topo.nodes().zip(values.iter().copied()).collect();
        let sim = SimConfig::full_outreach(topo, seed);
        let spec = AggregationSpec::sum();
        let round = run_periodic(topo, &sim, &spec, &secrets, &PeriodicPlan::new(1))
            .map_err(Fail::protocol)?
            .remove(0);
        let total = round
            .result
            .agreed()
            .and_then(|a| a.exact())
            .ok_or_else(|| {
                Fail::protocol(format!("round ended as {}", round.result.status.label()))
            })?;
        *out_total = total;
        Ok(())
    })
}

/// Runs a JSON experiment config and returns the records as JSON lines.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
/// The returned string must be released with [`lipi_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lipi_run_json(
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg: ExperimentConfig =
            serde_json::from_str(read_str(config_json, "config_json")?).map_err(Fail::arg)?;
        let records = execute(&cfg).map_err(|e| {
            if e.is_usage() {
                Fail::arg(e)
            } else {
                Fail::protocol(e)
            }
        })?;
        let text = render_records(&records, OutputFormat::Json).map_err(Fail::protocol)?;
        *out = CString::new(text).map_err(Fail::protocol)?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn lipi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `base^exp mod modulus`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lipi_mod_pow(
    base: u64,
    exp: u64,
    modulus: u64,
    out: *mut u64,
) -> LipiStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = mod_pow(base, exp, modulus).map_err(Fail::arg)?;
        Ok(())
    })
}
