//! Python bindings: packet helpers, confidence profiles, the filter engine
//! and the synthetic trace generator.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cbf_core::confidence::{load_profile, save_profile, ConfidenceProfile, ProfileError, WindowPolicy};
use cbf_core::filter::{
    load_snapshot, save_snapshot, EngineConfig, FilterEngine as CoreEngine, FilterError, Period,
    ThresholdStrategy,
};
use cbf_core::generator::{generate_trace as core_generate, GenMode, GeneratorConfig};
use cbf_core::packet::{self, PacketError, RawPacket};
use cbf_core::schema::{AttrValue, AttributeSchema, AttributeVector};

create_exception!(cbf, CbfError, PyException);
create_exception!(cbf, PacketFormatError, CbfError);
create_exception!(cbf, ProfileStateError, CbfError);
create_exception!(cbf, ThresholdUnsetError, CbfError);

fn packet_err(e: PacketError) -> PyErr {
    PacketFormatError::new_err(e.to_string())
}

fn profile_err(e: ProfileError) -> PyErr {
    ProfileStateError::new_err(e.to_string())
}

fn filter_err(e: FilterError) -> PyErr {
    match e {
        FilterError::Packet(p) => packet_err(p),
        FilterError::Profile(p) => profile_err(p),
        FilterError::ThresholdUnset { .. } => ThresholdUnsetError::new_err(e.to_string()),
        other => CbfError::new_err(other.to_string()),
    }
}

fn to_py_value(v: AttrValue) -> Option<u32> {
    match v {
        AttrValue::None => None,
        AttrValue::Value(x) => Some(x),
    }
}

fn from_py_value(v: Option<u32>) -> AttrValue {
    v.map_or(AttrValue::None, AttrValue::Value)
}

fn attributes_of(schema: &AttributeSchema, data: &[u8]) -> PyResult<AttributeVector> {
    let parsed = packet::parse_ipv4(data).map_err(packet_err)?;
    Ok(schema.extract(&parsed.fields()))
}

/// Parses an IPv4 packet into a dict of header and transport fields.
#[pyfunction]
fn parse_ipv4<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let p = packet::parse_ipv4(data).map_err(packet_err)?;
    let f = p.fields();
    let d = PyDict::new(py);
    d.set_item("ihl", p.header.ihl)?;
    d.set_item("tos", f.tos)?;
    d.set_item("total_length", f.total_length)?;
    d.set_item("ttl", f.ttl)?;
    d.set_item("protocol", f.protocol)?;
    d.set_item("src_addr", f.src_addr.to_string())?;
    d.set_item("dst_addr", f.dst_addr.to_string())?;
    d.set_item("src_port", f.src_port)?;
    d.set_item("dst_port", f.dst_port)?;
    d.set_item("tcp_flags", f.tcp_flags)?;
    d.set_item("checksum_valid", p.checksum_valid)?;
    d.set_item("options", PyBytes::new(py, &data[20..p.header.header_len()]))?;
    Ok(d)
}

#[pyfunction]
fn internet_checksum(data: &[u8]) -> u16 {
    packet::internet_checksum(data)
}

/// The 4-octet confidence option for `conf` in [0, 1].
#[pyfunction]
fn encode_confidence_option<'py>(py: Python<'py>, conf: f64) -> PyResult<Bound<'py, PyBytes>> {
    let opt = packet::encode_confidence_option(conf).map_err(packet_err)?;
    Ok(PyBytes::new(py, &opt))
}

/// Scans an IPv4 options area for the confidence option.
#[pyfunction]
fn decode_confidence_option(options: &[u8]) -> PyResult<Option<f64>> {
    packet::decode_confidence_option(options).map_err(packet_err)
}

#[pyfunction]
fn rewrite_header_with_option<'py>(py: Python<'py>, data: &[u8], conf: f64) -> PyResult<Bound<'py, PyBytes>> {
    let out = packet::rewrite_header_with_option(&RawPacket::new(data.to_vec(), 0.0), conf)
        .map_err(packet_err)?;
    Ok(PyBytes::new(py, &out.bytes))
}

#[pyfunction]
fn strip_confidence_option<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let out = packet::strip_confidence_option(&RawPacket::new(data.to_vec(), 0.0)).map_err(packet_err)?;
    Ok(PyBytes::new(py, &out.bytes))
}

type TraceRow<'py> = (u64, f64, Bound<'py, PyBytes>, &'static str);

/// Synthetic labeled traffic as a list of `(index, ts, packet_bytes, label)`.
/// `mode` is `legit`, `attack-random` or `attack-mimic:k`.
#[pyfunction]
#[pyo3(signature = (mode, count, seed, rate = 1000.0))]
fn generate_trace<'py>(
    py: Python<'py>,
    mode: &str,
    count: u64,
    seed: u64,
    rate: f64,
) -> PyResult<Vec<TraceRow<'py>>> {
    let mode: GenMode = mode.parse().map_err(PyValueError::new_err)?;
    let mut config = GeneratorConfig::new(mode, count, seed);
    config.rate = rate;
    let records = core_generate(&config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    records
        .iter()
        .map(|r| {
            let raw = r.to_raw().map_err(packet_err)?;
            Ok((r.index, r.ts, PyBytes::new(py, &raw.bytes), r.label.as_str()))
        })
        .collect()
}

/// Attribute and pair frequencies learned from legitimate traffic, using
/// the default seven-attribute schema.
#[pyclass(name = "Profile", skip_from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: ConfidenceProfile,
}

#[pymethods]
impl PyProfile {
    #[new]
    #[pyo3(signature = (window_seconds = 60.0, window_packets = None, decay = 1.0))]
    fn new(window_seconds: f64, window_packets: Option<u64>, decay: f64) -> PyResult<Self> {
        let policy = match window_packets {
            Some(count) => WindowPolicy::Packets { count },
            None => WindowPolicy::Time { seconds: window_seconds },
        };
        let inner = ConfidenceProfile::new(AttributeSchema::default())
            .with_policy(policy)
            .and_then(|p| p.with_decay(decay))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// Counts one packet into the open window.
    #[pyo3(signature = (data, ts = None))]
    fn observe(&mut self, data: &[u8], ts: Option<f64>) -> PyResult<()> {
        let attrs = attributes_of(self.inner.schema(), data)?;
        self.inner.observe(&attrs, ts).map_err(profile_err)
    }

    /// Closes the open window into the cumulative counts.
    fn flush(&mut self) {
        self.inner.flush();
    }

    fn score(&self, data: &[u8]) -> PyResult<f64> {
        let attrs = attributes_of(self.inner.schema(), data)?;
        self.inner.score(&attrs).map_err(profile_err)
    }

    /// Discretized attribute values of a packet (None where absent).
    fn attributes(&self, data: &[u8]) -> PyResult<Vec<Option<u32>>> {
        let attrs = attributes_of(self.inner.schema(), data)?;
        Ok(attrs.values().iter().map(|v| to_py_value(*v)).collect())
    }

    fn conf_single(&self, attribute: usize, value: Option<u32>) -> PyResult<f64> {
        self.inner.conf_single(attribute, from_py_value(value)).map_err(profile_err)
    }

    fn conf_pair(&self, pair: usize, x: Option<u32>, y: Option<u32>) -> PyResult<f64> {
        self.inner
            .conf_pair(pair, (from_py_value(x), from_py_value(y)))
            .map_err(profile_err)
    }

    fn attribute_names(&self) -> Vec<String> {
        self.inner.schema().attributes().iter().map(|a| a.name.clone()).collect()
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        self.inner.schema().pairs().to_vec()
    }

    #[getter]
    fn n_total(&self) -> f64 {
        self.inner.n_total()
    }

    #[getter]
    fn windows_closed(&self) -> u64 {
        self.inner.windows_closed()
    }

    fn to_json(&self) -> String {
        save_profile(&self.inner)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        load_profile(text).map(|inner| Self { inner }).map_err(profile_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Profile(n_total={}, windows_closed={})",
            self.inner.n_total(),
            self.inner.windows_closed()
        )
    }
}

/// Period-driven filter: learns and tags in non-attack periods, discards
/// below the frozen threshold in attack periods.
#[pyclass(name = "FilterEngine")]
struct PyFilterEngine {
    inner: CoreEngine,
}

fn engine_config(strategy: &str, np_reset_on_nonattack: bool, strict_checksum: bool) -> PyResult<EngineConfig> {
    let strategy: ThresholdStrategy = strategy.parse().map_err(PyValueError::new_err)?;
    Ok(EngineConfig {
        strategy,
        np_reset_on_nonattack,
        strict_checksum,
    })
}

#[pymethods]
impl PyFilterEngine {
    #[new]
    #[pyo3(signature = (profile = None, strategy = "min", np_reset_on_nonattack = false, strict_checksum = false))]
    fn new(
        profile: Option<PyRef<'_, PyProfile>>,
        strategy: &str,
        np_reset_on_nonattack: bool,
        strict_checksum: bool,
    ) -> PyResult<Self> {
        let profile = match profile {
            Some(p) => p.inner.clone(),
            None => ConfidenceProfile::new(AttributeSchema::default()),
        };
        let config = engine_config(strategy, np_reset_on_nonattack, strict_checksum)?;
        Ok(Self {
            inner: CoreEngine::new(profile, config),
        })
    }

    /// Restores an engine from a `snapshot()` string (or a plain profile).
    #[staticmethod]
    #[pyo3(signature = (text, strategy = "min", np_reset_on_nonattack = false, strict_checksum = false))]
    fn from_snapshot(text: &str, strategy: &str, np_reset_on_nonattack: bool, strict_checksum: bool) -> PyResult<Self> {
        let (profile, nominal) = load_snapshot(text).map_err(profile_err)?;
        let config = engine_config(strategy, np_reset_on_nonattack, strict_checksum)?;
        Ok(Self {
            inner: CoreEngine::with_nominal(profile, nominal.unwrap_or_default(), config),
        })
    }

    fn snapshot(&self) -> String {
        save_snapshot(self.inner.profile(), Some(self.inner.nominal()))
    }

    /// Declares `"attack"` or `"nonattack"` starting at `ts`.
    #[pyo3(signature = (period, ts = 0.0))]
    fn set_period(&mut self, period: &str, ts: f64) -> PyResult<()> {
        let kind: Period = period.parse().map_err(PyValueError::new_err)?;
        self.inner.set_period(kind, ts);
        Ok(())
    }

    #[getter]
    fn period(&self) -> &'static str {
        self.inner.period().kind.as_str()
    }

    /// Current nominal profile (running minimum score), if any.
    #[getter]
    fn np(&self) -> Option<f64> {
        self.inner.nominal().np
    }

    /// The frozen discarding threshold during an attack period.
    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.inner.threshold()
    }

    #[getter]
    fn profile(&self) -> PyProfile {
        PyProfile {
            inner: self.inner.profile().clone(),
        }
    }

    /// Filters one packet. Returns `(verdict, score, forwarded)` where
    /// `forwarded` is the (possibly tagged) packet, or None if discarded.
    #[pyo3(signature = (data, ts = 0.0))]
    fn process<'py>(
        &mut self,
        py: Python<'py>,
        data: &[u8],
        ts: f64,
    ) -> PyResult<(&'static str, f64, Option<Bound<'py, PyBytes>>)> {
        let (d, out) = self
            .inner
            .process_packet(&RawPacket::new(data.to_vec(), ts))
            .map_err(filter_err)?;
        Ok((d.verdict.as_str(), d.score, out.map(|p| PyBytes::new(py, &p.bytes))))
    }

    /// Offline training on `(packet_bytes, ts)` pairs known to be
    /// legitimate. Returns the resulting NP.
    fn train(&mut self, packets: Vec<(Vec<u8>, f64)>) -> PyResult<Option<f64>> {
        let mut items = Vec::with_capacity(packets.len());
        for (bytes, ts) in &packets {
            let attrs = self
                .inner
                .attributes(&RawPacket::new(bytes.clone(), *ts))
                .map_err(packet_err)?;
            items.push((attrs, *ts));
        }
        let summary = self.inner.train(&items).map_err(filter_err)?;
        Ok(summary.np)
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

#[pymodule]
fn cbf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("CbfError", py.get_type::<CbfError>())?;
    m.add("PacketFormatError", py.get_type::<PacketFormatError>())?;
    m.add("ProfileStateError", py.get_type::<ProfileStateError>())?;
    m.add("ThresholdUnsetError", py.get_type::<ThresholdUnsetError>())?;
    m.add_function(wrap_pyfunction!(parse_ipv4, m)?)?;
    m.add_function(wrap_pyfunction!(internet_checksum, m)?)?;
    m.add_function(wrap_pyfunction!(encode_confidence_option, m)?)?;
    m.add_function(wrap_pyfunction!(decode_confidence_option, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_header_with_option, m)?)?;
    m.add_function(wrap_pyfunction!(strip_confidence_option, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_class::<PyProfile>()?;
    m.add_class::<PyFilterEngine>()?;
    Ok(())
}
