//! Binary field container: a little-endian length-prefixed JSON header
//! followed by a contiguous little-endian 32-bit float payload.
//!
//! Layout, byte by byte:
//!   1. `u64` little-endian: byte length of the header text (including
//!      its terminating newline).
//!   2. UTF-8 JSON header, newline-terminated.
//!   3. Payload: `f32` little-endian values in
//!      member → init time → lead time → channel → latitude row →
//!      longitude column order (row-major, north to south).
//!
//! The full layout with a hex-annotated example lives in docs/format.md.

use crate::error::{Error, Result};
use crate::fields::{ChannelMeta, FieldSet};
use crate::grid::LatLonGrid;
use crate::metrics::{BatchMeta, EnsembleBatch, TargetBatch};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Container schema version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Upper bound on the header text, to fail fast on corrupt prefixes.
const MAX_HEADER_BYTES: u64 = 64 * 1024 * 1024;

/// Self-describing metadata stored ahead of the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub schema_version: u32,
    /// Payload element type; only "f32" is defined.
    pub dtype: String,
    /// Payload byte order; only "little" is defined.
    pub byte_order: String,
    /// Latitude row centers, degrees, strictly decreasing.
    pub latitudes: Vec<f64>,
    /// Longitude column centers, degrees, uniform.
    pub longitudes: Vec<f64>,
    /// Channel identities (variable short name + optional level).
    pub channels: Vec<ChannelMeta>,
    /// Forecast initialization timestamps (ISO-8601 text).
    pub init_times: Vec<String>,
    /// Lead times in hours, one payload block per entry.
    pub lead_times_h: Vec<i64>,
    /// Ensemble size.
    pub n_members: usize,
}

impl ContainerHeader {
    /// Header for an ensemble over a grid at the given times.
    pub fn new(
        grid: &LatLonGrid,
        channels: Vec<ChannelMeta>,
        init_times: Vec<String>,
        lead_times_h: Vec<i64>,
        n_members: usize,
    ) -> Self {
        ContainerHeader {
            schema_version: SCHEMA_VERSION,
            dtype: "f32".to_string(),
            byte_order: "little".to_string(),
            latitudes: grid.latitudes().to_vec(),
            longitudes: grid.longitudes().to_vec(),
            channels,
            init_times,
            lead_times_h,
            n_members,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::format(format!(
                "unsupported schema version {}, this build reads {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.dtype != "f32" {
            return Err(Error::format(format!(
                "unsupported dtype {:?}, only \"f32\" is defined",
                self.dtype
            )));
        }
        if self.byte_order != "little" {
            return Err(Error::format(format!(
                "unsupported byte order {:?}, only \"little\" is defined",
                self.byte_order
            )));
        }
        if self.channels.is_empty()
            || self.init_times.is_empty()
            || self.lead_times_h.is_empty()
            || self.n_members == 0
        {
            return Err(Error::format(
                "container needs at least one channel, init time, lead time and member",
            ));
        }
        self.grid()?;
        Ok(())
    }

    /// Grid described by the header axes.
    pub fn grid(&self) -> Result<LatLonGrid> {
        LatLonGrid::from_axes(self.latitudes.clone(), self.longitudes.clone())
    }

    /// Number of payload values.
    pub fn n_values(&self) -> usize {
        self.n_members
            * self.init_times.len()
            * self.lead_times_h.len()
            * self.channels.len()
            * self.latitudes.len()
            * self.longitudes.len()
    }
}

/// NaN handling applied while reading, keyed by variable short name:
/// NaN cells of listed variables are replaced by the fill value and the
/// affected cells retained as a mask. NaNs in unlisted variables are
/// left in place (conversions to batches reject them).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadOptions {
    pub nan_fill: BTreeMap<String, f64>,
}

/// A loaded container: header, payload, and per-channel NaN masks for
/// the variables a fill was configured for.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    /// Payload in header order.
    pub data: Vec<f32>,
    /// For each filled channel index: true where any slab had NaN.
    pub nan_masks: BTreeMap<usize, Vec<bool>>,
}

impl Container {
    /// Bind a header and payload, checking the length invariant.
    pub fn new(header: ContainerHeader, data: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.n_values() {
            return Err(Error::dims(format!(
                "payload has {} values, header dims require {}",
                data.len(),
                header.n_values()
            )));
        }
        Ok(Container {
            header,
            data,
            nan_masks: BTreeMap::new(),
        })
    }

    fn n_cells(&self) -> usize {
        self.header.latitudes.len() * self.header.longitudes.len()
    }

    /// Flat offset of the (member, init, lead, channel) slab.
    fn slab_start(&self, m: usize, init: usize, lead: usize, channel: usize) -> usize {
        let h = &self.header;
        (((m * h.init_times.len() + init) * h.lead_times_h.len() + lead) * h.channels.len()
            + channel)
            * self.n_cells()
    }

    /// One gridded field as stored.
    pub fn slab(&self, m: usize, init: usize, lead: usize, channel: usize) -> Result<&[f32]> {
        let h = &self.header;
        if m >= h.n_members
            || init >= h.init_times.len()
            || lead >= h.lead_times_h.len()
            || channel >= h.channels.len()
        {
            return Err(Error::dims(format!(
                "slab index (member {m}, init {init}, lead {lead}, channel {channel}) out of range"
            )));
        }
        let start = self.slab_start(m, init, lead, channel);
        Ok(&self.data[start..start + self.n_cells()])
    }

    /// Index of a channel by variable name and level.
    pub fn find_channel(&self, variable: &str, level_hpa: Option<u16>) -> Option<usize> {
        self.header
            .channels
            .iter()
            .position(|c| c.variable == variable && c.level_hpa == level_hpa)
    }

    /// Ensemble batch for one channel at one lead time (all members and
    /// init times).
    pub fn to_ensemble_batch(&self, channel: usize, lead: usize) -> Result<EnsembleBatch> {
        let h = &self.header;
        if channel >= h.channels.len() || lead >= h.lead_times_h.len() {
            return Err(Error::dims("channel or lead index out of range"));
        }
        let g = self.n_cells();
        let k = h.init_times.len();
        let mut values = Vec::with_capacity(h.n_members * k * g);
        for m in 0..h.n_members {
            for init in 0..k {
                let slab = self.slab(m, init, lead, channel)?;
                values.extend(slab.iter().map(|&v| v as f64));
            }
        }
        let meta = BatchMeta {
            variable: h.channels[channel].variable.clone(),
            level_hpa: h.channels[channel].level_hpa,
            lead_time_h: h.lead_times_h[lead],
        };
        EnsembleBatch::dense(meta, h.n_members, k, g, values)
    }

    /// Target batch for one channel at one lead time; the container must
    /// hold exactly one member.
    pub fn to_target_batch(&self, channel: usize, lead: usize) -> Result<TargetBatch> {
        let h = &self.header;
        if h.n_members != 1 {
            return Err(Error::data(format!(
                "target container must hold 1 member, found {}",
                h.n_members
            )));
        }
        if channel >= h.channels.len() || lead >= h.lead_times_h.len() {
            return Err(Error::dims("channel or lead index out of range"));
        }
        let g = self.n_cells();
        let k = h.init_times.len();
        let mut values = Vec::with_capacity(k * g);
        for init in 0..k {
            let slab = self.slab(0, init, lead, channel)?;
            values.extend(slab.iter().map(|&v| v as f64));
        }
        let meta = BatchMeta {
            variable: h.channels[channel].variable.clone(),
            level_hpa: h.channels[channel].level_hpa,
            lead_time_h: h.lead_times_h[lead],
        };
        TargetBatch::dense(meta, k, g, values)
    }

    /// All channels of one (member, init, lead) as a multi-channel state.
    pub fn to_field_set(&self, m: usize, init: usize, lead: usize) -> Result<FieldSet> {
        let h = &self.header;
        let grid = h.grid()?;
        let g = self.n_cells();
        let mut data = Vec::with_capacity(h.channels.len() * g);
        for channel in 0..h.channels.len() {
            let slab = self.slab(m, init, lead, channel)?;
            data.extend(slab.iter().map(|&v| v as f64));
        }
        FieldSet::new(grid, h.channels.clone(), data)
    }
}

/// Serialize a container to a writer.
pub fn write_container_to<W: Write>(mut w: W, container: &Container) -> Result<()> {
    container.header.validate()?;
    if container.data.len() != container.header.n_values() {
        return Err(Error::dims(format!(
            "payload has {} values, header dims require {}",
            container.data.len(),
            container.header.n_values()
        )));
    }
    let mut header_text = serde_json::to_string(&container.header)
        .map_err(|e| Error::format(format!("header serialization: {e}")))?;
    header_text.push('\n');
    w.write_all(&(header_text.len() as u64).to_le_bytes())?;
    w.write_all(header_text.as_bytes())?;
    let mut buf = Vec::with_capacity(container.data.len() * 4);
    for v in &container.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Write a container file.
pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_container_to(&mut w, container)?;
    w.flush()?;
    Ok(())
}

/// Deserialize a container from a reader, applying the NaN fill policy.
pub fn read_container_from<R: Read>(mut r: R, options: &ReadOptions) -> Result<Container> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|e| {
        Error::format(format!("container header length prefix (8 bytes at offset 0): {e}"))
    })?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len == 0 || header_len > MAX_HEADER_BYTES {
        return Err(Error::format(format!(
            "header length {header_len} outside (0, {MAX_HEADER_BYTES}]"
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(|e| {
        Error::format(format!(
            "container header ({header_len} bytes at offset 8): {e}"
        ))
    })?;
    if header_bytes.last() != Some(&b'\n') {
        return Err(Error::format("header text must end with a newline"));
    }
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("container header JSON: {e}")))?;
    header.validate()?;

    let n_values = header.n_values();
    let payload_offset = 8 + header_len as usize;
    let expected_bytes = n_values * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected_bytes {
        return Err(Error::format(format!(
            "payload truncated or oversized: expected {expected_bytes} bytes \
             ({n_values} f32 values) at offset {payload_offset}, found {}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut container = Container {
        header,
        data,
        nan_masks: BTreeMap::new(),
    };
    apply_nan_policy(&mut container, options);
    Ok(container)
}

/// Read a container file.
pub fn read_container(path: &Path, options: &ReadOptions) -> Result<Container> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_container_from(std::io::BufReader::new(file), options)
}

/// Replace NaNs of configured variables with their fill value, recording
/// a per-channel mask of affected cells (union over members and times).
fn apply_nan_policy(container: &mut Container, options: &ReadOptions) {
    let h = container.header.clone();
    let g = h.latitudes.len() * h.longitudes.len();
    for (ci, channel) in h.channels.iter().enumerate() {
        let Some(&fill) = options.nan_fill.get(&channel.variable) else {
            continue;
        };
        let mut mask = vec![false; g];
        for m in 0..h.n_members {
            for init in 0..h.init_times.len() {
                for lead in 0..h.lead_times_h.len() {
                    let start = container.slab_start(m, init, lead, ci);
                    for i in 0..g {
                        let v = &mut container.data[start + i];
                        if v.is_nan() {
                            *v = fill as f32;
                            mask[i] = true;
                        }
                    }
                }
            }
        }
        container.nan_masks.insert(ci, mask);
    }
}
