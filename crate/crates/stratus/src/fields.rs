//! Multi-channel gridded states: a set of named variable/level fields
//! sharing one grid. This is the in-memory currency of the sampler, the
//! cyclone tracker and the field container.

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use serde::{Deserialize, Serialize};

/// Identity of one channel: a variable short name plus an optional
/// pressure level in hPa (`None` for surface/single-level variables).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMeta {
    /// Variable short name, e.g. "z", "t", "msl", "10u", "tp".
    pub variable: String,
    /// Pressure level in hPa, absent for single-level variables.
    pub level_hpa: Option<u16>,
}

impl ChannelMeta {
    /// Single-level channel.
    pub fn surface(variable: &str) -> Self {
        ChannelMeta {
            variable: variable.to_string(),
            level_hpa: None,
        }
    }

    /// Pressure-level channel.
    pub fn at_level(variable: &str, level_hpa: u16) -> Self {
        ChannelMeta {
            variable: variable.to_string(),
            level_hpa: Some(level_hpa),
        }
    }

    /// "z500"-style label used in reports and error messages.
    pub fn label(&self) -> String {
        match self.level_hpa {
            Some(l) => format!("{}{}", self.variable, l),
            None => self.variable.clone(),
        }
    }
}

/// A stack of channels over one grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    /// Shared grid geometry.
    pub grid: LatLonGrid,
    /// Channel identities, one per slab of `grid.n_cells()` values.
    pub channels: Vec<ChannelMeta>,
    /// Channel-major values, `channels.len() * grid.n_cells()` entries.
    pub data: Vec<f64>,
}

impl FieldSet {
    /// Bind data to a grid and channel list, checking length.
    pub fn new(grid: LatLonGrid, channels: Vec<ChannelMeta>, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels.len() * grid.n_cells() {
            return Err(Error::dims(format!(
                "field set has {} values for {} channels of {} cells",
                data.len(),
                channels.len(),
                grid.n_cells()
            )));
        }
        Ok(FieldSet {
            grid,
            channels,
            data,
        })
    }

    /// All-zero field set.
    pub fn zeros(grid: LatLonGrid, channels: Vec<ChannelMeta>) -> Self {
        let n = channels.len() * grid.n_cells();
        FieldSet {
            grid,
            channels,
            data: vec![0.0; n],
        }
    }

    /// Number of channels.
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Values of one channel.
    pub fn channel(&self, idx: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.data[idx * n..(idx + 1) * n]
    }

    /// Mutable values of one channel.
    pub fn channel_mut(&mut self, idx: usize) -> &mut [f64] {
        let n = self.grid.n_cells();
        &mut self.data[idx * n..(idx + 1) * n]
    }

    /// Index of the channel matching a variable name and level, if any.
    pub fn find(&self, variable: &str, level_hpa: Option<u16>) -> Option<usize> {
        self.channels
            .iter()
            .position(|c| c.variable == variable && c.level_hpa == level_hpa)
    }

    /// Index of the channel matching a variable name and level, or an error
    /// naming what is missing.
    pub fn require(&self, variable: &str, level_hpa: Option<u16>) -> Result<usize> {
        self.find(variable, level_hpa).ok_or_else(|| {
            Error::data(format!(
                "missing required channel {}",
                ChannelMeta {
                    variable: variable.to_string(),
                    level_hpa,
                }
                .label()
            ))
        })
    }

    /// True when channel lists and grids agree.
    pub fn same_shape(&self, other: &FieldSet) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }

    /// First non-finite value as (channel, cell), if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let n = self.grid.n_cells();
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / n, p % n))
    }
}
