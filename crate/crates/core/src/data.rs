//! Event archives, sample windows and target masks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wfn_tensor::Tensor;

use crate::container::Container;
use crate::error::{invalid, FormatError, Result};
use crate::metrics::Mask;

pub const FRAME_MINUTES: u32 = 15;
pub const RAIN_THRESHOLD_MM_H: f64 = 0.2;
pub const INPUT_LEN: usize = 4;
pub const TARGET_LEN: usize = 32;

pub const CHANNEL_NAMES: [&str; 11] = [
    "VIS006", "VIS008", "WV062", "WV073", "IR016", "IR039", "IR087", "IR097", "IR108", "IR120", "IR134",
];
/// Indices of the infrared bands in [`CHANNEL_NAMES`].
pub const IR_CHANNELS: std::ops::Range<usize> = 4..11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetadata {
    pub region: String,
    /// ISO-8601 timestamp of frame 0.
    pub t0: String,
    pub dt_minutes: u32,
    pub channel_names: Vec<String>,
    pub sat_km_per_pixel: f64,
    pub radar_km_per_pixel: f64,
    /// Per-channel `(min, max)` mapped onto `[0, 1]`.
    pub normalization: Vec<(f64, f64)>,
    #[serde(default)]
    pub generator: serde_json::Value,
}

impl Default for ArchiveMetadata {
    fn default() -> Self {
        Self {
            region: "synthetic".into(),
            t0: "2019-06-01T00:00:00Z".into(),
            dt_minutes: FRAME_MINUTES,
            channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            sat_km_per_pixel: 12.0,
            radar_km_per_pixel: 2.0,
            normalization: vec![(0.0, 1.0); CHANNEL_NAMES.len()],
            generator: serde_json::Value::Null,
        }
    }
}

/// Aligned satellite `[T, 11, S, S]` and radar `[T, R, R]` timelines.
#[derive(Clone, Debug, PartialEq)]
pub struct EventArchive {
    pub satellite: Tensor<f32>,
    pub radar: Tensor<f32>,
    pub metadata: ArchiveMetadata,
}

impl EventArchive {
    pub fn new(satellite: Tensor<f32>, radar: Tensor<f32>, metadata: ArchiveMetadata) -> Result<Self> {
        let a = Self {
            satellite,
            radar,
            metadata,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let sat = self.satellite.shape();
        let rad = self.radar.shape();
        let ok = sat.len() == 4 && sat[1] == CHANNEL_NAMES.len() && sat[2] == sat[3] && rad.len() == 3 && rad[1] == rad[2] && rad[0] == sat[0];
        if !ok {
            return Err(invalid(format!("archive shapes satellite {sat:?} / radar {rad:?} are not [T,11,S,S] / [T,R,R]")));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.satellite.shape()[0]
    }

    pub fn sat_size(&self) -> usize {
        self.satellite.shape()[2]
    }

    pub fn radar_size(&self) -> usize {
        self.radar.shape()[1]
    }

    /// Satellite frames `[start, start + len)` as `[len, 11, S, S]`.
    pub fn satellite_frames(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        Ok(self.satellite.narrow(0, start, len)?)
    }

    pub fn radar_frames(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        Ok(self.radar.narrow(0, start, len)?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("satellite", "satellite", self.satellite.clone());
        c.insert("radar", "radar", self.radar.clone());
        c.metadata = serde_json::to_value(&self.metadata)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let sat = c.get_shaped("satellite", &[None, Some(CHANNEL_NAMES.len()), None, None])?;
        let t = sat.shape()[0];
        let rad = c.get_shaped("radar", &[Some(t), None, None])?;
        let metadata: ArchiveMetadata =
            serde_json::from_value(c.metadata.clone()).map_err(|e| FormatError::Manifest(format!("archive metadata: {e}")))?;
        Self::new(sat.clone(), rad.clone(), metadata)
    }
}

pub fn write_archive(archive: &EventArchive, path: impl AsRef<Path>) -> Result<()> {
    archive.to_container()?.write(path)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<EventArchive> {
    EventArchive::from_container(&Container::read(path)?)
}

/// One training window: `in_len` input frames followed by `out_len` targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleIndex {
    pub start: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl SampleIndex {
    pub fn inputs(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.in_len
    }

    pub fn targets(&self) -> std::ops::Range<usize> {
        self.start + self.in_len..self.start + self.in_len + self.out_len
    }
}

/// Every window `[t, t + in_len + out_len)` with `t = 0, stride, 2*stride, ...`.
pub fn sliding_window(num_frames: usize, in_len: usize, out_len: usize, stride: usize) -> Result<Vec<SampleIndex>> {
    if stride == 0 || in_len + out_len == 0 {
        return Err(invalid("stride and window length must be positive"));
    }
    let span = in_len + out_len;
    if num_frames < span {
        return Ok(Vec::new());
    }
    Ok((0..=num_frames - span)
        .step_by(stride)
        .map(|start| SampleIndex { start, in_len, out_len })
        .collect())
}

/// `rate >= threshold`.
pub fn binarize_target(radar: &Tensor<f32>, threshold_mm_h: f64) -> Mask {
    Mask::threshold(radar, threshold_mm_h)
}

/// First `train_count` items for training, the rest for validation.
pub fn split_train_val<T: Clone>(samples: &[T], train_count: usize) -> Result<(Vec<T>, Vec<T>)> {
    if train_count > samples.len() {
        return Err(invalid(format!("train count {train_count} exceeds {} samples", samples.len())));
    }
    Ok((samples[..train_count].to_vec(), samples[train_count..].to_vec()))
}
