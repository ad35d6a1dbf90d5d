//! Deterministic synthetic storms standing in for real satellite/radar data.
//!
//! Gaussian rain cells drift with a smooth divergence-free wind and grow and
//! decay over a `sin` life cycle. Radar is the summed rain rate on the
//! radar window; satellite bands are functions of a wider cloud field
//! (IR darkens with cloud, WV follows a broader moisture field, VIS is
//! cloud albedo times a day/night factor).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wfn_tensor::Tensor;

use crate::data::{ArchiveMetadata, EventArchive, CHANNEL_NAMES, FRAME_MINUTES};
use crate::error::{invalid, Result};
use crate::geometry::Geometry;

const SAT_KM: f64 = 12.0;
const HOURS_PER_FRAME: f64 = FRAME_MINUTES as f64 / 60.0;
const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5; // 1 / (2 sqrt(2 ln 2))
const CLOUD_SPREAD: f64 = 1.6;
const MOISTURE_SPREAD: f64 = 3.0;
const CUTOFF_SIGMAS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_frames: usize,
    pub n_cells: usize,
    pub geometry: Geometry,
    pub fwhm_km: (f64, f64),
    pub peak_mm_h: (f64, f64),
    pub wind_speed_km_h: (f64, f64),
    /// Amplitude of the sinusoidal wind perturbation relative to the mean speed.
    pub wind_variation: f64,
    /// Standard deviation of per-cell velocity offsets.
    pub jitter_km_h: f64,
    pub lifetime_frames: (f64, f64),
    pub start_hour_utc: f64,
    /// Brightness-temperature noise in kelvin.
    pub noise_k: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 64,
            n_cells: 60,
            geometry: Geometry::default(),
            fwhm_km: (20.0, 80.0),
            peak_mm_h: (0.5, 20.0),
            wind_speed_km_h: (20.0, 45.0),
            wind_variation: 0.25,
            jitter_km_h: 3.0,
            lifetime_frames: (24.0, 96.0),
            start_hour_utc: 6.0,
            noise_k: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.num_frames == 0 {
            return Err(invalid("synthetic archive needs at least one frame"));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !ordered(self.fwhm_km) || !ordered(self.peak_mm_h) || !ordered(self.lifetime_frames) {
            return Err(invalid("cell width, peak and lifetime ranges must be positive and ordered"));
        }
        let (w0, w1) = self.wind_speed_km_h;
        if !(w0 >= 0.0 && w0 <= w1 && w1.is_finite()) || self.wind_variation < 0.0 || self.jitter_km_h < 0.0 || self.noise_k < 0.0 {
            return Err(invalid("wind, jitter and noise parameters must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x_km: f64,
    pub y_km: f64,
    pub sigma_km: f64,
    pub peak_mm_h: f64,
    /// Frames since birth.
    pub age: f64,
    pub lifetime: f64,
    /// Offset added to the ambient wind, km/h.
    pub drift_km_h: (f64, f64),
}

impl Cell {
    pub fn envelope(&self) -> f64 {
        if self.age < 0.0 || self.age >= self.lifetime {
            0.0
        } else {
            (PI * self.age / self.lifetime).sin()
        }
    }

    pub fn intensity(&self) -> f64 {
        self.peak_mm_h * self.envelope()
    }

    /// Cloud opacity; rises ahead of the rain.
    fn cloud_amount(&self) -> f64 {
        let e = self.envelope();
        if e <= 0.0 {
            0.0
        } else {
            0.5 * e.sqrt() + self.intensity() / 4.0
        }
    }
}

/// `u = u0 + A sin(2 pi y / L + phase)`, `v = v0 + A sin(2 pi x / L + phase)`;
/// `u` does not depend on `x` nor `v` on `y`, so the field is divergence free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindField {
    pub u0_km_h: f64,
    pub v0_km_h: f64,
    pub amplitude_km_h: f64,
    pub wavelength_km: f64,
    pub phase: f64,
}

impl WindField {
    pub fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let k = 2.0 * PI / self.wavelength_km;
        (
            self.u0_km_h + self.amplitude_km_h * (k * y + self.phase).sin(),
            self.v0_km_h + self.amplitude_km_h * (k * x + self.phase).sin(),
        )
    }
}

/// Cells on a periodic domain `[-margin, extent + margin)^2` in km, with
/// `x` to the east (columns) and `y` to the south (rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub cells: Vec<Cell>,
    pub wind: WindField,
    pub extent_km: f64,
    pub margin_km: f64,
    /// Replace expired cells with fresh random ones.
    pub respawn: bool,
}

impl Scene {
    pub fn random(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Self {
        let extent = cfg.geometry.sat_size as f64 * SAT_KM;
        let speed = rng.random_range(cfg.wind_speed_km_h.0..=cfg.wind_speed_km_h.1);
        let dir = rng.random_range(0.0..2.0 * PI);
        let wind = WindField {
            u0_km_h: speed * dir.cos(),
            v0_km_h: speed * dir.sin(),
            amplitude_km_h: cfg.wind_variation * speed,
            wavelength_km: extent,
            phase: rng.random_range(0.0..2.0 * PI),
        };
        let mut scene = Self {
            cells: Vec::with_capacity(cfg.n_cells),
            wind,
            extent_km: extent,
            margin_km: 0.25 * extent,
            respawn: true,
        };
        for _ in 0..cfg.n_cells {
            let mut c = scene.new_cell(cfg, rng);
            c.age = rng.random_range(0.0..c.lifetime);
            scene.cells.push(c);
        }
        scene
    }

    fn new_cell(&self, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Cell {
        let lo = -self.margin_km;
        let hi = self.extent_km + self.margin_km;
        let log_peak = rng.random_range(cfg.peak_mm_h.0.ln()..=cfg.peak_mm_h.1.ln());
        let jitter = Normal::new(0.0, cfg.jitter_km_h.max(1e-12)).expect("jitter");
        Cell {
            x_km: rng.random_range(lo..hi),
            y_km: rng.random_range(lo..hi),
            sigma_km: rng.random_range(cfg.fwhm_km.0..=cfg.fwhm_km.1) * FWHM_TO_SIGMA,
            peak_mm_h: log_peak.exp(),
            age: 0.0,
            lifetime: rng.random_range(cfg.lifetime_frames.0..=cfg.lifetime_frames.1),
            drift_km_h: (jitter.sample(rng), jitter.sample(rng)),
        }
    }

    pub fn cell_velocity(&self, cell: &Cell) -> (f64, f64) {
        let (u, v) = self.wind.at(cell.x_km, cell.y_km);
        (u + cell.drift_km_h.0, v + cell.drift_km_h.1)
    }

    /// Moves every cell forward one frame.
    pub fn advance(&mut self, cfg: &SyntheticConfig, rng: &mut impl Rng) {
        let span = self.extent_km + 2.0 * self.margin_km;
        for i in 0..self.cells.len() {
            let (u, v) = self.cell_velocity(&self.cells[i]);
            let c = &mut self.cells[i];
            c.x_km = (c.x_km + u * HOURS_PER_FRAME + self.margin_km).rem_euclid(span) - self.margin_km;
            c.y_km = (c.y_km + v * HOURS_PER_FRAME + self.margin_km).rem_euclid(span) - self.margin_km;
            c.age += 1.0;
            if self.respawn && c.age >= c.lifetime {
                self.cells[i] = self.new_cell(cfg, rng);
            }
        }
    }

    /// Rain rate in mm/h at a point.
    pub fn rain_rate(&self, x: f64, y: f64) -> f64 {
        self.cells
            .iter()
            .map(|c| {
                let d2 = (x - c.x_km).powi(2) + (y - c.y_km).powi(2);
                c.intensity() * (-d2 / (2.0 * c.sigma_km * c.sigma_km)).exp()
            })
            .sum()
    }
}

/// Regular grid of pixel centers: `origin + (index + 0.5) * pitch`.
struct GridSpec {
    n: usize,
    origin_km: f64,
    pitch_km: f64,
}

/// Adds `amp * exp(-d^2 / 2 sigma^2)` to `field` within `CUTOFF_SIGMAS`.
fn splat(field: &mut [f64], g: &GridSpec, cx: f64, cy: f64, sigma: f64, amp: f64) {
    if amp == 0.0 {
        return;
    }
    let reach = CUTOFF_SIGMAS * sigma;
    let range = |c: f64| {
        let lo = ((c - reach - g.origin_km) / g.pitch_km - 0.5).floor().max(0.0) as usize;
        let hi = ((c + reach - g.origin_km) / g.pitch_km - 0.5).ceil().max(-1.0) as i64;
        let hi = (hi + 1).clamp(0, g.n as i64) as usize;
        lo.min(g.n)..hi
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in range(cy) {
        let dy = g.origin_km + (i as f64 + 0.5) * g.pitch_km - cy;
        for j in range(cx) {
            let dx = g.origin_km + (j as f64 + 0.5) * g.pitch_km - cx;
            field[i * g.n + j] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn radar_grid(geom: &Geometry) -> GridSpec {
    GridSpec {
        n: geom.radar_size(),
        origin_km: geom.crop_offset() as f64 * SAT_KM,
        pitch_km: SAT_KM / geom.upscale as f64,
    }
}

fn sat_grid(geom: &Geometry) -> GridSpec {
    GridSpec {
        n: geom.sat_size,
        origin_km: 0.0,
        pitch_km: SAT_KM,
    }
}

/// Radar rain-rate frame `[R, R]` in mm/h.
pub fn render_radar(scene: &Scene, geom: &Geometry) -> Tensor<f32> {
    let g = radar_grid(geom);
    let mut field = vec![0.0; g.n * g.n];
    for c in &scene.cells {
        splat(&mut field, &g, c.x_km, c.y_km, c.sigma_km, c.intensity());
    }
    Tensor::new([g.n, g.n], field.into_iter().map(|v| v as f32).collect()).expect("radar shape")
}

/// Unnormalized satellite bands `[11, S, S]` (reflectance / kelvin).
fn render_satellite(scene: &Scene, cfg: &SyntheticConfig, frame: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = sat_grid(&cfg.geometry);
    let px = g.n * g.n;
    let mut cloud = vec![0.0; px];
    let mut moisture = vec![0.0; px];
    for c in &scene.cells {
        let a = c.cloud_amount();
        splat(&mut cloud, &g, c.x_km, c.y_km, CLOUD_SPREAD * c.sigma_km, a);
        splat(&mut moisture, &g, c.x_km, c.y_km, MOISTURE_SPREAD * c.sigma_km, a);
    }
    let hour = cfg.start_hour_utc + frame as f64 * HOURS_PER_FRAME;
    let daylight = (PI * (hour.rem_euclid(24.0) - 6.0) / 12.0).sin().max(0.0);
    let hours = frame as f64 * HOURS_PER_FRAME;
    let k = 2.0 * PI / scene.wind.wavelength_km;
    let noise = Normal::new(0.0, cfg.noise_k.max(1e-12)).expect("noise");

    let mut out = vec![0.0; CHANNEL_NAMES.len() * px];
    for p in 0..px {
        let (i, j) = (p / g.n, p % g.n);
        let x = (j as f64 + 0.5) * SAT_KM;
        let y = (i as f64 + 0.5) * SAT_KM;
        let cover = 1.0 - (-cloud[p]).exp();
        let humid = 1.0 - (-moisture[p]).exp();
        let wave = (k * (x - scene.wind.u0_km_h * hours) + k * (y - scene.wind.v0_km_h * hours) + scene.wind.phase).sin();
        for ch in 0..2 {
            out[ch * px + p] = daylight * (0.08 + (0.75 - 0.05 * ch as f64) * cover);
        }
        for ch in 0..2 {
            out[(2 + ch) * px + p] = 245.0 - 8.0 * ch as f64 - 25.0 * humid - 4.0 * wave;
        }
        for ch in 0..7 {
            out[(4 + ch) * px + p] = 290.0 - 3.0 * ch as f64 - (55.0 + 6.0 * ch as f64) * cover;
        }
    }
    if cfg.noise_k > 0.0 {
        for v in out[2 * px..].iter_mut() {
            *v += noise.sample(rng);
        }
    }
    out
}

/// Renders `cfg.num_frames` frames of `scene`, advancing it between frames.
pub fn render_archive(mut scene: Scene, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<EventArchive> {
    cfg.validate()?;
    let (t, s, r) = (cfg.num_frames, cfg.geometry.sat_size, cfg.geometry.radar_size());
    let bands = CHANNEL_NAMES.len();
    let mut raw = Vec::with_capacity(t * bands * s * s);
    let mut radar = Vec::with_capacity(t * r * r);
    for frame in 0..t {
        radar.extend_from_slice(render_radar(&scene, &cfg.geometry).data());
        raw.extend(render_satellite(&scene, cfg, frame, rng));
        scene.advance(cfg, rng);
    }

    let px = s * s;
    let mut normalization = Vec::with_capacity(bands);
    for ch in 0..bands {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for f in 0..t {
            for &v in &raw[(f * bands + ch) * px..(f * bands + ch + 1) * px] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        normalization.push((lo, hi));
    }
    let satellite: Vec<f32> = raw
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let (lo, hi) = normalization[(idx / px) % bands];
            if hi - lo > 1e-12 {
                ((v - lo) / (hi - lo)) as f32
            } else {
                0.0
            }
        })
        .collect();

    let metadata = ArchiveMetadata {
        t0: format!("2019-06-01T{:02}:00:00Z", cfg.start_hour_utc.rem_euclid(24.0) as u32),
        sat_km_per_pixel: SAT_KM,
        radar_km_per_pixel: SAT_KM / cfg.geometry.upscale as f64,
        normalization,
        generator: serde_json::to_value(cfg)?,
        ..ArchiveMetadata::default()
    };
    EventArchive::new(Tensor::new([t, bands, s, s], satellite)?, Tensor::new([t, r, r], radar)?, metadata)
}

/// Archive from a seeded random scene.
pub fn generate(cfg: &SyntheticConfig) -> Result<EventArchive> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = Scene::random(cfg, &mut rng);
    render_archive(scene, cfg, &mut rng)
}

/// Full-size archive with default generator settings.
pub fn generate_synthetic(seed: u64, num_frames: usize, n_cells: usize) -> Result<EventArchive> {
    generate(&SyntheticConfig {
        seed,
        num_frames,
        n_cells,
        ..SyntheticConfig::default()
    })
}
