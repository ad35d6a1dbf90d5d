//! End-to-end model: framewise sat2rad, PhyDNet extension of
//! the satellite sequence, channel fusion and the fusion U-Net with the
//! crop-and-upscale head.
//!
//! Fused channel order: input frames (time-major, frame channels inner),
//! PhyDNet frames (same layout), then one sat2rad logit map per input frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wfn_tensor::{ops, Float, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::Geometry;
use crate::metrics::Mask;
use crate::params::{Mode, ParameterTree, Session};
use crate::phydnet::{phydnet_forward, phydnet_init, PhyDNetConfig};
use crate::unet::{unet_apply_padded, unet_init, UNetConfig};

/// Which blocks feed the fusion U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSources {
    pub input_seq: bool,
    pub phydnet: bool,
    pub sat2rad: bool,
}

impl Default for FusionSources {
    fn default() -> Self {
        Self {
            input_seq: true,
            phydnet: true,
            sat2rad: true,
        }
    }
}

impl FusionSources {
    /// Input sequence only: a plain U-Net on the raw frames.
    pub fn input_only() -> Self {
        Self {
            input_seq: true,
            phydnet: false,
            sat2rad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub sat2rad: UNetConfig,
    pub phydnet: PhyDNetConfig,
    pub fusion: UNetConfig,
    #[serde(default)]
    pub sources: FusionSources,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            sat2rad: UNetConfig::sat2rad(),
            phydnet: PhyDNetConfig::default(),
            fusion: UNetConfig::fusion(),
            sources: FusionSources::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale variant: 60x60 satellite grid (64 after padding), a 10
    /// pixel radar window upscaled x6, narrow nets.
    pub fn reduced() -> Self {
        let geometry = Geometry {
            sat_size: 60,
            unet_pad: 2,
            radar_crop: 10,
            upscale: 6,
        };
        let phydnet = PhyDNetConfig {
            latent_channels: 16,
            convlstm_hidden: vec![16],
            ..PhyDNetConfig::default()
        };
        let mut cfg = Self {
            geometry,
            sat2rad: UNetConfig::reduced(11, 1, &[8, 16, 32]),
            phydnet,
            fusion: UNetConfig::reduced(0, 32, &[16, 32, 64]),
            sources: FusionSources::default(),
        };
        cfg.fusion.in_channels = cfg.fusion_in_channels();
        cfg
    }

    /// Same config with the fusion net rewired for `sources`.
    pub fn with_sources(mut self, sources: FusionSources) -> Self {
        self.sources = sources;
        self.fusion.in_channels = self.fusion_in_channels();
        self
    }

    pub fn input_len(&self) -> usize {
        self.phydnet.input_len
    }

    pub fn frame_channels(&self) -> usize {
        self.phydnet.frame_channels
    }

    pub fn output_len(&self) -> usize {
        self.fusion.out_channels
    }

    /// `in_len * (frame_channels + 1) + pred_len * frame_channels` with all sources on.
    pub fn fusion_in_channels(&self) -> usize {
        let (t, c, p) = (self.input_len(), self.frame_channels(), self.phydnet.output_len);
        let mut n = 0;
        if self.sources.input_seq {
            n += t * c;
        }
        if self.sources.phydnet {
            n += p * c;
        }
        if self.sources.sat2rad {
            n += t;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.sat2rad.validate()?;
        self.phydnet.validate()?;
        self.fusion.validate()?;
        if self.sat2rad.in_channels != self.frame_channels() || self.sat2rad.out_channels != 1 {
            return Err(invalid(format!(
                "sat2rad must map {} channels to 1, configured {} -> {}",
                self.frame_channels(),
                self.sat2rad.in_channels,
                self.sat2rad.out_channels
            )));
        }
        if self.fusion_in_channels() == 0 {
            return Err(invalid("fusion needs at least one input source"));
        }
        if self.fusion.in_channels != self.fusion_in_channels() {
            return Err(invalid(format!(
                "fusion U-Net takes {} channels but the enabled sources provide {}",
                self.fusion.in_channels,
                self.fusion_in_channels()
            )));
        }
        let n = self.geometry.unet_input_size();
        for (name, c) in [("sat2rad", &self.sat2rad), ("fusion", &self.fusion)] {
            if n % c.size_multiple() != 0 {
                return Err(invalid(format!(
                    "{name} U-Net needs sizes divisible by {}, padded input is {n}",
                    c.size_multiple()
                )));
            }
        }
        self.phydnet.latent_size(self.geometry.sat_size, self.geometry.sat_size)?;
        Ok(())
    }
}

/// Parameters of all three submodules.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherFusionNet<T> {
    pub config: ModelConfig,
    pub sat2rad: ParameterTree<T>,
    pub phydnet: ParameterTree<T>,
    pub fusion: ParameterTree<T>,
    /// Frozen submodules run in eval mode with constant parameters.
    pub freeze_sat2rad: bool,
    pub freeze_phydnet: bool,
}

impl<T: Float> WeatherFusionNet<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            sat2rad: unet_init(&config.sat2rad, seed)?,
            phydnet: phydnet_init(&config.phydnet, seed.wrapping_add(1))?,
            fusion: unet_init(&config.fusion, seed.wrapping_add(2))?,
            config,
            freeze_sat2rad: true,
            freeze_phydnet: true,
        })
    }
}

fn check_sequence(config: &ModelConfig, seq: &Tensor<impl Float>) -> Result<usize> {
    let n = config.geometry.sat_size;
    match seq.shape() {
        &[b, t, c, h, w] if t == config.input_len() && c == config.frame_channels() && h == n && w == n => Ok(b),
        s => Err(invalid(format!(
            "expected input [B,{},{},{n},{n}], got {s:?}",
            config.input_len(),
            config.frame_channels()
        ))),
    }
}

/// sat2rad logits for every frame of `[B, T, C, H, W]`, as `[B, T, H, W]`.
pub fn sat2rad_apply<T: Float>(s: &Session<T>, config: &ModelConfig, seq: &Tensor<T>) -> Result<Var<T>> {
    check_sequence(config, seq)?;
    sat2rad_frames(s, config, seq)
}

/// sat2rad over any number of frames.
pub fn sat2rad_frames<T: Float>(s: &Session<T>, config: &ModelConfig, seq: &Tensor<T>) -> Result<Var<T>> {
    let (b, t, c, h, w) = match seq.shape() {
        &[b, t, c, h, w] => (b, t, c, h, w),
        sh => return Err(invalid(format!("expected [B,T,C,H,W], got {sh:?}"))),
    };
    let frames = Var::constant(seq.clone().reshape([b * t, c, h, w])?);
    let y = unet_apply_padded(s, &config.sat2rad, &frames, config.geometry.unet_pad)?;
    Ok(ops::reshape(&y, &[b, t, h, w])?)
}

/// Channel concatenation of the enabled sources, `[B, fusion_in, H, W]`.
pub fn fuse_inputs<T: Float>(
    config: &ModelConfig,
    seq: &Tensor<T>,
    phydnet_out: Option<&Tensor<T>>,
    sat2rad_out: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let b = check_sequence(config, seq)?;
    let (t, c, n) = (config.input_len(), config.frame_channels(), config.geometry.sat_size);
    let mut parts = Vec::new();
    if config.sources.input_seq {
        parts.push(seq.clone().reshape([b, t * c, n, n])?);
    }
    if config.sources.phydnet {
        let p = config.phydnet.output_len;
        let out = phydnet_out.ok_or_else(|| invalid("PhyDNet frames required by the fusion sources"))?;
        if out.shape() != [b, p, c, n, n] {
            return Err(invalid(format!("PhyDNet output must be [{b},{p},{c},{n},{n}], got {:?}", out.shape())));
        }
        parts.push(out.clone().reshape([b, p * c, n, n])?);
    }
    if config.sources.sat2rad {
        let out = sat2rad_out.ok_or_else(|| invalid("sat2rad maps required by the fusion sources"))?;
        if out.shape() != [b, t, n, n] {
            return Err(invalid(format!("sat2rad output must be [{b},{t},{n},{n}], got {:?}", out.shape())));
        }
        parts.push(out.clone());
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 1)?)
}

/// Fusion input computed by the frozen upstream modules.
pub fn upstream_features<T: Float>(model: &WeatherFusionNet<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = &model.config;
    check_sequence(cfg, seq)?;
    let phyd = if cfg.sources.phydnet {
        let s = Session::frozen(&model.phydnet);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = phydnet_forward(&s, &cfg.phydnet, seq, cfg.phydnet.output_len, None, 0.0, &mut rng)?;
        Some(out.value().clone())
    } else {
        None
    };
    let s2r = if cfg.sources.sat2rad {
        let s = Session::frozen(&model.sat2rad);
        Some(sat2rad_apply(&s, cfg, seq)?.value().clone())
    } else {
        None
    };
    fuse_inputs(cfg, seq, phyd.as_ref(), s2r.as_ref())
}

/// Fusion U-Net and head on precomputed features: `[B, out_len, R, R]` logits.
pub fn fusion_head<T: Float>(s: &Session<T>, config: &ModelConfig, features: &Tensor<T>) -> Result<Var<T>> {
    let x = Var::constant(features.clone());
    let y = unet_apply_padded(s, &config.fusion, &x, config.geometry.unet_pad)?;
    config.geometry.crop_and_upscale_var(&y)
}

/// Pre-sigmoid radar-grid predictions `[B, out_len, R, R]`.
pub fn forward_logits<T: Float>(model: &WeatherFusionNet<T>, seq: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let features = upstream_features(model, seq)?;
    let s = Session::new(&model.fusion, mode, false);
    Ok(fusion_head(&s, &model.config, &features)?.value().clone())
}

/// Rain probabilities in (0, 1).
pub fn forward<T: Float>(model: &WeatherFusionNet<T>, seq: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    Ok(sigmoid(&forward_logits(model, seq, mode)?))
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    ops::sigmoid(&Var::constant(x.clone())).value().clone()
}

/// `probs >= threshold`.
pub fn binarize<T: Float>(probs: &Tensor<T>, threshold: f64) -> Mask {
    Mask::threshold(probs, threshold)
}

/// Baseline: the thresholded sat2rad estimate of the last input frame,
/// repeated for every lead time. Output `[B, out_len, R, R]` probabilities.
pub fn persistence_probabilities<T: Float>(model: &WeatherFusionNet<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = &model.config;
    let b = check_sequence(cfg, seq)?;
    let last = seq.narrow(1, cfg.input_len() - 1, 1)?;
    let s = Session::frozen(&model.sat2rad);
    let logits = sat2rad_frames(&s, cfg, &last)?.value().clone();
    let radar = cfg.geometry.crop_and_upscale(&logits)?;
    let probs = sigmoid(&radar);
    let r = cfg.geometry.radar_size();
    let reps: Vec<&Tensor<T>> = std::iter::repeat_n(&probs, cfg.output_len()).collect();
    Ok(Tensor::concat(&reps, 1)?.reshape([b, cfg.output_len(), r, r])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zero_layer;
    use crate::unet::unet_forward;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig {
            geometry: Geometry {
                sat_size: 12,
                unet_pad: 2,
                radar_crop: 4,
                upscale: 3,
            },
            sat2rad: UNetConfig::reduced(3, 1, &[2, 4]),
            phydnet: PhyDNetConfig {
                latent_channels: 4,
                phycell_hidden: vec![9],
                phycell_kernel: [3, 3],
                convlstm_hidden: vec![4],
                convlstm_kernel: [3, 3],
                input_len: 2,
                output_len: 3,
                frame_channels: 3,
                encoder_downscale: 2,
            },
            fusion: UNetConfig::reduced(0, 5, &[2, 4]),
            sources: FusionSources::default(),
        };
        cfg.fusion.in_channels = cfg.fusion_in_channels();
        cfg
    }

    fn seq(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.geometry.sat_size;
        Tensor::from_fn([b, cfg.input_len(), cfg.frame_channels(), n, n], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_channel_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.fusion_in_channels(), 158);
        assert_eq!(cfg.fusion.in_channels, 158);
        assert_eq!(cfg.output_len(), 32);
        cfg.validate().unwrap();
        assert_eq!(cfg.clone().with_sources(FusionSources::input_only()).fusion_in_channels(), 44);
        ModelConfig::reduced().validate().unwrap();
        for t in 1..6 {
            for p in 1..12 {
                let mut c = tiny();
                c.phydnet.input_len = t;
                c.phydnet.output_len = p;
                assert_eq!(c.fusion_in_channels(), t * (3 + 1) + p * 3);
            }
        }
    }

    #[test]
    fn fused_layout() {
        let cfg = tiny();
        let x = seq(&cfg, 1, 1);
        let n = 12;
        let phyd = Tensor::from_fn([1, 3, 3, n, n], |i| 1000.0 + i as f32);
        let s2r = Tensor::from_fn([1, 2, n, n], |i| -(i as f32));
        let f = fuse_inputs(&cfg, &x, Some(&phyd), Some(&s2r)).unwrap();
        assert_eq!(f.shape(), &[1, 6 + 9 + 2, n, n]);
        assert_eq!(f.narrow(1, 0, 1).unwrap().data(), x.narrow(1, 0, 1).unwrap().narrow(2, 0, 1).unwrap().data());
        assert_eq!(f.narrow(1, 6, 9).unwrap().data(), phyd.data());
        assert_eq!(f.narrow(1, 15, 2).unwrap().data(), s2r.data());
        let zero = fuse_inputs::<f32>(&cfg, &Tensor::zeros(x.shape().to_vec()), Some(&Tensor::zeros([1, 3, 3, n, n])), Some(&Tensor::zeros([1, 2, n, n]))).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(fuse_inputs(&cfg, &x, Some(&Tensor::zeros([1, 2, 3, n, n])), Some(&s2r)).unwrap_err().is_invalid_argument());
        assert!(fuse_inputs(&cfg, &x, Some(&phyd), None).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn sat2rad_is_framewise() {
        let cfg = tiny();
        let tree = unet_init::<f32>(&cfg.sat2rad, 3).unwrap();
        let s = Session::frozen(&tree);
        let x = seq(&cfg, 2, 2);
        let out = sat2rad_apply(&s, &cfg, &x).unwrap();
        assert_eq!(out.shape(), &[2, 2, 12, 12]);
        for b in 0..2 {
            for t in 0..2 {
                let frame = Var::constant(x.narrow(0, b, 1).unwrap().narrow(1, t, 1).unwrap().reshape([1, 3, 12, 12]).unwrap());
                let one = unet_apply_padded(&s, &cfg.sat2rad, &frame, 2).unwrap();
                let got = out.value().narrow(0, b, 1).unwrap().narrow(1, t, 1).unwrap();
                assert_eq!(got.data(), one.value().data());
            }
        }
        let swapped = Tensor::concat(&[&x.narrow(1, 1, 1).unwrap(), &x.narrow(1, 0, 1).unwrap()], 1).unwrap();
        let out2 = sat2rad_apply(&s, &cfg, &swapped).unwrap();
        assert_eq!(out2.value().narrow(1, 0, 1).unwrap(), out.value().narrow(1, 1, 1).unwrap());
        assert!(sat2rad_apply(&s, &cfg, &x.narrow(1, 0, 1).unwrap()).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn forward_matches_hand_chained_pipeline() {
        let cfg = tiny();
        let model = WeatherFusionNet::<f32>::init(cfg.clone(), 4).unwrap();
        let x = seq(&cfg, 1, 3);
        let logits = forward_logits(&model, &x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[1, 5, 12, 12]);

        let s_p = Session::frozen(&model.phydnet);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let phyd = phydnet_forward(&s_p, &cfg.phydnet, &x, 3, None, 0.0, &mut rng).unwrap();
        let s_s = Session::frozen(&model.sat2rad);
        let frames = Var::constant(x.clone().reshape([2, 3, 12, 12]).unwrap());
        let s2r = unet_apply_padded(&s_s, &cfg.sat2rad, &frames, 2).unwrap().value().clone().reshape([1, 2, 12, 12]).unwrap();
        let fused = Tensor::concat(
            &[&x.clone().reshape([1, 6, 12, 12]).unwrap(), &phyd.value().clone().reshape([1, 9, 12, 12]).unwrap(), &s2r],
            1,
        )
        .unwrap();
        let s_f = Session::frozen(&model.fusion);
        let padded = crate::geometry::pad_replicate(&fused, 2).unwrap();
        let y = unet_forward(&s_f, &cfg.fusion, &Var::constant(padded)).unwrap();
        let y = crate::geometry::center_crop(y.value(), 12, 12).unwrap();
        let want = crate::geometry::upsample_bilinear(&crate::geometry::center_crop(&y, 4, 4).unwrap(), 3).unwrap();
        assert_eq!(logits, want);

        let probs = forward(&model, &x, Mode::Eval).unwrap();
        assert_eq!(probs, sigmoid(&logits));
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(forward(&model, &x, Mode::Eval).unwrap(), probs);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let cfg = tiny();
        let mut model = WeatherFusionNet::<f32>::init(cfg.clone(), 5).unwrap();
        zero_layer(&mut model.fusion, "head").unwrap();
        let x = seq(&cfg, 1, 4);
        assert!(forward_logits(&model, &x, Mode::Eval).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(forward(&model, &x, Mode::Eval).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn input_only_ablation_runs() {
        let cfg = tiny().with_sources(FusionSources::input_only());
        let model = WeatherFusionNet::<f32>::init(cfg.clone(), 6).unwrap();
        assert_eq!(cfg.fusion.in_channels, 6);
        let out = forward(&model, &seq(&cfg, 1, 5), Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 5, 12, 12]);
    }

    #[test]
    fn binarize_convention() {
        let half = Tensor::<f32>::full([3, 3], 0.5);
        assert!(binarize(&half, 0.5).data().iter().all(|&b| b));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::<f32>::from_fn([50], |_| rng.random_range(0.0..1.0));
        assert!(binarize(&p, 0.0).data().iter().all(|&b| b));
        assert!(binarize(&p, 1.01).data().iter().all(|&b| !b));
        let m = binarize(&p, 0.3);
        for (v, b) in p.data().iter().zip(m.data()) {
            assert_eq!(*b, *v >= 0.3);
        }
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let cfg = tiny();
        let model = WeatherFusionNet::<f32>::init(cfg.clone(), 7).unwrap();
        let p = persistence_probabilities(&model, &seq(&cfg, 2, 6)).unwrap();
        assert_eq!(p.shape(), &[2, 5, 12, 12]);
        for l in 1..5 {
            assert_eq!(p.narrow(1, l, 1).unwrap(), p.narrow(1, 0, 1).unwrap());
        }
    }
}
