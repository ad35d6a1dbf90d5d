//! Encoder-decoder U-Net used for both sat2rad and fusion.
//!
//! Per level two (3x3 conv -> batch norm -> ReLU) blocks; 2x2/2 max pooling
//! between encoder levels; factor-2 bilinear upsampling, skip concatenation
//! and two more blocks on the way back up; a 1x1 projection emits logits.
//!
//! Parameter paths: `enc{l}.conv{1,2}`, `enc{l}.bn{1,2}`, `dec{l}.conv{1,2}`,
//! `dec{l}.bn{1,2}`, `head`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wfn_tensor::{ops, Float, Var};

use crate::error::{invalid, Result};
use crate::geometry::{center_crop_var, pad_replicate_var};
use crate::layers::{conv, conv_bn_relu};
use crate::params::{Initializer, ParameterTree, Session};

pub const DEFAULT_FILTERS: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub filters: Vec<usize>,
    /// Marks shrunken desk-scale networks.
    #[serde(default)]
    pub reduced: bool,
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            filters: DEFAULT_FILTERS.to_vec(),
            reduced: false,
        }
    }

    /// Narrower / shallower variant for tests and small-scale runs.
    pub fn reduced(in_channels: usize, out_channels: usize, filters: &[usize]) -> Self {
        Self {
            in_channels,
            out_channels,
            filters: filters.to_vec(),
            reduced: true,
        }
    }

    pub fn sat2rad() -> Self {
        Self::new(11, 1)
    }

    pub fn fusion() -> Self {
        Self::new(158, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() < 2 || self.filters.contains(&0) {
            return Err(invalid(format!(
                "U-Net needs at least two positive filter sizes, got {:?}",
                self.filters
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid("U-Net channel counts must be positive"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.filters.len() - 1)
    }
}

pub fn unet_init<T: Float>(config: &UNetConfig, seed: u64) -> Result<ParameterTree<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer { rng: &mut rng };
    let mut tree = ParameterTree::new();
    let f = &config.filters;
    let mut c_in = config.in_channels;
    for (l, &c) in f.iter().enumerate() {
        init.conv(&mut tree, &format!("enc{l}.conv1"), c_in, c, 3)?;
        init.batch_norm(&mut tree, &format!("enc{l}.bn1"), c)?;
        init.conv(&mut tree, &format!("enc{l}.conv2"), c, c, 3)?;
        init.batch_norm(&mut tree, &format!("enc{l}.bn2"), c)?;
        c_in = c;
    }
    for l in (0..f.len() - 1).rev() {
        init.conv(&mut tree, &format!("dec{l}.conv1"), f[l] + f[l + 1], f[l], 3)?;
        init.batch_norm(&mut tree, &format!("dec{l}.bn1"), f[l])?;
        init.conv(&mut tree, &format!("dec{l}.conv2"), f[l], f[l], 3)?;
        init.batch_norm(&mut tree, &format!("dec{l}.bn2"), f[l])?;
    }
    init.conv(&mut tree, "head", f[0], config.out_channels, 1)?;
    Ok(tree)
}

fn double_block<T: Float>(s: &Session<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let y = conv_bn_relu(s, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x)?;
    conv_bn_relu(s, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), &y)
}

/// `[B, C_in, H, W] -> [B, C_out, H, W]` logits.
pub fn unet_forward<T: Float>(s: &Session<T>, config: &UNetConfig, x: &Var<T>) -> Result<Var<T>> {
    config.validate()?;
    let (_, c, h, w) = x.value().dims4("unet_forward")?;
    if c != config.in_channels {
        return Err(invalid(format!(
            "U-Net expects {} input channels, got {c}",
            config.in_channels
        )));
    }
    let m = config.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(invalid(format!(
            "U-Net with {} levels needs sizes divisible by {m}, got {h}x{w}",
            config.filters.len()
        )));
    }
    let levels = config.filters.len();
    let mut skips = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for l in 0..levels {
        if l > 0 {
            cur = ops::max_pool2(&cur)?;
        }
        cur = double_block(s, &format!("enc{l}"), &cur)?;
        skips.push(cur.clone());
    }
    for l in (0..levels - 1).rev() {
        let up = ops::upsample_bilinear(&cur, 2)?;
        let cat = ops::concat(&[skips[l].clone(), up], 1)?;
        cur = double_block(s, &format!("dec{l}"), &cat)?;
    }
    conv(s, "head", &cur, 1, 0)
}

/// Replicate-pad by `pad`, run the U-Net, crop back to the input size.
pub fn unet_apply_padded<T: Float>(s: &Session<T>, config: &UNetConfig, x: &Var<T>, pad: usize) -> Result<Var<T>> {
    let (_, _, h, w) = x.value().dims4("unet_apply_padded")?;
    let y = unet_forward(s, config, &pad_replicate_var(x, pad)?)?;
    center_crop_var(&y, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{zero_layer, Mode};
    use wfn_tensor::Tensor;

    /// Learnable scalars counted layer by layer from the architecture
    /// description (3x3 convs with bias, two BN scalars per channel, 1x1 head).
    fn count_oracle(c_in: usize, c_out: usize, f: &[usize]) -> usize {
        let conv = |i: usize, o: usize, k: usize| k * k * i * o + o;
        let bn = |c: usize| 2 * c;
        let mut n = 0;
        let mut prev = c_in;
        for &c in f {
            n += conv(prev, c, 3) + bn(c) + conv(c, c, 3) + bn(c);
            prev = c;
        }
        for l in 0..f.len() - 1 {
            n += conv(f[l] + f[l + 1], f[l], 3) + bn(f[l]) + conv(f[l], f[l], 3) + bn(f[l]);
        }
        n + conv(f[0], c_out, 1)
    }

    #[test]
    fn parameter_count_matches_oracle() {
        let tree = unet_init::<f32>(&UNetConfig::sat2rad(), 0).unwrap();
        assert_eq!(tree.num_parameters(), count_oracle(11, 1, &DEFAULT_FILTERS));
        assert_eq!(tree.num_parameters(), 7_854_849);
        let tiny = unet_init::<f32>(&UNetConfig::reduced(3, 2, &[4, 8, 16]), 0).unwrap();
        assert_eq!(tiny.num_parameters(), count_oracle(3, 2, &[4, 8, 16]));
    }

    #[test]
    fn init_is_deterministic_and_weights_are_3x3_except_head() {
        let cfg = UNetConfig::reduced(2, 1, &[2, 4]);
        let a = unet_init::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, unet_init::<f32>(&cfg, 7).unwrap());
        assert_ne!(a, unet_init::<f32>(&cfg, 8).unwrap());
        for (path, t) in a.params().filter(|(p, _)| p.ends_with("weight") && p.contains("conv")) {
            assert_eq!(&t.shape()[2..], &[3, 3], "{path}");
        }
        assert_eq!(&a.tensor("head.weight").unwrap().shape()[2..], &[1, 1]);
        assert_eq!(a.tensor("enc0.bn1.running_var").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fusion_config_initialises() {
        let tree = unet_init::<f32>(&UNetConfig::fusion(), 1).unwrap();
        assert_eq!(tree.tensor("enc0.conv1.weight").unwrap().shape(), &[32, 158, 3, 3]);
        assert_eq!(tree.tensor("head.weight").unwrap().shape(), &[32, 32, 1, 1]);
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let cfg = UNetConfig::reduced(1, 1, &[2, 4]);
        let mut tree = unet_init::<f64>(&cfg, 3).unwrap();
        zero_layer(&mut tree, "head").unwrap();
        let s = Session::frozen(&tree);
        let y = unet_forward(&s, &cfg, &Var::constant(Tensor::zeros([1, 1, 8, 8]))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let cfg = UNetConfig::reduced(2, 1, &[2, 4, 8]);
        let tree = unet_init::<f32>(&cfg, 0).unwrap();
        let s = Session::frozen(&tree);
        let bad_size = Var::constant(Tensor::zeros([1, 2, 6, 8]));
        assert!(unet_forward(&s, &cfg, &bad_size).unwrap_err().is_invalid_argument());
        let bad_chan = Var::constant(Tensor::zeros([1, 3, 8, 8]));
        assert!(unet_forward(&s, &cfg, &bad_chan).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let cfg = UNetConfig::reduced(1, 1, &[2, 4]);
        let mut tree = unet_init::<f32>(&cfg, 0).unwrap();
        let x = Var::constant(Tensor::from_fn([2, 1, 8, 8], |i| (i % 5) as f32));
        let before = tree.clone();
        let s = Session::new(&tree, Mode::Eval, false);
        unet_forward(&s, &cfg, &x).unwrap();
        assert!(s.take_buffer_updates().is_empty());
        let s = Session::new(&tree, Mode::Train, true);
        unet_forward(&s, &cfg, &x).unwrap();
        let updates = s.take_buffer_updates();
        assert_eq!(updates.len(), 12);
        tree.apply_buffer_updates(updates).unwrap();
        assert_ne!(tree.tensor("enc0.bn1.running_mean").unwrap(), before.tensor("enc0.bn1.running_mean").unwrap());
    }
}
