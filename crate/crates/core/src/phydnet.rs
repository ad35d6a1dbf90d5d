//! Satellite-frame extrapolation with a two-branch recurrent network.
//!
//! Frames are encoded to a latent grid; a physically constrained cell
//! (PhyCell) and a ConvLSTM stack each predict the next latent, the two
//! predictions are summed and decoded back to a frame.
//!
//! PhyCell keeps a `Q = k*k` channel state. Its transition `h + Phi(h)`
//! applies one shared bank of `Q` filters (`k x k`) to every state channel
//! and mixes the `Q*Q` responses back to `Q` channels with a 1x1 conv. The
//! moment penalty pushes filter `q = a*k + b` towards a finite-difference
//! stencil for the `(a, b)` partial derivative. Observations correct the
//! prediction through a sigmoid gain: `h' = h~ + K * (E(z) - h~)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wfn_tensor::{ops, Float, Tensor, Var};

use crate::error::{invalid, Result};
use crate::layers::{conv, conv_same};
use crate::params::{Initializer, ParameterTree, Session};

const LEAKY_SLOPE: f64 = 0.2;
const GATE_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhyDNetConfig {
    pub latent_channels: usize,
    pub phycell_hidden: Vec<usize>,
    pub phycell_kernel: [usize; 2],
    pub convlstm_hidden: Vec<usize>,
    pub convlstm_kernel: [usize; 2],
    pub input_len: usize,
    pub output_len: usize,
    pub frame_channels: usize,
    /// Spatial reduction of the encoder; a power of two.
    pub encoder_downscale: usize,
}

impl Default for PhyDNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 64,
            phycell_hidden: vec![49],
            phycell_kernel: [7, 7],
            convlstm_hidden: vec![128, 128, 64],
            convlstm_kernel: [3, 3],
            input_len: 4,
            output_len: 10,
            frame_channels: 11,
            encoder_downscale: 4,
        }
    }
}

impl PhyDNetConfig {
    pub fn validate(&self) -> Result<()> {
        let [kh, kw] = self.phycell_kernel;
        if kh != kw || kh % 2 == 0 {
            return Err(invalid(format!("PhyCell kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.phycell_hidden != [kh * kw] {
            return Err(invalid(format!(
                "PhyCell takes a single layer with one state channel per moment ({}), got {:?}",
                kh * kw,
                self.phycell_hidden
            )));
        }
        let [lh, lw] = self.convlstm_kernel;
        if lh != lw || lh % 2 == 0 {
            return Err(invalid(format!("ConvLSTM kernel must be odd and square, got {lh}x{lw}")));
        }
        match self.convlstm_hidden.last() {
            Some(&last) if last == self.latent_channels && !self.convlstm_hidden.contains(&0) => {}
            _ => {
                return Err(invalid(format!(
                    "ConvLSTM widths {:?} must be positive and end at the latent width {}",
                    self.convlstm_hidden, self.latent_channels
                )))
            }
        }
        if self.latent_channels < 2 || self.frame_channels == 0 {
            return Err(invalid("latent width must be >= 2 and frames need channels"));
        }
        if self.input_len == 0 || self.output_len == 0 {
            return Err(invalid("sequence lengths must be positive"));
        }
        if !self.encoder_downscale.is_power_of_two() {
            return Err(invalid(format!(
                "encoder downscale must be a power of two, got {}",
                self.encoder_downscale
            )));
        }
        Ok(())
    }

    /// Number of PhyCell state channels (= derivative filters).
    pub fn moments(&self) -> usize {
        self.phycell_hidden[0]
    }

    fn stages(&self) -> usize {
        self.encoder_downscale.trailing_zeros() as usize
    }

    fn mid_channels(&self) -> usize {
        (self.latent_channels / 2).max(1)
    }

    pub fn latent_size(&self, frame_h: usize, frame_w: usize) -> Result<(usize, usize)> {
        let d = self.encoder_downscale;
        if frame_h % d != 0 || frame_w % d != 0 {
            return Err(invalid(format!(
                "frame {frame_h}x{frame_w} not divisible by encoder downscale {d}"
            )));
        }
        Ok((frame_h / d, frame_w / d))
    }
}

pub fn phydnet_init<T: Float>(config: &PhyDNetConfig, seed: u64) -> Result<ParameterTree<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer { rng: &mut rng };
    let mut tree = ParameterTree::new();
    let c = config.latent_channels;
    let mid = config.mid_channels();
    let stages = config.stages();

    init.conv(&mut tree, "encoder.conv0", config.frame_channels, mid, 3)?;
    for i in 0..stages {
        init.conv(&mut tree, &format!("encoder.down{i}"), if i == 0 { mid } else { c }, c, 3)?;
    }
    init.conv(&mut tree, "encoder.out", if stages == 0 { mid } else { c }, c, 3)?;

    init.conv(&mut tree, "decoder.in", c, c, 3)?;
    for i in 0..stages {
        init.conv(&mut tree, &format!("decoder.up{i}"), if i == 0 { c } else { mid }, mid, 3)?;
    }
    init.conv(&mut tree, "decoder.out", if stages == 0 { c } else { mid }, config.frame_channels, 3)?;

    let q = config.moments();
    let k = config.phycell_kernel[0];
    init.conv_no_bias(&mut tree, "phycell.bank", 1, q, k)?;
    init.conv(&mut tree, "phycell.mix", q * q, q, 1)?;
    init.conv(&mut tree, "phycell.obs", c, q, 1)?;
    init.conv(&mut tree, "phycell.gate", 2 * q, q, GATE_KERNEL)?;
    init.conv(&mut tree, "phycell.proj", q, c, 1)?;

    let lk = config.convlstm_kernel[0];
    let mut input = c;
    for (l, &hid) in config.convlstm_hidden.iter().enumerate() {
        init.conv(&mut tree, &format!("convlstm.{l}"), input + hid, 4 * hid, lk)?;
        input = hid;
    }
    Ok(tree)
}

fn lrelu<T: Float>(x: &Var<T>) -> Var<T> {
    ops::leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
}

/// `[B, frame_channels, H, W] -> [B, latent, H/d, W/d]`.
pub fn encode<T: Float>(s: &Session<T>, config: &PhyDNetConfig, frame: &Var<T>) -> Result<Var<T>> {
    let (_, ch, h, w) = frame.value().dims4("encode")?;
    if ch != config.frame_channels {
        return Err(invalid(format!("encoder expects {} channels, got {ch}", config.frame_channels)));
    }
    config.latent_size(h, w)?;
    let mut x = lrelu(&conv(s, "encoder.conv0", frame, 1, 1)?);
    for i in 0..config.stages() {
        x = lrelu(&conv(s, &format!("encoder.down{i}"), &x, 2, 1)?);
    }
    conv(s, "encoder.out", &x, 1, 1)
}

/// `[B, latent, h, w] -> [B, frame_channels, h*d, w*d]`; no output activation.
pub fn decode<T: Float>(s: &Session<T>, config: &PhyDNetConfig, latent: &Var<T>) -> Result<Var<T>> {
    let (_, ch, _, _) = latent.value().dims4("decode")?;
    if ch != config.latent_channels {
        return Err(invalid(format!("decoder expects {} channels, got {ch}", config.latent_channels)));
    }
    let mut x = lrelu(&conv(s, "decoder.in", latent, 1, 1)?);
    for i in 0..config.stages() {
        x = ops::upsample_bilinear(&x, 2)?;
        x = lrelu(&conv(s, &format!("decoder.up{i}"), &x, 1, 1)?);
    }
    conv(s, "decoder.out", &x, 1, 1)
}

/// Latent physical state `[B, Q, h, w]`.
#[derive(Clone, Debug)]
pub struct PhyCellState<T: Float> {
    pub h: Var<T>,
}

/// Hidden and cell state per ConvLSTM layer.
#[derive(Clone, Debug)]
pub struct ConvLSTMState<T: Float> {
    pub layers: Vec<(Var<T>, Var<T>)>,
}

impl<T: Float> PhyCellState<T> {
    pub fn zeros(config: &PhyDNetConfig, batch: usize, h: usize, w: usize) -> Self {
        Self {
            h: Var::constant(Tensor::zeros([batch, config.moments(), h, w])),
        }
    }
}

impl<T: Float> ConvLSTMState<T> {
    pub fn zeros(config: &PhyDNetConfig, batch: usize, h: usize, w: usize) -> Self {
        Self {
            layers: config
                .convlstm_hidden
                .iter()
                .map(|&c| {
                    let z = Var::constant(Tensor::zeros([batch, c, h, w]));
                    (z.clone(), z)
                })
                .collect(),
        }
    }
}

/// Prior `h + Phi(h)`.
pub fn phycell_predict<T: Float>(s: &Session<T>, config: &PhyDNetConfig, h: &Var<T>) -> Result<Var<T>> {
    let (b, q, hh, ww) = h.value().dims4("phycell")?;
    if q != config.moments() {
        return Err(invalid(format!("PhyCell state has {q} channels, expected {}", config.moments())));
    }
    let planes = ops::reshape(h, &[b * q, 1, hh, ww])?;
    let responses = conv_same(s, "phycell.bank", &planes)?;
    let responses = ops::reshape(&responses, &[b, q * q, hh, ww])?;
    let phi = conv(s, "phycell.mix", &responses, 1, 0)?;
    Ok(ops::add(h, &phi)?)
}

/// Sigmoid gain `K = sigma(conv([E(z), h_prev]))` and the projected observation `E(z)`.
fn phycell_gain<T: Float>(s: &Session<T>, h_prev: &Var<T>, obs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let e = conv(s, "phycell.obs", obs, 1, 0)?;
    let gate_in = ops::concat(&[e.clone(), h_prev.clone()], 1)?;
    let k = ops::sigmoid(&conv_same(s, "phycell.gate", &gate_in)?);
    Ok((k, e))
}

/// Corrected state `h~ + K * (E(z) - h~)`.
pub fn phycell_correct<T: Float>(s: &Session<T>, h_prev: &Var<T>, prior: &Var<T>, obs: &Var<T>) -> Result<Var<T>> {
    if obs.shape()[2..] != prior.shape()[2..] || obs.shape()[0] != prior.shape()[0] {
        return Err(invalid(format!(
            "observation {:?} does not match PhyCell state {:?}",
            obs.shape(),
            prior.shape()
        )));
    }
    let (k, e) = phycell_gain(s, h_prev, obs)?;
    let innovation = ops::sub(&e, prior)?;
    Ok(ops::add(prior, &ops::mul(&k, &innovation)?)?)
}

/// One predictor-corrector step. Returns the new state and the prior
/// projected back to latent width. Without an observation the prior is
/// carried forward unchanged.
pub fn phycell_step<T: Float>(
    s: &Session<T>,
    config: &PhyDNetConfig,
    state: &PhyCellState<T>,
    obs: Option<&Var<T>>,
) -> Result<(PhyCellState<T>, Var<T>)> {
    let prior = phycell_predict(s, config, &state.h)?;
    let pred = conv(s, "phycell.proj", &prior, 1, 0)?;
    let h = match obs {
        Some(z) => phycell_correct(s, &state.h, &prior, z)?,
        None => prior,
    };
    Ok((PhyCellState { h }, pred))
}

/// Advances every ConvLSTM layer by one step; returns the top layer's hidden state.
pub fn convlstm_step<T: Float>(
    s: &Session<T>,
    config: &PhyDNetConfig,
    state: &ConvLSTMState<T>,
    x: &Var<T>,
) -> Result<(ConvLSTMState<T>, Var<T>)> {
    if state.layers.len() != config.convlstm_hidden.len() {
        return Err(invalid("ConvLSTM state depth does not match config"));
    }
    let mut input = x.clone();
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, ((h, c), &hid)) in state.layers.iter().zip(&config.convlstm_hidden).enumerate() {
        if h.shape()[1] != hid || h.shape()[2..] != input.shape()[2..] {
            return Err(invalid(format!(
                "ConvLSTM layer {l}: state {:?} incompatible with input {:?}",
                h.shape(),
                input.shape()
            )));
        }
        let gates = conv_same(s, &format!("convlstm.{l}"), &ops::concat(&[input.clone(), h.clone()], 1)?)?;
        let i = ops::sigmoid(&ops::narrow(&gates, 1, 0, hid)?);
        let f = ops::sigmoid(&ops::narrow(&gates, 1, hid, hid)?);
        let o = ops::sigmoid(&ops::narrow(&gates, 1, 2 * hid, hid)?);
        let g = ops::tanh(&ops::narrow(&gates, 1, 3 * hid, hid)?);
        let c_next = ops::add(&ops::mul(&f, c)?, &ops::mul(&i, &g)?)?;
        let h_next = ops::mul(&o, &ops::tanh(&c_next))?;
        input = h_next.clone();
        layers.push((h_next, c_next));
    }
    Ok((ConvLSTMState { layers }, input))
}

/// `M[a, b] = 1/(a! b!) * sum_ij k[i, j] (i - c)^a (j - c)^b` with `c` the kernel center.
pub fn moment_matrix(kernel: &Tensor<f64>) -> Result<Tensor<f64>> {
    let k = match kernel.shape() {
        &[h, w] if h == w && h % 2 == 1 => h,
        s => return Err(invalid(format!("moment matrix needs an odd square kernel, got {s:?}"))),
    };
    let v = moment_basis(k);
    let kd = kernel.data();
    let mut m = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    acc += v[a * k + i] * kd[i * k + j] * v[b * k + j];
                }
            }
            m[a * k + b] = acc;
        }
    }
    Ok(Tensor::new([k, k], m)?)
}

/// `V[a, i] = (i - c)^a / a!` so that `M = V K V^T`.
fn moment_basis(k: usize) -> Vec<f64> {
    let c = (k / 2) as f64;
    let mut v = vec![0.0; k * k];
    let mut fact = 1.0;
    for a in 0..k {
        if a > 0 {
            fact *= a as f64;
        }
        for i in 0..k {
            v[a * k + i] = (i as f64 - c).powi(a as i32) / fact;
        }
    }
    v
}

/// `sum_q ||M(k_q) - onehot(q)||_F^2` over a `[Q, 1, k, k]` bank with `Q = k*k`.
pub fn moment_loss_var<T: Float>(bank: &Var<T>) -> Result<Var<T>> {
    let (q, one, k, k2) = bank.value().dims4("moment_loss")?;
    if one != 1 || k != k2 || q != k * k {
        return Err(invalid(format!("moment bank must be [k*k, 1, k, k], got {:?}", bank.shape())));
    }
    let v = moment_basis(k);
    // residual R_q = V K_q V^T - D_q
    let residuals: Vec<Vec<f64>> = (0..q)
        .map(|f| {
            let kd = &bank.value().data()[f * k * k..(f + 1) * k * k];
            (0..k * k)
                .map(|ab| {
                    let (a, b) = (ab / k, ab % k);
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += v[a * k + i] * kd[i * k + j].as_f64() * v[b * k + j];
                        }
                    }
                    acc - if ab == f { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let total: f64 = residuals.iter().flatten().map(|r| r * r).sum();
    Ok(Var::from_op(Tensor::scalar(T::from_f64_lossy(total)), vec![bank.clone()], move |g, _, p| {
        let s = g.item().as_f64();
        let mut grad = Vec::with_capacity(q * k * k);
        for r in &residuals {
            // dL/dK = 2 V^T R V
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            acc += v[a * k + i] * r[a * k + b] * v[b * k + j];
                        }
                    }
                    grad.push(T::from_f64_lossy(2.0 * s * acc));
                }
            }
        }
        vec![Some(Tensor::new(p[0].shape().to_vec(), grad).expect("moment grad"))]
    }))
}

/// Moment penalty of the PhyCell filter bank in `params`.
pub fn moment_loss<T: Float>(params: &ParameterTree<T>) -> Result<f64> {
    let bank = Var::constant(params.tensor("phycell.bank.weight")?.clone());
    Ok(moment_loss_var(&bank)?.value().item().as_f64())
}

/// Probability of feeding ground truth instead of the model's own output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingSchedule {
    pub start_prob: f64,
    pub decay_per_step: f64,
    pub floor: f64,
}

impl Default for TeacherForcingSchedule {
    fn default() -> Self {
        Self {
            start_prob: 1.0,
            decay_per_step: 5e-5,
            floor: 0.0,
        }
    }
}

/// `max(floor, start - decay * step)`, clamped to `[0, 1]`.
pub fn tf_probability(schedule: &TeacherForcingSchedule, step: u64) -> f64 {
    (schedule.start_prob - schedule.decay_per_step * step as f64)
        .max(schedule.floor)
        .clamp(0.0, 1.0)
}

/// Everything a rollout carries between steps.
#[derive(Clone, Debug)]
pub struct RolloutState<T: Float> {
    pub phycell: PhyCellState<T>,
    pub convlstm: ConvLSTMState<T>,
    /// Latent of the most recent frame, the ConvLSTM's next input.
    pub last_latent: Var<T>,
}

/// Frame `t` of a `[B, T, C, H, W]` sequence as `[B, C, H, W]`.
pub fn frame_at<T: Float>(seq: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    match seq.shape() {
        &[b, _, c, h, w] => Ok(seq.narrow(1, t, 1)?.reshape([b, c, h, w])?),
        s => Err(invalid(format!("expected [B,T,C,H,W] sequence, got {s:?}"))),
    }
}

fn check_sequence(seq: &Tensor<impl Float>, len: usize, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    match seq.shape() {
        &[b, t, c, h, w] if t == len && c == channels => Ok((b, h, w)),
        s => Err(invalid(format!(
            "{what}: expected [B,{len},{channels},H,W], got {s:?}"
        ))),
    }
}

struct StepOutput<T: Float> {
    prior: Var<T>,
    convlstm: ConvLSTMState<T>,
    latent_pred: Var<T>,
}

fn predict_step<T: Float>(s: &Session<T>, config: &PhyDNetConfig, state: &RolloutState<T>) -> Result<StepOutput<T>> {
    let prior = phycell_predict(s, config, &state.phycell.h)?;
    let physical = conv(s, "phycell.proj", &prior, 1, 0)?;
    let (convlstm, residual) = convlstm_step(s, config, &state.convlstm, &state.last_latent)?;
    Ok(StepOutput {
        prior,
        convlstm,
        latent_pred: ops::add(&physical, &residual)?,
    })
}

fn assimilate<T: Float>(s: &Session<T>, state: &RolloutState<T>, step: StepOutput<T>, latent: Var<T>) -> Result<RolloutState<T>> {
    let h = phycell_correct(s, &state.phycell.h, &step.prior, &latent)?;
    Ok(RolloutState {
        phycell: PhyCellState { h },
        convlstm: step.convlstm,
        last_latent: latent,
    })
}

/// Consumes the observed input frames `[B, input_len, C, H, W]`.
pub fn warm_up<T: Float>(s: &Session<T>, config: &PhyDNetConfig, input_seq: &Tensor<T>) -> Result<RolloutState<T>> {
    config.validate()?;
    let (b, h, w) = check_sequence(input_seq, config.input_len, config.frame_channels, "PhyDNet input")?;
    let (lh, lw) = config.latent_size(h, w)?;
    let mut state = RolloutState {
        phycell: PhyCellState::zeros(config, b, lh, lw),
        convlstm: ConvLSTMState::zeros(config, b, lh, lw),
        last_latent: Var::constant(Tensor::zeros([b, config.latent_channels, lh, lw])),
    };
    for t in 0..config.input_len {
        let step = predict_step(s, config, &state)?;
        let z = encode(s, config, &Var::constant(frame_at(input_seq, t)?))?;
        state = assimilate(s, &state, step, z)?;
    }
    Ok(state)
}

/// Rolls `steps` frames forward from `state`.
///
/// At each step the next input is, with probability `tf_prob`, the encoded
/// teacher frame and otherwise the encoding of the model's own decoded
/// prediction. A Bernoulli draw is consumed only when `0 < tf_prob < 1`.
pub fn forecast<T: Float, R: Rng>(
    s: &Session<T>,
    config: &PhyDNetConfig,
    mut state: RolloutState<T>,
    steps: usize,
    teacher: Option<&Tensor<T>>,
    tf_prob: f64,
    rng: &mut R,
) -> Result<(RolloutState<T>, Vec<Var<T>>)> {
    if !(0.0..=1.0).contains(&tf_prob) {
        return Err(invalid(format!("teacher forcing probability {tf_prob} outside [0, 1]")));
    }
    if tf_prob > 0.0 {
        let teacher = teacher.ok_or_else(|| invalid("teacher frames required when tf_prob > 0"))?;
        check_sequence(teacher, steps, config.frame_channels, "teacher")?;
    }
    let mut frames = Vec::with_capacity(steps);
    for t in 0..steps {
        let step = predict_step(s, config, &state)?;
        let frame = decode(s, config, &step.latent_pred)?;
        let forced = match teacher {
            Some(_) if tf_prob >= 1.0 => true,
            Some(_) if tf_prob > 0.0 => rng.random_bool(tf_prob),
            _ => false,
        };
        let next_frame = if forced {
            Var::constant(frame_at(teacher.expect("checked above"), t)?)
        } else {
            frame.clone()
        };
        let z = encode(s, config, &next_frame)?;
        state = assimilate(s, &state, step, z)?;
        frames.push(frame);
    }
    Ok((state, frames))
}

/// Stacks `[B, C, H, W]` frames into `[B, T, C, H, W]`.
pub fn stack_frames<T: Float>(frames: &[Var<T>]) -> Result<Var<T>> {
    let parts = frames
        .iter()
        .map(|f| {
            let mut shape = f.shape().to_vec();
            shape.insert(1, 1);
            ops::reshape(f, &shape)
        })
        .collect::<wfn_tensor::Result<Vec<_>>>()?;
    Ok(ops::concat(&parts, 1)?)
}

/// Input `[B, input_len, C, H, W]` to predictions `[B, target_len, C, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn phydnet_forward<T: Float, R: Rng>(
    s: &Session<T>,
    config: &PhyDNetConfig,
    input_seq: &Tensor<T>,
    target_len: usize,
    teacher: Option<&Tensor<T>>,
    tf_prob: f64,
    rng: &mut R,
) -> Result<Var<T>> {
    if !(0.0..=1.0).contains(&tf_prob) {
        return Err(invalid(format!("teacher forcing probability {tf_prob} outside [0, 1]")));
    }
    if tf_prob > 0.0 && teacher.is_none() {
        return Err(invalid("teacher frames required when tf_prob > 0"));
    }
    let state = warm_up(s, config, input_seq)?;
    let (_, frames) = forecast(s, config, state, target_len, teacher, tf_prob, rng)?;
    stack_frames(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{zero_layer, Mode};

    pub(crate) fn tiny() -> PhyDNetConfig {
        PhyDNetConfig {
            latent_channels: 4,
            phycell_hidden: vec![9],
            phycell_kernel: [3, 3],
            convlstm_hidden: vec![4],
            convlstm_kernel: [3, 3],
            input_len: 2,
            output_len: 3,
            frame_channels: 2,
            encoder_downscale: 2,
        }
    }

    fn seq(b: usize, t: usize, c: usize, h: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, t, c, h, h], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = PhyDNetConfig::default();
        assert_eq!(c.latent_channels, 64);
        assert_eq!(c.convlstm_hidden, vec![128, 128, 64]);
        assert_eq!(c.phycell_hidden, vec![49]);
        assert_eq!(c.phycell_kernel, [7, 7]);
        assert_eq!(c.convlstm_kernel, [3, 3]);
        assert_eq!(c.input_len + c.output_len, 14);
        c.validate().unwrap();
    }

    #[test]
    fn encoder_decoder_shapes() {
        let cfg = tiny();
        let tree = phydnet_init::<f64>(&cfg, 0).unwrap();
        let s = Session::frozen(&tree);
        let x = Var::constant(seq(2, 1, 2, 16, 1).reshape([2, 2, 16, 16]).unwrap());
        let z = encode(&s, &cfg, &x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 8, 8]);
        assert_eq!(decode(&s, &cfg, &z).unwrap().shape(), x.shape());
        let bad = Var::constant(Tensor::zeros([1, 3, 16, 16]));
        assert!(encode(&s, &cfg, &bad).unwrap_err().is_invalid_argument());
        assert!(decode(&s, &cfg, &x).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn zero_final_layers_give_zero_outputs() {
        let cfg = tiny();
        let mut tree = phydnet_init::<f64>(&cfg, 0).unwrap();
        zero_layer(&mut tree, "encoder.out").unwrap();
        zero_layer(&mut tree, "decoder.out").unwrap();
        let s = Session::frozen(&tree);
        let z = encode(&s, &cfg, &Var::constant(Tensor::zeros([1, 2, 16, 16]))).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        let f = decode(&s, &cfg, &Var::constant(Tensor::zeros([1, 4, 8, 8]))).unwrap();
        assert!(f.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dynamics_without_observation() {
        let cfg = tiny();
        let mut tree = phydnet_init::<f64>(&cfg, 0).unwrap();
        zero_layer(&mut tree, "phycell.mix").unwrap();
        let s = Session::frozen(&tree);
        let h = Var::constant(seq(1, 1, 9, 8, 2).reshape([1, 9, 8, 8]).unwrap());
        let (next, _) = phycell_step(&s, &cfg, &PhyCellState { h: h.clone() }, None).unwrap();
        assert_eq!(next.h.value(), h.value());
    }

    #[test]
    fn saturated_gain_trusts_observation() {
        let cfg = tiny();
        let mut tree = phydnet_init::<f64>(&cfg, 0).unwrap();
        zero_layer(&mut tree, "phycell.gate").unwrap();
        tree.tensor_mut("phycell.gate.bias").unwrap().data_mut().fill(1e3);
        let s = Session::frozen(&tree);
        let h = Var::constant(seq(1, 1, 9, 8, 3).reshape([1, 9, 8, 8]).unwrap());
        let z = Var::constant(seq(1, 1, 4, 8, 4).reshape([1, 4, 8, 8]).unwrap());
        let (next, _) = phycell_step(&s, &cfg, &PhyCellState { h }, Some(&z)).unwrap();
        let e = conv(&s, "phycell.obs", &z, 1, 0).unwrap();
        for (a, b) in next.h.value().data().iter().zip(e.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Direct-loop 'same' convolution used by the straight-line oracles.
    fn conv_ref(x: &[f64], c_in: usize, h: usize, w: usize, wt: &[f64], bias: Option<&[f64]>, c_out: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize] * wt[((o * c_in + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn phycell_step_matches_straight_line_oracle() {
        let cfg = tiny();
        let tree = phydnet_init::<f64>(&cfg, 11).unwrap();
        let s = Session::frozen(&tree);
        let (q, c, n) = (9, 4, 8);
        let h0 = seq(1, 1, q, n, 5).reshape([1, q, n, n]).unwrap();
        let z0 = seq(1, 1, c, n, 6).reshape([1, c, n, n]).unwrap();
        let (next, pred) = phycell_step(
            &s,
            &cfg,
            &PhyCellState { h: Var::constant(h0.clone()) },
            Some(&Var::constant(z0.clone())),
        )
        .unwrap();

        let p = |name: &str| tree.tensor(name).unwrap().data().to_vec();
        let hd = h0.data();
        // derivative responses: every state channel against every bank filter
        let mut resp = Vec::new();
        for ch in 0..q {
            resp.extend(conv_ref(&hd[ch * n * n..(ch + 1) * n * n], 1, n, n, &p("phycell.bank.weight"), None, q, 3));
        }
        let phi = conv_ref(&resp, q * q, n, n, &p("phycell.mix.weight"), Some(&p("phycell.mix.bias")), q, 1);
        let prior: Vec<f64> = hd.iter().zip(&phi).map(|(a, b)| a + b).collect();
        let e = conv_ref(z0.data(), c, n, n, &p("phycell.obs.weight"), Some(&p("phycell.obs.bias")), q, 1);
        let mut gate_in = e.clone();
        gate_in.extend_from_slice(hd);
        let gate = conv_ref(&gate_in, 2 * q, n, n, &p("phycell.gate.weight"), Some(&p("phycell.gate.bias")), q, 3);
        let corrected: Vec<f64> = (0..prior.len())
            .map(|i| {
                let k = 1.0 / (1.0 + (-gate[i]).exp());
                prior[i] + k * (e[i] - prior[i])
            })
            .collect();
        let proj = conv_ref(&prior, q, n, n, &p("phycell.proj.weight"), Some(&p("phycell.proj.bias")), c, 1);

        for (a, b) in next.h.value().data().iter().zip(&corrected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (a, b) in pred.value().data().iter().zip(&proj) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn convlstm_zero_everything_is_zero() {
        let cfg = tiny();
        let mut tree = phydnet_init::<f64>(&cfg, 0).unwrap();
        tree.tensor_mut("convlstm.0.bias").unwrap().data_mut().fill(0.0);
        let s = Session::frozen(&tree);
        let state = ConvLSTMState::zeros(&cfg, 1, 8, 8);
        let (_, out) = convlstm_step(&s, &cfg, &state, &Var::constant(Tensor::zeros([1, 4, 8, 8]))).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_matches_scalar_lstm() {
        let cfg = PhyDNetConfig {
            latent_channels: 2,
            convlstm_hidden: vec![1, 2],
            ..tiny()
        };
        // single 1-channel cell: use the first layer of a two-layer stack
        let tree = phydnet_init::<f64>(&cfg, 9).unwrap();
        let s = Session::frozen(&tree);
        let (x, h0, c0) = (0.7, -0.3, 0.45);
        let state = ConvLSTMState {
            layers: vec![
                (Var::constant(Tensor::full([1, 1, 1, 1], h0)), Var::constant(Tensor::full([1, 1, 1, 1], c0))),
                (Var::constant(Tensor::zeros([1, 2, 1, 1])), Var::constant(Tensor::zeros([1, 2, 1, 1]))),
            ],
        };
        let input = Var::constant(Tensor::new([1, 2, 1, 1], vec![x, -1.1]).unwrap());
        let (next, _) = convlstm_step(&s, &cfg, &state, &input).unwrap();

        let w = tree.tensor("convlstm.0.weight").unwrap();
        let b = tree.tensor("convlstm.0.bias").unwrap().data();
        // weight [4, 3, 3, 3]: only the center tap sees a 1x1 input
        let center = |gate: usize, ch: usize| w.data()[((gate * 3 + ch) * 3 + 1) * 3 + 1];
        let pre = |gate: usize| center(gate, 0) * x + center(gate, 1) * -1.1 + center(gate, 2) * h0 + b[gate];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (i, f, o, g) = (sig(pre(0)), sig(pre(1)), sig(pre(2)), pre(3).tanh());
        let c1 = f * c0 + i * g;
        let h1 = o * c1.tanh();
        assert!((next.layers[0].1.value().item() - c1).abs() < 1e-12);
        assert!((next.layers[0].0.value().item() - h1).abs() < 1e-12);
    }

    #[test]
    fn default_convlstm_state_widths() {
        let cfg = PhyDNetConfig::default();
        let st = ConvLSTMState::<f32>::zeros(&cfg, 1, 63, 63);
        let widths: Vec<_> = st.layers.iter().map(|(h, _)| h.shape()[1]).collect();
        assert_eq!(widths, vec![128, 128, 64]);
        assert_eq!(st.layers[0].0.shape()[2..], [63, 63]);
    }

    /// Double-loop evaluation of the moment formula.
    fn moment_oracle(k: &[f64], n: usize) -> Vec<f64> {
        let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>();
        let c = (n / 2) as f64;
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += k[i * n + j] * (i as f64 - c).powi(a as i32) * (j as f64 - c).powi(b as i32);
                    }
                }
                out[a * n + b] = s / (fact(a) * fact(b));
            }
        }
        out
    }

    #[test]
    fn moment_matrix_cases() {
        let mut delta = Tensor::zeros([7, 7]);
        delta.data_mut()[24] = 1.0;
        let m = moment_matrix(&delta).unwrap();
        assert_eq!(m.data()[0], 1.0);
        assert!(m.data()[1..].iter().all(|&v| v == 0.0));
        assert!(moment_matrix(&Tensor::zeros([7, 7])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(moment_matrix(&Tensor::zeros([6, 6])).unwrap_err().is_invalid_argument());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::from_fn([7, 7], |_| rng.random_range(-1.0..1.0));
        let want = moment_oracle(k.data(), 7);
        for (a, b) in moment_matrix(&k).unwrap().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn moment_loss_cases() {
        let zeros = Var::constant(Tensor::<f64>::zeros([49, 1, 7, 7]));
        assert_eq!(moment_loss_var(&zeros).unwrap().value().item(), 49.0);

        // Filters solving M(k_q) = onehot(q): K = V^-1 D V^-T.
        let k = 3;
        let v = moment_basis(k);
        let vinv = invert3(&v);
        let mut bank = Vec::new();
        for q in 0..9 {
            let (a, b) = (q / 3, q % 3);
            for i in 0..3 {
                for j in 0..3 {
                    bank.push(vinv[i * 3 + a] * vinv[j * 3 + b]);
                }
            }
        }
        let exact = Var::constant(Tensor::new([9, 1, 3, 3], bank).unwrap());
        assert!(moment_loss_var(&exact).unwrap().value().item() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rand = Tensor::from_fn([49, 1, 7, 7], |_| rng.random_range(-0.2..0.2));
        let mut want = 0.0;
        for q in 0..49 {
            let m = moment_oracle(&rand.data()[q * 49..(q + 1) * 49], 7);
            for (ab, v) in m.iter().enumerate() {
                let t = if ab == q { 1.0 } else { 0.0 };
                want += (v - t).powi(2);
            }
        }
        let got = moment_loss_var(&Var::constant(rand)).unwrap().value().item();
        assert!((got - want).abs() < 1e-9 * want);
    }

    fn invert3(m: &[f64]) -> Vec<f64> {
        let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
        let cof = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        cof.iter().map(|c| c / det).collect()
    }

    #[test]
    fn schedule_values() {
        let s = TeacherForcingSchedule::default();
        assert_eq!(tf_probability(&s, 0), 1.0);
        assert!((tf_probability(&s, 10_000) - 0.5).abs() < 1e-12);
        assert_eq!(tf_probability(&s, 20_000), 0.0);
        assert_eq!(tf_probability(&s, 1_000_000), 0.0);
    }

    #[test]
    fn forward_shapes_and_teacher_contract() {
        let cfg = tiny();
        let tree = phydnet_init::<f64>(&cfg, 1).unwrap();
        let s = Session::frozen(&tree);
        let input = seq(2, 2, 2, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = phydnet_forward(&s, &cfg, &input, 3, None, 0.0, &mut rng).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2, 16, 16]);
        let teacher = seq(2, 3, 2, 16, 8);
        let with = phydnet_forward(&s, &cfg, &input, 3, Some(&teacher), 0.0, &mut rng).unwrap();
        assert_eq!(with.value(), out.value());
        assert!(phydnet_forward(&s, &cfg, &input, 3, None, 0.5, &mut rng).unwrap_err().is_invalid_argument());
        assert!(phydnet_forward(&s, &cfg, &seq(2, 3, 2, 16, 1), 3, None, 0.0, &mut rng).is_err());
    }

    #[test]
    fn replaying_own_rollout_as_teacher_reproduces_it() {
        let cfg = tiny();
        let tree = phydnet_init::<f64>(&cfg, 2).unwrap();
        let s = Session::frozen(&tree);
        let input = seq(1, 2, 2, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let free = phydnet_forward(&s, &cfg, &input, 4, None, 0.0, &mut rng).unwrap();
        let replay = phydnet_forward(&s, &cfg, &input, 4, Some(free.value()), 1.0, &mut rng).unwrap();
        assert_eq!(replay.value(), free.value());
    }

    #[test]
    fn rollout_state_threads_losslessly() {
        let cfg = tiny();
        let tree = phydnet_init::<f64>(&cfg, 3).unwrap();
        let s = Session::new(&tree, Mode::Eval, false);
        let input = seq(1, 2, 2, 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = warm_up(&s, &cfg, &input).unwrap();
        let (_, all) = forecast(&s, &cfg, state.clone(), 10, None, 0.0, &mut rng).unwrap();
        let (mid, first) = forecast(&s, &cfg, state, 5, None, 0.0, &mut rng).unwrap();
        let (_, second) = forecast(&s, &cfg, mid, 5, None, 0.0, &mut rng).unwrap();
        for (a, b) in all.iter().zip(first.iter().chain(&second)) {
            assert_eq!(a.value(), b.value());
        }
    }
}
