//! Held-out evaluation of the full model against the persistence baseline.

use serde::{Deserialize, Serialize};
use wfn_tensor::Tensor;

use crate::data::{binarize_target, sliding_window, EventArchive, SampleIndex};
use crate::error::{invalid, Result};
use crate::metrics::{LeadTimeAccumulator, Mask, MetricsReport};
use crate::model::{binarize, forward, persistence_probabilities, WeatherFusionNet};
use crate::params::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: f64,
    pub rain_threshold: f64,
    pub model: MetricsReport,
    pub persistence: MetricsReport,
}

/// Windows of every archive sized for the model, `stride` frames apart.
pub fn eval_windows(model: &WeatherFusionNet<f32>, archives: &[EventArchive], stride: usize) -> Result<Vec<(usize, SampleIndex)>> {
    let cfg = &model.config;
    let mut out = Vec::new();
    for (a, arch) in archives.iter().enumerate() {
        for w in sliding_window(arch.num_frames(), cfg.input_len(), cfg.output_len(), stride)? {
            out.push((a, w));
        }
    }
    Ok(out)
}

/// Input sequence `[1, in, C, S, S]` and binarized targets `[L, R, R]` of a window.
pub fn sample(archive: &EventArchive, w: SampleIndex, rain_threshold: f64) -> Result<(Tensor<f32>, Mask)> {
    let x = archive.satellite_frames(w.start, w.in_len)?;
    let mut shape = x.shape().to_vec();
    shape.insert(0, 1);
    let y = binarize_target(&archive.radar_frames(w.start + w.in_len, w.out_len)?, rain_threshold);
    Ok((x.reshape(shape)?, y))
}

fn lead_stack(probs: &Tensor<f32>, threshold: f64) -> Result<Mask> {
    let m = binarize(probs, threshold);
    Mask::new(probs.shape()[1..].to_vec(), m.data().to_vec())
}

pub fn evaluate(
    model: &WeatherFusionNet<f32>,
    archives: &[EventArchive],
    windows: &[(usize, SampleIndex)],
    threshold: f64,
    rain_threshold: f64,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(invalid("no evaluation windows"));
    }
    let leads = model.config.output_len();
    let mut fused = LeadTimeAccumulator::new(leads);
    let mut persist = LeadTimeAccumulator::new(leads);
    for &(a, w) in windows {
        let arch = archives.get(a).ok_or_else(|| invalid(format!("window refers to archive {a}")))?;
        let (x, y) = sample(arch, w, rain_threshold)?;
        fused.add(&lead_stack(&forward(model, &x, Mode::Eval)?, threshold)?, &y)?;
        persist.add(&lead_stack(&persistence_probabilities(model, &x)?, threshold)?, &y)?;
    }
    Ok(Evaluation {
        threshold,
        rain_threshold,
        model: fused.report(),
        persistence: persist.report(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic::{generate, SyntheticConfig};

    #[test]
    fn zero_head_never_predicts_rain_at_high_threshold() {
        let cfg = ModelConfig::reduced();
        let mut model = WeatherFusionNet::<f32>::init(cfg.clone(), 0).unwrap();
        crate::params::zero_layer(&mut model.fusion, "head").unwrap();
        let arch = generate(&SyntheticConfig {
            seed: 9,
            num_frames: cfg.input_len() + cfg.output_len(),
            n_cells: 20,
            geometry: cfg.geometry,
            ..Default::default()
        })
        .unwrap();
        let windows = eval_windows(&model, std::slice::from_ref(&arch), 1).unwrap();
        assert_eq!(windows.len(), 1);
        let e = evaluate(&model, &[arch], &windows, 0.6, 0.2).unwrap();
        assert_eq!(e.model.confusion.tp + e.model.confusion.fp, 0);
        assert_eq!(e.model.iou_per_lead.len(), cfg.output_len());
        assert_eq!(e.persistence.samples, 1);
    }
}
