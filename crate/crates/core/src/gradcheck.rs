//! Central finite-difference verification of analytic parameter gradients.

use wfn_tensor::Var;

use crate::error::Result;
use crate::params::{Mode, ParameterTree, Session};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of scalar parameters perturbed.
    pub checked: usize,
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    /// Tensor with the largest error.
    pub worst: String,
    /// Largest elementwise `|a - n|`, for diagnostics.
    pub max_abs_error: f64,
}

const ABS_FLOOR: f64 = 1e-12;

/// `||a - n|| / max(||a||, ||n||)` over one parameter tensor.
///
/// Elementwise ratios are dominated by finite-difference roundoff for
/// entries whose gradient is orders of magnitude below the rest of the
/// tensor, so the tensor norm sets the scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(ABS_FLOOR)
}

/// Compares backprop against `(L(p + h) - L(p - h)) / 2h` for every element
/// of every parameter in `tree`, evaluating `loss` in eval mode.
pub fn check_gradients<F>(tree: &ParameterTree<f64>, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Session<f64>) -> Result<Var<f64>>,
{
    let analytic = {
        let s = Session::new(tree, Mode::Eval, true);
        let l = loss(&s)?;
        s.gradients(&l.backward())
    };
    let eval = |t: &ParameterTree<f64>| -> Result<f64> { Ok(loss(&Session::new(t, Mode::Eval, false))?.value().item()) };

    let mut probe = tree.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        max_abs_error: 0.0,
    };
    let paths: Vec<String> = tree.params().map(|(p, _)| p.to_string()).collect();
    for path in paths {
        let n = tree.tensor(&path)?.len();
        let a: Vec<f64> = match analytic.get(&path) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = tree.tensor(&path)?.data()[i];
            probe.tensor_mut(&path)?.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.tensor_mut(&path)?.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.tensor_mut(&path)?.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        for (x, y) in a.iter().zip(&numeric) {
            report.max_abs_error = report.max_abs_error.max((x - y).abs());
        }
        let err = relative_error(&a, &numeric);
        report.checked += n;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = path;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phydnet::{moment_loss_var, phydnet_forward, phydnet_init, PhyDNetConfig};
    use crate::unet::{unet_forward, unet_init, UNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use wfn_tensor::{ops, Tensor};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn weighted_sum(x: &Var<f64>, seed: u64) -> Result<Var<f64>> {
        let w = Var::constant(random(x.shape(), seed));
        Ok(ops::sum(&ops::mul(x, &w)?))
    }

    #[test]
    fn tiny_unet() {
        let cfg = UNetConfig::reduced(1, 1, &[2, 4]);
        let tree = unet_init::<f64>(&cfg, 5).unwrap();
        let x = Var::constant(random(&[2, 1, 8, 8], 1));
        let report = check_gradients(&tree, 1e-6, |s| weighted_sum(&unet_forward(s, &cfg, &x)?, 2)).unwrap();
        assert_eq!(report.checked, tree.params().map(|(_, t)| t.len()).sum::<usize>());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn detects_wrong_backward() {
        let cfg = UNetConfig::reduced(1, 1, &[2, 4]);
        let tree = unet_init::<f64>(&cfg, 5).unwrap();
        let x = Var::constant(random(&[1, 1, 8, 8], 1));
        let report = check_gradients(&tree, 1e-6, |s| {
            let y = unet_forward(s, &cfg, &x)?;
            // forward doubles, backward passes the gradient through unscaled
            let doubled = Var::from_op(y.value().clone().scale(2.0), vec![y], |g, _, _| vec![Some(g.clone())]);
            weighted_sum(&doubled, 2)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.4, "{report:?}");
    }

    #[test]
    fn tiny_phydnet() {
        let cfg = PhyDNetConfig {
            latent_channels: 4,
            phycell_hidden: vec![9],
            phycell_kernel: [3, 3],
            convlstm_hidden: vec![4],
            convlstm_kernel: [3, 3],
            input_len: 2,
            output_len: 2,
            frame_channels: 2,
            encoder_downscale: 2,
        };
        let tree = phydnet_init::<f64>(&cfg, 6).unwrap();
        let input = random(&[1, 2, 2, 16, 16], 3);
        let report = check_gradients(&tree, 1e-6, |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = phydnet_forward(s, &cfg, &input, 2, None, 0.0, &mut rng)?;
            weighted_sum(&out, 4)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let moments = check_gradients(&tree, 1e-6, |s| moment_loss_var(&s.param("phycell.bank.weight")?)).unwrap();
        assert!(moments.max_rel_error < 1e-4, "{moments:?}");
    }
}
