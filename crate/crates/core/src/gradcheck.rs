//! Central finite-difference gradient checking.
//!
//! The checker is the independent reference for every analytic gradient in
//! this crate: it never calls the backward pass, only repeated forward
//! evaluations of a scalar loss under parameter perturbations.

use crate::error::{Error, Result};
use crate::network::{GradientSet, Network, ParamSlot};

/// Floor applied to the reference magnitude so coordinates with a near-zero
/// numeric derivative do not blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `|analytic - numeric| / max(|numeric|, floor)`. The numeric estimate is
/// the reference, so a gradient off by a factor of two reports an error
/// of about 1.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate achieving the max: (layer, slot, flat index).
    pub worst: Option<(usize, ParamSlot, usize)>,
    pub coords_checked: usize,
}

/// Compare `analytic` against central differences of `loss` over every
/// parameter coordinate of `net`. The network is restored bit-exactly before
/// returning. `loss` must be a pure function of the parameters.
pub fn check_gradients<L>(
    net: &mut Network,
    analytic: &GradientSet,
    mut loss: L,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&Network) -> Result<f64>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::BadConfig(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (layer, slot) in net.param_slots() {
        let n = net.param(layer, slot).expect("listed slot").len();
        for i in 0..n {
            let orig = net.param(layer, slot).expect("listed slot").data()[i];
            net.param_mut(layer, slot).expect("listed slot").data_mut()[i] = orig + epsilon;
            let plus = loss(net)?;
            net.param_mut(layer, slot).expect("listed slot").data_mut()[i] = orig - epsilon;
            let minus = loss(net)?;
            net.param_mut(layer, slot).expect("listed slot").data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss under perturbation of layer {layer} {slot:?}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = match slot {
                ParamSlot::Weight => analytic.layers[layer].weight.as_ref(),
                ParamSlot::Bias => analytic.layers[layer].bias.as_ref(),
            }
            .ok_or_else(|| {
                Error::StaleRecord(format!("analytic gradient missing layer {layer} {slot:?}"))
            })?
            .data()[i];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((layer, slot, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Network};
    use crate::rng;
    use crate::tensor::Tensor;

    fn quadratic_loss(net: &Network, batch: &Tensor) -> Result<f64> {
        let (out, _) = net.forward(batch)?;
        Ok(out.data().iter().map(|v| 0.5 * v * v).sum())
    }

    fn quadratic_grads(net: &Network, batch: &Tensor) -> GradientSet {
        let (out, record) = net.forward(batch).unwrap();
        net.backward(&record, &out).unwrap()
    }

    fn small_net() -> (Network, Tensor) {
        let mut r = rng::stream(17, "init");
        let net = Network::new(
            vec![3],
            vec![
                LayerSpec::dense(3, 4),
                LayerSpec::Relu,
                LayerSpec::dense(4, 2),
            ],
            &mut r,
        )
        .unwrap();
        let batch = Tensor::new(vec![2, 3], vec![0.4, -0.2, 0.9, -0.5, 0.3, 0.1]).unwrap();
        (net, batch)
    }

    #[test]
    fn analytic_matches_numeric_on_dense_net() {
        let (mut net, batch) = small_net();
        let grads = quadratic_grads(&net, &batch);
        let report =
            check_gradients(&mut net, &grads, |n| quadratic_loss(n, &batch), 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn doubled_gradient_reports_error_near_one() {
        let (mut net, batch) = small_net();
        let mut grads = quadratic_grads(&net, &batch);
        for layer in &mut grads.layers {
            if let Some(w) = layer.weight.as_mut() {
                w.scale(2.0);
            }
            if let Some(b) = layer.bias.as_mut() {
                b.scale(2.0);
            }
        }
        let report =
            check_gradients(&mut net, &grads, |n| quadratic_loss(n, &batch), 1e-5).unwrap();
        assert!(
            report.max_rel_error > 0.5,
            "corruption went undetected: {}",
            report.max_rel_error
        );
    }

    #[test]
    fn network_is_restored_after_check() {
        let (mut net, batch) = small_net();
        let before: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.weight.iter().flat_map(|w| w.data().iter().copied()))
            .collect();
        let grads = quadratic_grads(&net, &batch);
        check_gradients(&mut net, &grads, |n| quadratic_loss(n, &batch), 1e-5).unwrap();
        let after: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.weight.iter().flat_map(|w| w.data().iter().copied()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let (mut net, _) = small_net();
        let grads = GradientSet::zeros_like(&net);
        let result = check_gradients(&mut net, &grads, |_| Ok(f64::NAN), 1e-5);
        assert!(matches!(result, Err(Error::NonFinite(_))));
    }
}
