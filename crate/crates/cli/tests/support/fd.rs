//! Central finite differences against the tape's reverse-mode gradients.

use depthadapt::{Graph, NodeId, Result, Tensor};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `op` over leaves made from `inputs`, contracts the output with a
/// random fixed weight tensor to a scalar, and returns the relative error of
/// the backward gradients of every input against central differences.
pub fn check_op<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, op: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let numel = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = op(&mut g, &ids)?;
        g.value(out).numel()
    };
    let r = super::uniform(rng, numel, -1.0, 1.0);
    let loss = |vals: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|t| {
                let t = if track { t.clone().with_grad() } else { t.clone() };
                g.leaf(t)
            })
            .collect();
        let out = op(&mut g, &ids)?;
        let shape = g.shape(out).to_vec();
        let w = g.constant(Tensor::new(shape, r.to_vec())?);
        let prod = g.mul(out, w)?;
        let l = g.sum(prod);
        Ok((g, ids, l))
    };

    let (g, ids, l) = loss(inputs, true)?;
    let grads = g.backward(l)?;
    let mut analytic = Vec::new();
    for (id, t) in ids.iter().zip(inputs) {
        match grads.get(*id) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut vals = inputs.to_vec();
    for i in 0..vals.len() {
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + STEP;
            let (g, _, l) = loss(&vals, false)?;
            let plus = g.value(l).item();
            vals[i].data_mut()[j] = orig - STEP;
            let (g, _, l) = loss(&vals, false)?;
            let minus = g.value(l).item();
            vals[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Central difference of a scalar function of a parameter vector.
pub fn numeric_gradient(params: &mut [f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let orig = params[j];
        params[j] = orig + STEP;
        let plus = f(params)?;
        params[j] = orig - STEP;
        let minus = f(params)?;
        params[j] = orig;
        out.push((plus - minus) / (2.0 * STEP));
    }
    Ok(out)
}
