use super::{ParamSet, Tape, Var};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `loss` against central finite differences.
///
/// `loss` must be a deterministic function of the parameters. At most
/// `max_per_param` evenly spaced entries of each tensor are perturbed.
pub fn grad_check<F>(params: &ParamSet<f64>, h: f64, max_per_param: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    if tape.value(out).numel() != 1 {
        return Err(contract("gradient check needs a scalar loss"));
    }
    let mut analytic = params.clone();
    analytic.zero_grads();
    tape.backward(out).accumulate_into(&mut analytic);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, p)?;
        Ok(t.value(v).item())
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in params.ids() {
        let n = params.value(id).numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = params.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grad(id)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{glorot, AttentionGraph, GatLayer, Linear, Tensor};

    #[test]
    fn cross_entropy_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::<f64>::new();
        let id = params.add("logits", glorot(&mut rng, 4, 7));
        let rep = grad_check(&params, 1e-5, 64, |tape, p| {
            let x = tape.param(p, id);
            tape.softmax_cross_entropy(x, vec![0, 3, 6, 2].into(), Some(vec![1.0, 0.0, 2.0, 0.5].into()))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn gat_stack_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::<f64>::new();
        let g1 = GatLayer::new(&mut params, "g1", 3, 8, 2, &mut rng);
        let g2 = GatLayer::new(&mut params, "g2", 8, 4, 4, &mut rng);
        let head = Linear::new(&mut params, "head", 4, 5, &mut rng);
        let fill = params.add("fill", glorot(&mut rng, 1, 3));
        for id in params.ids().collect::<Vec<_>>() {
            // Non-zero edge weights so their gradient is exercised too.
            if params.name(id).ends_with("edge_weight") {
                params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.3);
            }
        }
        let graph = Rc::new(
            AttentionGraph::undirected_with_self_loops(5, &[(0, 1, 0.2), (1, 2, 0.7), (2, 3, 0.1), (1, 4, 0.9)], 1.0)
                .unwrap(),
        );
        let x = Tensor::from_vec(&[5, 3], (0..15).map(|k| ((k * 7) as f64).cos()).collect()).unwrap();
        let rows: Rc<[bool]> = vec![false, true, false, false, true].into();
        let rep = grad_check(&params, 1e-5, 16, |tape, p| {
            let xv = tape.constant(x.clone());
            let fv = tape.param(p, fill);
            let xm = tape.fill_rows(xv, fv, rows.clone());
            let h = g1.forward(tape, p, xm, &graph)?;
            let h = tape.elu(h);
            let h = g2.forward(tape, p, h, &graph)?;
            let h = tape.elu(h);
            let logits = head.forward(tape, p, h);
            tape.softmax_cross_entropy(logits, vec![1, 4, 0, 2, 3].into(), None)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn vae_style_losses_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::<f64>::new();
        let enc = Linear::new(&mut params, "enc", 3, 4, &mut rng);
        let lv = Linear::new(&mut params, "lv", 3, 4, &mut rng);
        let dec = Linear::new(&mut params, "dec", 4, 6, &mut rng);
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap();
        let eps = Tensor::from_vec(&[2, 4], vec![0.5, -1.0, 0.2, 0.8, -0.3, 0.1, 1.2, -0.6]).unwrap();
        let rep = grad_check(&params, 1e-5, 32, |tape, p| {
            let xv = tape.constant(x.clone());
            let mu = enc.forward(tape, p, xv);
            let l = lv.forward(tape, p, xv);
            let half = tape.scale(l, 0.5);
            let std = tape.exp(half);
            let e = tape.constant(eps.clone());
            let noise = tape.mul(std, e);
            let z = tape.add(mu, noise);
            let out = dec.forward(tape, p, z);
            let (ex, geo) = (tape.reshape(out, &[12, 1]), tape.sigmoid(out));
            let bce = tape.bce_with_logits(ex, vec![1.0; 12].into(), None);
            let l1 = tape.weighted_l1(geo, vec![0.3; 12].into(), Some(vec![1.0; 12].into()));
            let kl = tape.gaussian_kl(mu, l);
            let s = tape.add(bce, l1);
            Ok(tape.add(s, kl))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
