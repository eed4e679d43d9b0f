use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds its computation on the supplied graph from one node per input.
/// Returns the maximum over all input elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.data(*id).expect("every input is a gradient leaf").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DropoutContext;

    fn seq(shape: &[usize], offset: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f64 + offset) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|g, x| Ok(g.sum(x[0])), &[seq(&[3, 4], 0.0)], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_pick_first() {
        let err = grad_check(
            |g, x| {
                let r = g.reshape(x[0], &[1, 4])?;
                let s = g.softmax_rows(r)?;
                let first = g.slice_cols(s, 0, 1)?;
                Ok(g.sum(first))
            },
            &[Tensor::vector(vec![0.3, -1.2, 2.0, 0.7])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mse_of_matmul() {
        let target = seq(&[3, 2], 5.0);
        let err = grad_check(
            |g, x| {
                let y = g.matmul(x[0], x[1])?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &[seq(&[3, 4], 0.0), seq(&[4, 2], 2.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_primitive_passes() {
        let h = 1e-5;
        let target = seq(&[5, 3], 9.0);
        let checks: Vec<(&str, f64)> = vec![
            (
                "layer_norm",
                grad_check(
                    |g, x| {
                        let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 3], 0.0), seq(&[3], 1.0), seq(&[3], 2.0)],
                    h,
                )
                .unwrap(),
            ),
            (
                "conv1d_same",
                grad_check(
                    |g, x| {
                        let y = g.conv1d_same(x[0], x[1], x[2])?;
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 2], 0.0), seq(&[3, 2, 3], 1.0), seq(&[3], 2.0)],
                    h,
                )
                .unwrap(),
            ),
            (
                "conv1d_causal",
                grad_check(
                    |g, x| {
                        let y = g.conv1d_causal(x[0], x[1], x[2])?;
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 2], 0.3), seq(&[3, 2, 3], 1.0), seq(&[3], 2.0)],
                    h,
                )
                .unwrap(),
            ),
            (
                "relu",
                grad_check(
                    |g, x| {
                        let y = g.relu(x[0]);
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 3], 0.1)],
                    h,
                )
                .unwrap(),
            ),
            (
                "dropout",
                grad_check(
                    |g, x| {
                        g.set_dropout(DropoutContext { training: true, seed: 3, stream: 0, step: 1 });
                        let y = g.dropout(x[0], 0.3)?;
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 3], 0.1)],
                    h,
                )
                .unwrap(),
            ),
            (
                "matmul_nt + softmax",
                grad_check(
                    |g, x| {
                        let s = g.matmul_nt(x[0], x[1])?;
                        let s = g.scale(s, 0.5);
                        let p = g.softmax_rows(s)?;
                        let y = g.matmul(p, x[2])?;
                        let t = g.constant(target.clone());
                        g.mse(y, t)
                    },
                    &[seq(&[5, 4], 0.0), seq(&[6, 4], 1.0), seq(&[6, 3], 2.0)],
                    h,
                )
                .unwrap(),
            ),
            (
                "slice/concat/gather/bias",
                grad_check(
                    |g, x| {
                        let a = g.slice_cols(x[0], 0, 1)?;
                        let b = g.slice_cols(x[0], 1, 2)?;
                        let c = g.concat_cols(&[b, a])?;
                        let c = g.add_bias(c, x[1])?;
                        let r = g.gather_rows(c, &[0, 0, 2, 4, 4])?;
                        let sq = g.mul(r, r)?;
                        let d = g.sub(sq, r)?;
                        let m = g.mean(d)?;
                        Ok(g.scale(m, 3.0))
                    },
                    &[seq(&[5, 3], 0.0), seq(&[3], 4.0)],
                    h,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
