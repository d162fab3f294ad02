use crate::error::{DvtError, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare tape gradients against central finite differences, coordinate by
/// coordinate, for the listed parameters. `build` must construct the same
/// scalar loss from whatever the store currently holds.
///
/// Returns the max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
pub fn grad_check(
    store: &mut ParamStore,
    params: &[ParamId],
    build: impl Fn(&mut Graph) -> Result<NodeId>,
    step: f64,
) -> Result<f64> {
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        let lv = g.value(loss);
        if lv.numel() != 1 {
            return Err(DvtError::InvalidShape {
                op: "grad_check",
                details: format!("loss must be scalar, got {:?}", lv.shape()),
            });
        }
        if !lv.is_finite() {
            return Err(DvtError::Eval("non-finite loss in grad_check".into()));
        }
        let grads = g.backward(loss)?;
        params
            .iter()
            .map(|&p| {
                grads
                    .get(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.value(p).shape().to_vec()))
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(DvtError::Eval("non-finite loss in grad_check".into()));
        }
        Ok(v)
    };

    let mut max_err: f64 = 0.0;
    for (pi, &p) in params.iter().enumerate() {
        for i in 0..store.value(p).numel() {
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.value_mut(p).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.value_mut(p).data_mut()[i] = orig;

            let g_fd = (plus - minus) / (2.0 * step);
            let g_ad = analytic[pi].data()[i];
            let err = (g_ad - g_fd).abs() / 1.0_f64.max(g_ad.abs()).max(g_fd.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap())
            .unwrap();
        let err = grad_check(
            &mut store,
            &[w],
            |g| {
                let a = g.param(w);
                let b = g.param(w);
                g.matmul(a, b)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");

        // The analytic gradient itself is 2w = 6.
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let loss = g.matmul(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_softmax_is_constant() {
        let mut store = ParamStore::new();
        let x = store
            .register("x", Tensor::new(vec![1, 4], vec![0.3, -1.0, 0.7, 0.1]).unwrap())
            .unwrap();
        let err = grad_check(
            &mut store,
            &[x],
            |g| {
                let xn = g.param(x);
                let s = g.softmax(xn, 1)?;
                Ok(g.sum(s))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn nonfinite_loss_is_an_evaluation_error() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::new(vec![1, 1], vec![1e200]).unwrap())
            .unwrap();
        let res = grad_check(
            &mut store,
            &[w],
            |g| {
                let a = g.param(w);
                let b = g.param(w);
                let sq = g.matmul(a, b)?;
                g.matmul(sq, sq)
            },
            DEFAULT_STEP,
        );
        assert!(matches!(res, Err(DvtError::Eval(_))));
    }
}
