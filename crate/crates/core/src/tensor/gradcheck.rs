use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Error;

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("non-finite {what} at {param}[{index}]")]
    NonFinite {
        what: &'static str,
        param: String,
        index: usize,
    },
    #[error(transparent)]
    Graph(#[from] Error),
}

const DENOM_FLOOR: f64 = 1e-6;

/// Compares backprop gradients of a scalar function with central differences.
///
/// Returns the maximum over every entry of the selected parameters of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`. The function
/// must be deterministic.
pub fn gradcheck<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<f64, GradcheckError>
where
    F: Fn(&mut Graph) -> Result<Var, Error>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(GradcheckError::NonFinite {
                what: "loss",
                param: "<output>".into(),
                index: 0,
            });
        }
        let bw = g.backward(loss)?;
        ids.iter()
            .map(|&id| {
                bw.params
                    .get(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.data(id).len()])
            })
            .collect::<Vec<_>>()
    };

    let eval = |store: &ParamStore| -> Result<f64, Error> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut worst = 0.0f64;
    for (&id, grad) in ids.iter().zip(&analytic) {
        for j in 0..grad.len() {
            let orig = store.data(id)[j];
            store.data_mut(id)[j] = orig + step;
            let plus = eval(store)?;
            store.data_mut(id)[j] = orig - step;
            let minus = eval(store)?;
            store.data_mut(id)[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let name = || store.get(id).name.clone();
            if !numeric.is_finite() {
                return Err(GradcheckError::NonFinite {
                    what: "finite difference",
                    param: name(),
                    index: j,
                });
            }
            if !grad[j].is_finite() {
                return Err(GradcheckError::NonFinite {
                    what: "gradient",
                    param: name(),
                    index: j,
                });
            }
            let denom = grad[j].abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((grad[j] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
