use rayon::prelude::*;

use super::{Graph, ParameterStore, Var};
use crate::error::Result;

/// Builds one graph per item (in parallel), scales each item's loss and
/// gradients by the weight `f` returns, and sums them in item order so the
/// result does not depend on thread scheduling.
///
/// With `train_seed` set, each graph runs in training mode with its own
/// dropout stream derived from the seed and the item index.
///
/// Returns the weighted loss and one gradient buffer per parameter (empty
/// when no item touched the parameter).
pub fn weighted_grads<T, F>(store: &ParameterStore, items: &[T], train_seed: Option<u64>, f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    T: Sync,
    F: Fn(&mut Graph<'_>, usize, &T) -> Result<(Var, f64)> + Sync,
{
    let per_item: Vec<(f64, Vec<(usize, Vec<f64>)>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut g = Graph::with_params(store);
            if let Some(seed) = train_seed {
                g = g.training(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            }
            let (loss, w) = f(&mut g, i, item)?;
            let grads = g.backward(loss)?;
            let mut pg = grads.param_grads(&g);
            for (_, grad) in &mut pg {
                grad.iter_mut().for_each(|x| *x *= w);
            }
            Ok((g.scalar(loss) * w, pg))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); store.len()];
    for (loss, pg) in per_item {
        total += loss;
        for (id, grad) in pg {
            let slot = &mut out[id];
            if slot.is_empty() {
                *slot = grad;
            } else {
                slot.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((total, out))
}

/// Replaces the store's gradients with `grads`; untouched parameters get zeros.
pub fn set_grads(store: &mut ParameterStore, grads: Vec<Vec<f64>>) {
    store.zero_grads();
    for (id, grad) in grads.into_iter().enumerate() {
        let grad = if grad.is_empty() { vec![0.0; store.get(id).len()] } else { grad };
        store.accumulate_grad(id, &grad);
    }
}
