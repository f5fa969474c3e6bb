use rand::seq::index::sample;

use super::params::{ParamId, ParamStore};
use crate::rng::{self, stream};

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares analytic gradients to central differences.
///
/// `loss_fn` must return the loss and accumulate its gradient into the store.
/// For each non-frozen parameter up to `per_param` coordinates are probed
/// (all of them if the parameter is smaller); row-sparse parameters are probed
/// only on rows the loss touches. Relative error is
/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, probe_eps: f64, per_param: usize, seed: u64) -> GradCheckReport
where
    F: FnMut(&mut ParamStore) -> f64,
{
    let mut rng = rng::seeded(seed, stream::GRAD_CHECK);
    store.zero_grads();
    loss_fn(store);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut plan = Vec::new();
    for &id in &ids {
        let meta = store.meta(id);
        if meta.frozen {
            continue;
        }
        let candidates: Vec<usize> = if meta.row_sparse {
            let w = meta.row_width();
            store
                .grads()
                .touched_rows(id)
                .into_iter()
                .flat_map(|r| r * w..(r + 1) * w)
                .collect()
        } else {
            (0..meta.len()).collect()
        };
        let picked: Vec<usize> = if candidates.len() <= per_param {
            candidates
        } else {
            sample(&mut rng, candidates.len(), per_param)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        };
        let analytic: Vec<f64> = picked.iter().map(|&i| store.grads().get(id)[i]).collect();
        plan.push((id, picked, analytic));
    }
    store.zero_grads();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (id, picked, analytic) in plan {
        for (&i, &a) in picked.iter().zip(&analytic) {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + probe_eps;
            let up = loss_fn(store);
            store.value_mut(id)[i] = orig - probe_eps;
            let down = loss_fn(store);
            store.value_mut(id)[i] = orig;
            store.zero_grads();
            let numeric = (up - down) / (2.0 * probe_eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = store.meta(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ops::{affine, affine_backward, bce, bce_backward, sigmoid, sigmoid_backward};
    use crate::rng::uniform_vec;

    #[test]
    fn affine_gradient_on_random_5x7() {
        let mut r = rng::seeded(1, 0);
        let x = uniform_vec(&mut r, 5, 1.0);
        let dy_dir = uniform_vec(&mut r, 7, 1.0);
        let mut s = ParamStore::new();
        let w = s.add("w", &[5, 7], uniform_vec(&mut r, 35, 1.0));
        let b = s.add("b", &[7], uniform_vec(&mut r, 7, 1.0));
        let report = grad_check(
            &mut s,
            |s| {
                // L = <dy_dir, xW + b>, a linear probe of the affine output
                let y = affine(&x, s.value(w), s.value(b)).unwrap();
                let (vals, grads) = s.split_mut();
                let mut dw = vec![0.0; 35];
                let mut db = vec![0.0; 7];
                affine_backward(&x, &vals[w], &dy_dir, &mut dw, &mut db, None);
                grads.get_mut(w).iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
                grads.get_mut(b).iter_mut().zip(&db).for_each(|(g, d)| *g += d);
                y.iter().zip(&dy_dir).map(|(a, b)| a * b).sum()
            },
            1e-5,
            64,
            3,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert_eq!(report.coordinates, 42);
    }

    #[test]
    fn affine_sigmoid_bce_composite() {
        let mut r = rng::seeded(2, 0);
        let n = 6;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut r, 4, 1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let mut s = ParamStore::new();
        let w = s.add("w", &[4, 1], uniform_vec(&mut r, 4, 1.0));
        let b = s.add("b", &[1], vec![0.1]);
        let report = grad_check(
            &mut s,
            |s| {
                let preds: Vec<f64> = xs
                    .iter()
                    .map(|x| sigmoid(affine(x, s.value(w), s.value(b)).unwrap()[0]))
                    .collect();
                let loss = bce(&preds, &ys);
                let dps = bce_backward(&preds, &ys);
                let (vals, grads) = s.split_mut();
                let mut dw = vec![0.0; 4];
                let mut db = vec![0.0; 1];
                for ((x, p), dp) in xs.iter().zip(&preds).zip(&dps) {
                    affine_backward(x, &vals[w], &[sigmoid_backward(*p, *dp)], &mut dw, &mut db, None);
                }
                grads.get_mut(w).iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
                grads.get_mut(b)[0] += db[0];
                loss
            },
            1e-5,
            32,
            4,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut s = ParamStore::new();
        let p = s.add("p", &[1], vec![1.5]);
        let report = grad_check(
            &mut s,
            |s| {
                let x = s.value(p)[0];
                s.grads_mut().get_mut(p)[0] += 3.0 * x; // true derivative is 2x
                x * x
            },
            1e-5,
            32,
            0,
        );
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst_param, "p");
    }
}
