use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, NodeId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    /// Candidates rejected because a perturbation crossed a kink.
    pub skipped: usize,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-7;

/// Loss value and branch signature of one forward pass.
fn eval<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<(f64, u64)>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: loss is {v}")));
    }
    Ok((v, g.branch_signature()))
}

/// Compares analytic parameter gradients with central differences of step `h`
/// on up to `samples` randomly chosen scalar parameters.
///
/// A candidate whose `±h` perturbation changes the branch signature of the
/// pass (a ReLU sign or max-pool winner flips) is skipped and another one is
/// drawn: finite differences across a kink do not estimate the derivative.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<NodeId>,
{
    let total = store.scalar_count();
    if total == 0 {
        return Ok(GradCheckReport::default());
    }

    let mut analytic = vec![0.0f64; total];
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for p in store.iter() {
        offsets.push(acc);
        acc += p.value.len();
    }
    let base = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: loss is {v}")));
        }
        for (id, grad) in g.backward(loss)?.iter() {
            let off = offsets[id.index()];
            analytic[off..off + grad.len()].copy_from_slice(grad.data());
        }
        g.branch_signature()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);

    let mut report = GradCheckReport::default();
    for flat in order {
        if report.entries.len() == samples {
            break;
        }
        let pidx = offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - offsets[pidx];
        let id = store.iter().nth(pidx).map(|p| p.name.clone()).unwrap();
        let pid = store.id(&id).unwrap();
        let original = store.get(pid).value.data()[local];

        store.get_mut(pid).value.data_mut()[local] = original + h;
        let plus = eval(store, &loss_fn);
        store.get_mut(pid).value.data_mut()[local] = original - h;
        let minus = eval(store, &loss_fn);
        store.get_mut(pid).value.data_mut()[local] = original;

        let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
        if sig_plus != base || sig_minus != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[flat];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.entries.push(GradCheckEntry {
            param: id,
            index: local,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let w = store.add_he_uniform("w", &[4, 3], 4, &mut rng).unwrap();
        let b = store.add("b", Tensor::full(&[3], 0.1)).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let report = grad_check(
            &mut store,
            |g| {
                let xi = g.input(Tensor::new(&[2, 4], x.clone()).unwrap());
                let (wn, bn) = (g.param(w), g.param(b));
                let y = g.fc(xi, wn, bn)?;
                // |y| < 1 everywhere, so smooth-L1 is the quadratic branch.
                g.smooth_l1(y, (0..6).map(|i| (i, 0.0)).collect(), 1.0)
            },
            100,
            1e-3,
            9,
        )
        .unwrap();
        assert_eq!(report.entries.len(), 15);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn conv_relu_micro_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add_he_uniform("c1.w", &[3, 3, 1, 3], 9, &mut rng).unwrap();
        let b1 = store.add("c1.b", Tensor::full(&[3], 0.01)).unwrap();
        let w2 = store.add_he_uniform("c2.w", &[3, 3, 3, 2], 27, &mut rng).unwrap();
        let b2 = store.add("c2.b", Tensor::full(&[2], 0.01)).unwrap();
        let x: Vec<f64> = (0..6 * 7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let report = grad_check(
            &mut store,
            |g| {
                let xi = g.input(Tensor::new(&[6, 7, 1], x.clone()).unwrap());
                let (a, b) = (g.param(w1), g.param(b1));
                let h = g.conv2d(xi, a, b, 1, 1)?;
                let h = g.relu(h);
                let (c, d) = (g.param(w2), g.param(b2));
                let y = g.conv2d(h, c, d, 1, 1)?;
                let picks = (0..y_len(g, y)).map(|i| (i, if i % 3 == 0 { 1.0 } else { 0.0 })).collect();
                g.sigmoid_bce(y, picks)
            },
            1000,
            1e-3,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    fn y_len(g: &Graph<'_, f64>, n: NodeId) -> usize {
        g.value(n).len()
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        // relu(w - 1) at w = 1 + 5e-4: a step of 1e-3 crosses the kink.
        let w = store.add("w", Tensor::full(&[1], 1.0 + 5e-4)).unwrap();
        let v = store.add("v", Tensor::full(&[1], 0.3)).unwrap();
        let report = grad_check(
            &mut store,
            |g| {
                let one = g.input(Tensor::full(&[1], 1.0));
                let (wn, vn) = (g.param(w), g.param(v));
                let d = g.elem_sub(wn, one)?;
                let r = g.relu(d);
                let s = g.weighted_sum(&[(r, 1.0), (vn, 2.0)])?;
                Ok(s)
            },
            2,
            1e-3,
            0,
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].param, "v");
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn empty_store_gives_empty_report() {
        let mut store = ParamStore::<f64>::new();
        let report = grad_check(&mut store, |g| Ok(g.input(Tensor::zeros(&[1]))), 10, 1e-3, 0).unwrap();
        assert!(report.entries.is_empty());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::zeros(&[1])).unwrap();
        let err = grad_check(&mut store, |g| Ok(g.input(Tensor::full(&[1], f64::NAN))), 1, 1e-3, 0);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
