//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Check at most this many elements; all of them when the model is smaller.
    pub max_elements: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, per unit of `max(1, |loss|)`.
    pub abs_floor: f64,
    /// Shift applied to an element whose one-sided slopes disagree (a kink).
    pub kink_shift: f64,
    pub max_kink_retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_elements: 500,
            seed: 0,
            abs_floor: 1e-6,
            kink_shift: 1e-3,
            max_kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<ElementCheck>,
    pub kinks_shifted: usize,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss_fn(&mut g, store)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

fn analytic_grads<F>(store: &ParamStore, loss_fn: &F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss_fn(&mut g, store)?;
    if !g.scalar(l).is_finite() {
        return Err(Error::NonFinite("loss is not finite".into()));
    }
    let value = g.scalar(l);
    let grads = g.backward(l);
    let mut out: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| vec![0.0; p.value.len()])
        .collect();
    for (id, t) in g.param_grads(&grads) {
        out[id.index()] = t.into_data();
    }
    Ok((value, out))
}

/// Compares reverse-mode gradients of `loss_fn` with central differences on
/// every parameter element, or on a seeded random subsample of
/// `cfg.max_elements` elements. The error is invariant to rescaling the
/// loss by a factor of at least one.
pub fn gradient_check<F>(
    store: &ParamStore,
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !store.all_finite() {
        return Err(Error::NonFinite(
            "parameters contain non-finite values".into(),
        ));
    }
    let mut work = store.clone();
    let (mut loss0, mut grads) = analytic_grads(&work, &loss_fn)?;

    let flat: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<usize> = if flat.len() <= cfg.max_elements {
        (0..flat.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, flat.len(), cfg.max_elements).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        kinks_shifted: 0,
        passed: true,
    };
    let h = cfg.step;
    for &flat_idx in &chosen {
        let (id, i) = flat[flat_idx];
        let mut retries = 0;
        let check = loop {
            let x0 = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&work, &loss_fn)?;
            work.value_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&work, &loss_fn)?;
            work.value_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[id.index()][i];
            let err = rel_error(analytic, numeric, cfg.abs_floor * loss0.abs().max(1.0));
            if err >= cfg.tol && retries < cfg.max_kink_retries {
                let f0 = eval(&work, &loss_fn)?;
                let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                let smooth_gap = 1e-3 * fwd.abs().max(bwd.abs()).max(1.0);
                if (fwd - bwd).abs() > smooth_gap {
                    work.value_mut(id).data_mut()[i] = x0 + cfg.kink_shift;
                    (loss0, grads) = analytic_grads(&work, &loss_fn)?;
                    retries += 1;
                    report.kinks_shifted += 1;
                    continue;
                }
            }
            break ElementCheck {
                param: work.name(id).to_string(),
                index: i,
                analytic,
                numeric,
                rel_error: err,
            };
        };
        report.checked += 1;
        if check.rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(check.rel_error);
            report.worst = Some(check);
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_l1_model_passes() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Tensor::new(vec![3, 2], vec![0.4, -0.3, 0.2, 0.8, -0.5, 0.1]).unwrap(),
            )
            .unwrap();
        let b = store
            .add("b", Tensor::new(vec![2], vec![0.05, -0.02]).unwrap())
            .unwrap();
        let x = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        let y = Tensor::new(vec![4, 2], (0..8).map(|i| 3.0 + i as f64).collect()).unwrap();
        let report = gradient_check(
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let p = g.linear(xv, wv, bv);
                let t = g.constant(y.clone());
                let d = g.sub(p, t);
                let a = g.abs(d);
                Ok(g.mean(a))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 8);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn unused_parameter_has_zero_gradients() {
        let mut store = ParamStore::new();
        let used = store
            .add("used", Tensor::new(vec![1], vec![2.0]).unwrap())
            .unwrap();
        store
            .add("unused", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let report = gradient_check(
            &store,
            |g, s| {
                let u = g.param(s, used);
                let sq = g.mul(u, u);
                Ok(g.sum(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.checked, 3);
        let (_, grads) = analytic_grads(&store, &|g: &mut Graph, s: &ParamStore| {
            let u = g.param(s, used);
            let sq = g.mul(u, u);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(grads[1], vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let p = store
            .add("p", Tensor::new(vec![1], vec![-1.0]).unwrap())
            .unwrap();
        let r = gradient_check(
            &store,
            |g, s| {
                let v = g.param(s, p);
                let l = g.log(v);
                Ok(g.sum(l))
            },
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn kink_is_shifted_away() {
        let mut store = ParamStore::new();
        let p = store
            .add("p", Tensor::new(vec![1], vec![1e-6]).unwrap())
            .unwrap();
        let report = gradient_check(
            &store,
            |g, s| {
                let v = g.param(s, p);
                let a = g.abs(v);
                Ok(g.sum(a))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.kinks_shifted, 1);
    }

    #[test]
    fn rescaled_loss_gives_same_relative_error() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Tensor::new(vec![2, 2], vec![0.3, -0.7, 1e-4, 0.2]).unwrap(),
            )
            .unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.8]).unwrap();
        let run = |scale: f64| {
            gradient_check(
                &store,
                |g, s| {
                    let xv = g.constant(x.clone());
                    let wv = g.param(s, w);
                    let y = g.matmul(xv, wv);
                    let t = g.tanh(y);
                    let sq = g.mul(t, t);
                    let l = g.sum(sq);
                    Ok(g.scale(l, scale))
                },
                &GradCheckConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(2.0), run(2000.0));
        assert!(a.passed && b.passed);
        assert!((a.max_rel_error - b.max_rel_error).abs() < 1e-6);
    }
}
