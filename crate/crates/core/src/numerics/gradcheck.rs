use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dd, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which scalars of each parameter tensor are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    /// Every scalar of every tensor.
    All,
    /// Every tensor, with at most `per_tensor` scalars drawn from it by a
    /// seeded sampler. Tensors no larger than `per_tensor` are checked in full.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    /// Scalars whose reference derivative was retaken in double-double.
    pub refined: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst scalar, with its analytic and numeric derivatives.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }

    pub fn scalars_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn scalars_refined(&self) -> usize {
        self.params.iter().map(|p| p.refined).sum()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T, F>(loss_fn: &F, params: &ParamStore<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// A loss that can be evaluated at any scalar precision, so finite
/// differences can be retaken in [`Dd`] where `f64` rounding hides the answer.
pub trait LossFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>) -> Result<Var>;
}

/// Second-pass settings for [`grad_check_refined`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refine {
    /// Scalars whose `f64` relative error reaches `tol` are re-differenced.
    /// Keep it well below the pass threshold: near the threshold an `f64`
    /// reference that agrees may do so only by luck of the rounding.
    pub tol: f64,
    /// Step of the double-double central difference.
    pub eps: f64,
}

impl Default for Refine {
    fn default() -> Self {
        Self { tol: 1e-6, eps: 1e-8 }
    }
}

fn selected(coverage: Coverage, ordinal: usize, total: usize) -> Vec<usize> {
    match coverage {
        Coverage::Sampled { per_tensor, seed } if total > per_tensor => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ordinal as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, total, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

/// Central difference at one scalar, dividing by the step actually taken.
fn central<T, F>(loss_fn: &F, work: &mut ParamStore<T>, name: &str, i: usize, eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let orig = work.get(name)?.data()[i];
    let (hi, lo) = (orig + eps, orig - eps);
    work.get_mut(name)?.data_mut()[i] = hi;
    let plus = eval(loss_fn, work);
    work.get_mut(name)?.data_mut()[i] = lo;
    let minus = eval(loss_fn, work);
    work.get_mut(name)?.data_mut()[i] = orig;
    Ok(((plus? - minus?) / (hi - lo)).to_f64_lossy())
}

fn analytic_pass<T, F>(loss_fn: &F, params: &ParamStore<T>) -> Result<(f64, ParamStore<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let base = g.value(loss).data()[0];
    let analytic = g.backward(loss)?.to_store(&g, params);
    drop(g);

    let again = eval(loss_fn, params)?;
    // exact comparison: the loss must reproduce bit for bit
    if again != base {
        return Err(Error::NonDeterministic {
            first: base.to_f64_lossy(),
            second: again.to_f64_lossy(),
        });
    }
    Ok((base.to_f64_lossy(), analytic))
}

fn run<T, F>(
    loss_fn: &F,
    params: &ParamStore<T>,
    eps: T,
    coverage: Coverage,
    mut refine: impl FnMut(&str, usize, f64, f64) -> Result<Option<f64>>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let (loss, analytic) = analytic_pass(loss_fn, params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        loss,
    };
    for (ordinal, (name, tensor)) in params.iter().enumerate() {
        let total = tensor.len();
        let indices = selected(coverage, ordinal, total);
        let grads = analytic.get(name)?.data();
        let mut entry = ParamCheck {
            name: name.to_string(),
            checked: indices.len(),
            total,
            refined: 0,
            max_rel_err: 0.0,
            worst_index: indices.first().copied().unwrap_or(0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let a = grads[i].to_f64_lossy();
            let mut numeric = central(loss_fn, &mut work, name, i, eps)?;
            if let Some(better) = refine(name, i, a, numeric)? {
                numeric = better;
                entry.refined += 1;
            }
            let err = relative_error(a, numeric);
            if err > entry.max_rel_err || i == entry.worst_index {
                entry.max_rel_err = entry.max_rel_err.max(err);
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.params.push(entry);
    }
    Ok(report)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(L(θ+eps) − L(θ−eps)) / 2eps` for the selected scalars of every
/// parameter in `params`.
pub fn grad_check<T, F>(loss_fn: F, params: &ParamStore<T>, eps: T, coverage: Coverage) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    run(&loss_fn, params, eps, coverage, |_, _, _, _| Ok(None))
}

/// [`grad_check`] at `f64`, except that a scalar whose `f64` central
/// difference disagrees with the analytic gradient by `refine.tol` or more is
/// differenced again in double-double arithmetic, and that estimate replaces
/// the `f64` one.
///
/// `f64` differences of a loss near 1 carry rounding noise of roughly
/// `ulp(L)/2eps ≈ 1e-10`, which swamps parameters whose true gradient is
/// itself below ~1e-5. The analytic gradients under test are always the
/// `f64` ones.
pub fn grad_check_refined<L: LossFn>(
    loss: &L,
    params: &ParamStore<f64>,
    eps: f64,
    coverage: Coverage,
    refine: Refine,
) -> Result<GradCheckReport> {
    let f64_loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| loss.eval(g, p);
    let dd_loss = |g: &mut Graph<Dd>, p: &ParamStore<Dd>| loss.eval(g, p);
    let mut wide: Option<ParamStore<Dd>> = None;
    run(&f64_loss, params, eps, coverage, |name, i, a, n| {
        if relative_error(a, n) < refine.tol {
            return Ok(None);
        }
        let work = wide.get_or_insert_with(|| params.cast());
        central(&dd_loss, work, name, i, Dd::from_f64(refine.eps)).map(Some)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_loss_has_unit_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.7]).unwrap());
        let report = grad_check(
            |g, p| {
                let x = g.param(p, "x")?;
                g.sum(x)
            },
            &store,
            1e-6,
            Coverage::All,
        )
        .unwrap();
        assert_eq!(report.params[0].checked, 6);
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn bce_over_logit_grid() {
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::new(&[2, 2], vec![0.4, -1.3, 2.2, -0.1]).unwrap());
        let targets = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.3, 1.0]).unwrap();
        let report = grad_check(
            |g, p| {
                let x = g.param(p, "logits")?;
                g.stable_bce(x, &targets)
            },
            &store,
            1e-6,
            Coverage::All,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let res = grad_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let x = g.param(p, "x")?;
                let y = g.scale(x, calls.get())?;
                g.sum(y)
            },
            &store,
            1e-6,
            Coverage::All,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn sampled_coverage_touches_every_tensor() {
        let mut store = ParamStore::new();
        store.insert("big", Tensor::from_fn(&[10, 10], |i| i as f64 * 0.01));
        store.insert("small", Tensor::from_fn(&[3], |i| i as f64));
        let report = grad_check(
            |g, p| {
                let a = g.param(p, "big")?;
                let b = g.param(p, "small")?;
                let sa = g.sum(a)?;
                let sb = g.sum(b)?;
                let s = g.mul(sa, sb)?;
                g.sum(s)
            },
            &store,
            1e-6,
            Coverage::Sampled { per_tensor: 5, seed: 3 },
        )
        .unwrap();
        assert_eq!(report.params[0].checked, 5);
        assert_eq!(report.params[1].checked, 3);
        assert!(report.passes(1e-6));
    }
}
