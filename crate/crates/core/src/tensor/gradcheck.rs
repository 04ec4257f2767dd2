use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged by absolute error.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` builds a scalar loss on the graph it is given; it must be a
/// deterministic function of the parameter values. Parameter gradients in
/// `store` are overwritten.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config("gradient check eps must be positive".into()));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Eval(format!("loss is not finite: {base}")));
    }
    g.backward(loss, store)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(format!("perturbed loss is not finite: {v}")))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        tol: opts.tol,
    };
    for &id in ids {
        let n = store.get(id).tensor.numel();
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .expect("zero_grad populated every buffer")
            .data()
            .to_vec();
        let mut entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        entries.sort_unstable();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: entries.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &entries {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let err = relative_error(analytic[i], numeric, opts.floor);
            if i == entries[0] || err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    store.clear_grad();
    Ok(report)
}
