use super::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(mut self, other: GradCheck) -> GradCheck {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst);
        }
        self
    }
}

fn coordinates(len: usize, max: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_loss(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::Backward(format!("loss must be scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the reverse-mode gradient of `f(theta)` against central
/// differences with step `h`, on up to `max_coords` sampled coordinates.
pub fn grad_check<B>(f: B, theta: &Tensor<f64>, h: f64, max_coords: Option<usize>, seed: u64) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(theta.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let l = f(&mut g, x)?;
        scalar_loss(&g, l)
    };
    let mut report = GradCheck::empty();
    let mut rng = Rng::new(seed);
    for i in coordinates(theta.len(), max_coords, &mut rng) {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record("theta", i, analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Gradient check over every parameter in `ids` of a store, where `f` builds
/// the scalar objective from scratch on a fresh graph.
pub fn grad_check_params<B>(
    f: B,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_params(f, store, ids, h, coords_per_param, seed, false)
}

/// As [`grad_check_params`], but the numeric side is the Richardson
/// combination `(4 D(h/2) - D(h)) / 3` of two central differences, accurate
/// to O(h^4). A larger `h` then keeps roundoff far below tiny gradients.
pub fn grad_check_params_extrapolated<B>(
    f: B,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_params(f, store, ids, h, coords_per_param, seed, true)
}

fn check_params<B>(
    f: B,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
    extrapolate: bool,
) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic: Vec<(ParamId, Tensor<f64>)> = g.param_grads().map(|(id, t)| (id, t.clone())).collect();
    let grad_of = |id: ParamId| {
        analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        scalar_loss(&g, l)
    };
    let mut report = GradCheck::empty();
    let mut rng = Rng::new(seed);
    let mut work = store.clone();
    for &id in ids {
        let grad = grad_of(id);
        let base = store.value(id).clone();
        let name = store.get(id).name.clone();
        for i in coordinates(base.len(), coords_per_param, &mut rng) {
            let orig = base.data()[i];
            let mut central = |step: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = orig + step;
                let up = eval(&work)?;
                work.value_mut(id).data_mut()[i] = orig - step;
                let down = eval(&work)?;
                work.value_mut(id).data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let numeric = if extrapolate {
                let coarse = central(h)?;
                (4.0 * central(0.5 * h)? - coarse) / 3.0
            } else {
                central(h)?
            };
            report.record(&name, i, grad.data()[i], numeric);
        }
    }
    Ok(report)
}
