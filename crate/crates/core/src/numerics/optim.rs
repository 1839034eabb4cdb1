use super::{ParamId, ParamStore, Scalar, Tensor};

/// Dense per-parameter gradient accumulator; the single merge point for
/// gradients computed on independent graphs.
#[derive(Debug, Clone)]
pub struct GradBuffer<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradBuffer<F> {
    pub fn new(param_count: usize) -> Self {
        Self {
            grads: vec![None; param_count],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds another buffer into this one, parameter by parameter.
    pub fn merge(&mut self, other: GradBuffer<F>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; param_count],
            v: vec![None; param_count],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Rows listed in `frozen_rows` (per parameter) are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradBuffer<F>, frozen_rows: &[(ParamId, usize)]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step_size = F::of(c.lr / bc1);
        let (inv_bc2, eps) = (F::of(1.0 / bc2), F::of(c.eps));
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            let skip: Vec<usize> = frozen_rows.iter().filter(|(pid, _)| *pid == id).map(|&(_, r)| r).collect();
            let cols = p.cols();
            for (i, ((pv, &gv), (mv, vv))) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .enumerate()
            {
                if !skip.is_empty() && skip.contains(&(i / cols)) {
                    continue;
                }
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}
