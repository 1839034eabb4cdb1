use crate::data::PADDING;
use crate::error::{shape, Error, Result};
use crate::nn::{init_normal, Activation, EncoderLayer, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// Item tower: one `d`-vector per item, row 0 reserved for padding.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub items: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, items: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut t: Tensor<F> = init_normal(rng, &[items + 1, dim], dim, 1.0);
        t.row_mut(PADDING as usize).iter_mut().for_each(|v| *v = F::zero());
        Self {
            id: store.add("item_embedding", t),
            items,
            dim,
        }
    }

    /// `[len, d]` rows; padding indices give zero rows and no gradient.
    pub fn lookup<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, items: &[u32]) -> Result<Var> {
        let table = g.param(store, self.id);
        let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        g.embedding(table, &idx, Some(PADDING as usize))
    }

    /// Plain copy of the rows, outside any graph.
    pub fn rows<F: Scalar>(&self, store: &ParamStore<F>, items: &[u32]) -> Result<Tensor<F>> {
        let table = store.value(self.id);
        let mut data = Vec::with_capacity(items.len() * self.dim);
        for &i in items {
            if i as usize > self.items {
                return Err(shape("embedding", format!("item {i} > {}", self.items)));
            }
            data.extend_from_slice(table.row(i as usize));
        }
        Tensor::new(&[items.len(), self.dim], data)
    }

    pub fn frozen_rows(&self) -> Vec<(ParamId, usize)> {
        vec![(self.id, PADDING as usize)]
    }
}

/// Number of time-lag buckets.
pub const LAG_BUCKETS: usize = 8;

/// Bucket of a non-negative lag in seconds: 0, <1m, <10m, <1h, <1d, <1w,
/// <30d, and beyond.
pub fn lag_bucket(seconds: i64) -> usize {
    const EDGES: [i64; 6] = [60, 600, 3_600, 86_400, 604_800, 2_592_000];
    if seconds <= 0 {
        return 0;
    }
    1 + EDGES.iter().take_while(|&&e| seconds >= e).count()
}

/// Transformer over the current session plus the reconstructed next
/// behavior, mean-pooled over valid positions.
#[derive(Debug, Clone)]
pub struct SessionEncoder {
    pub positions: Option<ParamId>,
    pub max_len: usize,
    pub layers: Vec<EncoderLayer>,
}

impl SessionEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        dim: usize,
        max_len: usize,
        layers: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        let positions = store.add("session.positions", init_normal(rng, &[max_len, dim], dim, 0.1));
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("session.layer{i}"), dim, heads, rng))
            .collect();
        Self {
            positions: Some(positions),
            max_len,
            layers,
        }
    }

    /// No positions and no layers: the output is the masked mean of the input.
    pub fn identity() -> Self {
        Self {
            positions: None,
            max_len: usize::MAX,
            layers: Vec::new(),
        }
    }

    /// `x: [len, d]` to `[1, d]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, valid: &[bool]) -> Result<Var> {
        let len = g.shape(x)[0];
        if valid.len() != len {
            return Err(shape("session_encode", format!("mask {} vs length {len}", valid.len())));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Invalid("session_encode: session has no valid positions".into()));
        }
        if len > self.max_len {
            return Err(shape("session_encode", format!("length {len} exceeds {} positions", self.max_len)));
        }
        let mut h = x;
        if let Some(p) = self.positions {
            let table = g.param(store, p);
            let pos = g.slice(table, 0, 0, len)?;
            h = g.add(h, pos)?;
        }
        for layer in &self.layers {
            h = layer.forward(g, store, h, valid)?;
        }
        let w: Vec<F> = valid
            .iter()
            .map(|&v| if v { F::one() / F::of(count as f64) } else { F::zero() })
            .collect();
        let w = g.constant(Tensor::new(&[1, len], w)?);
        g.matmul(w, h)
    }
}

/// Encodes `[session; x_hat]` (or the session alone) into `h_s`.
pub fn session_encode<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    encoder: &SessionEncoder,
    session: Var,
    x_hat: Option<Var>,
    valid: &[bool],
) -> Result<Var> {
    match x_hat {
        Some(x) => {
            let seq = g.concat(&[session, x], 0)?;
            let mut mask = valid.to_vec();
            mask.push(true);
            encoder.forward(g, store, seq, &mask)
        }
        None => encoder.forward(g, store, session, valid),
    }
}

/// Activation-unit attention of the session interest over the history.
#[derive(Debug, Clone)]
pub struct TargetAttention {
    pub lags: ParamId,
    pub unit: Mlp,
    pub dim: usize,
}

impl TargetAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            lags: store.add("attention.lags", init_normal(rng, &[LAG_BUCKETS, dim], dim, 0.1)),
            unit: Mlp::new(store, "attention.unit", &[4 * dim, hidden, 1], Activation::Gelu, rng),
            dim,
        }
    }

    /// Positive raw scores `[m, 1]` for `history: [m, d]`.
    pub fn scores<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        history: Var,
        h_s: Var,
        lags: &[usize],
    ) -> Result<Var> {
        let m = g.shape(history)[0];
        if lags.len() != m {
            return Err(shape("target_attention", format!("{} lags for {m} history rows", lags.len())));
        }
        let table = g.param(store, self.lags);
        let lag = g.embedding(table, lags, None)?;
        let x = g.add(history, lag)?;
        let hs = g.broadcast_to(h_s, &[m, self.dim])?;
        let diff = g.sub(x, hs)?;
        let prod = g.mul(x, hs)?;
        let unit_in = g.concat(&[x, diff, prod, hs], 1)?;
        let raw = self.unit.forward(g, store, unit_in)?;
        g.softplus(raw)
    }

    /// `h_l: [1, d]`; zeros for an empty history.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        history: Option<Var>,
        h_s: Var,
        lags: &[usize],
    ) -> Result<Var> {
        match history {
            None => Ok(g.constant(Tensor::zeros(&[1, self.dim]))),
            Some(h) => {
                let s = self.scores(g, store, h, h_s, lags)?;
                attention_pool(g, s, h)
            }
        }
    }
}

/// `a = s / sum(s)` and `sum_j a_j x_j` for `scores: [m, 1]`, `items: [m, d]`.
pub fn attention_weights<F: Scalar>(g: &mut Graph<F>, scores: Var) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let total = g.sum(scores)?;
    let total = g.broadcast_to(total, &shape)?;
    g.div(scores, total)
}

pub fn attention_pool<F: Scalar>(g: &mut Graph<F>, scores: Var, items: Var) -> Result<Var> {
    let a = attention_weights(g, scores)?;
    let at = g.transpose(a)?;
    g.matmul(at, items)
}

/// Output network over `concat([h_l, h_s])`.
#[derive(Debug, Clone)]
pub struct UserHead {
    pub mlp: Mlp,
}

impl UserHead {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, dim: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "user_head", &[2 * dim, 2 * dim, dim], Activation::Gelu, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h_l: Var, h_s: Var) -> Result<Var> {
        let x = g.concat(&[h_l, h_s], 1)?;
        self.mlp.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn buckets() {
        let cases = [
            (0, 0),
            (-5, 0),
            (1, 1),
            (59, 1),
            (60, 2),
            (599, 2),
            (3_599, 3),
            (3_600, 4),
            (86_399, 4),
            (86_400, 5),
            (604_800, 6),
            (2_591_999, 6),
            (2_592_000, 7),
        ];
        for (s, b) in cases {
            assert_eq!(lag_bucket(s), b, "lag {s}");
        }
    }

    #[test]
    fn padding_row_starts_zero() {
        let mut store = ParamStore::<f64>::new();
        let t = EmbeddingTable::new(&mut store, 5, 4, &mut Rng::new(0));
        assert!(store.value(t.id).row(0).iter().all(|&v| v == 0.0));
        assert_eq!(t.frozen_rows(), vec![(t.id, 0)]);
    }

    #[test]
    fn identity_encoder_averages() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 2], &[5.0, -1.0]).unwrap());
        let h = session_encode(&mut g, &store, &SessionEncoder::identity(), v, Some(w), &[true]).unwrap();
        assert_eq!(g.value(h).data(), &[3.0, 1.0]);
    }

    #[test]
    fn mask_ignores_padded_positions() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let enc = SessionEncoder::new(&mut store, 4, 6, 1, 2, &mut rng);
        let base = rng.gaussian::<f64>(&[4, 4]);
        let run = |x: Tensor<f64>| {
            let mut g = Graph::inference();
            let x = g.constant(x);
            let h = enc.forward(&mut g, &store, x, &[true, true, false, false]).unwrap();
            g.value(h).clone()
        };
        let mut swapped = base.clone();
        let (r2, r3) = (base.row(2).to_vec(), base.row(3).to_vec());
        swapped.row_mut(2).copy_from_slice(&r3);
        swapped.row_mut(3).copy_from_slice(&r2);
        let (a, b) = (run(base), run(swapped));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(enc.forward(&mut g, &store, x, &[false, false]).is_err());
    }

    #[test]
    fn weights_normalise() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap());
        let a = attention_weights(&mut g, s).unwrap();
        assert_eq!(g.value(a).data(), &[0.25, 0.75]);

        let items = g.constant(Tensor::from_f64(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let s = g.constant(Tensor::from_f64(&[3, 1], &[2.0, 2.0, 2.0]).unwrap());
        let h = attention_pool(&mut g, s, items).unwrap();
        assert_eq!(g.value(h).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_output_in_hull() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(8);
        let att = TargetAttention::new(&mut store, 4, 8, &mut rng);
        let mut g = Graph::inference();
        let hist_t = rng.gaussian::<f64>(&[5, 4]);
        let hist = g.constant(hist_t.clone());
        let hs = g.constant(rng.gaussian(&[1, 4]));
        let s = att.scores(&mut g, &store, hist, hs, &[0, 1, 2, 3, 7]).unwrap();
        let a = attention_weights(&mut g, s).unwrap();
        let w = g.value(a).data().to_vec();
        assert!(w.iter().all(|&x| x > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h = att.forward(&mut g, &store, Some(hist), hs, &[0, 1, 2, 3, 7]).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|r| hist_t.row(r)[c]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
            let v = g.value(h).data()[c];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        let empty = att.forward(&mut g, &store, None, hs, &[]).unwrap();
        assert!(g.value(empty).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_head() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "avg", 4, 2, false, &mut Rng::new(0));
        *store.value_mut(lin.weight) = Tensor::from_f64(&[4, 2], &[0.5, 0., 0., 0.5, 0.5, 0., 0., 0.5]).unwrap();
        let head = UserHead {
            mlp: Mlp {
                layers: vec![lin],
                activation: Activation::Gelu,
            },
        };
        let mut g = Graph::new();
        let hl = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let hs = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -2.0]).unwrap());
        let e = head.forward(&mut g, &store, hl, hs).unwrap();
        assert_eq!(g.value(e).data(), &[2.0, 0.0]);
    }
}
