//! Layers shared by every stage of the model, built on [`crate::diffcore`].
//!
//! Parameters are initialised with the scaled-uniform fan-in scheme:
//! weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Graph, NdArray, NodeId, ParamId, ParamStore};

pub type NnResult<T> = Result<T, DiffError>;

pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> NdArray {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    NdArray::new(shape.to_vec(), data).expect("shape matches data")
}

/// Registers parameters under a common name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> NnResult<T>) -> NnResult<T> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> NnResult<ParamId> {
        let v = init_uniform(self.rng, shape, fan_in);
        self.store.register(self.full(name), v)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> NnResult<ParamId> {
        self.store.register(self.full(name), NdArray::zeros(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> NnResult<Self> {
        bd.scope(name, |bd| {
            let w = bd.uniform("w", &[in_dim, out_dim], in_dim)?;
            let b = if bias { Some(bd.zeros("b", &[out_dim])?) } else { None };
            Ok(Self { w, b, in_dim, out_dim })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NnResult<NodeId> {
        let w = g.param(p, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(p, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> NnResult<Self> {
        bd.scope(name, |bd| {
            Ok(Self {
                l1: Linear::new(bd, "l1", in_dim, hidden, true)?,
                l2: Linear::new(bd, "l2", hidden, out_dim, true)?,
            })
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NnResult<NodeId> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, p, h)
    }
}

/// Residual feed-forward sub-block: `x + W2 relu(W1 LN(x) + b1) + b2`.
#[derive(Clone, Debug)]
pub struct ResidualFfn {
    pub mlp: Mlp,
}

impl ResidualFfn {
    pub fn new(bd: &mut Builder, name: &str, dim: usize, hidden: usize) -> NnResult<Self> {
        Ok(Self {
            mlp: Mlp::new(bd, name, dim, hidden, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NnResult<NodeId> {
        let n = g.layer_norm(x, 1)?;
        let h = self.mlp.forward(g, p, n)?;
        g.add(x, h)
    }
}

/// `[D, H]` matrix summing each head's block of channels.
pub fn head_sum_matrix(dim: usize, heads: usize) -> NdArray {
    let dh = dim / heads;
    let mut m = NdArray::zeros(&[dim, heads]);
    for d in 0..dim {
        m.data_mut()[d * heads + d / dh] = 1.0;
    }
    m
}

/// `[H, D]` matrix copying each head's weight onto its channels.
pub fn head_expand_matrix(dim: usize, heads: usize) -> NdArray {
    let dh = dim / heads;
    let mut m = NdArray::zeros(&[heads, dim]);
    for d in 0..dim {
        m.data_mut()[(d / dh) * dim + d] = 1.0;
    }
    m
}

/// Keys, values and normalised inputs of a set of attention sources.
#[derive(Clone, Copy, Debug)]
pub struct KvCache {
    pub normed: NodeId,
    pub keys: NodeId,
    pub values: NodeId,
    pub rows: usize,
}

/// Multi-head cross-attention over an edge list, with optional per-source
/// geometric features and per-link sigmoid gates on the values.
///
/// Each link `(dst, src)` lets query row `dst` attend to source `src`.
/// The returned message has one row per query; rows without links are
/// exactly zero, because the output projection and feed-forward part are
/// bias free.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    pub dim: usize,
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub edge: Option<Linear>,
    pub gate: Option<Mlp>,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl GatedAttention {
    pub fn new(
        bd: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        edge_dim: Option<usize>,
        gated: bool,
    ) -> NnResult<Self> {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        bd.scope(name, |bd| {
            Ok(Self {
                dim,
                heads,
                wq: Linear::new(bd, "q", dim, dim, false)?,
                wk: Linear::new(bd, "k", dim, dim, false)?,
                wv: Linear::new(bd, "v", dim, dim, false)?,
                wo: Linear::new(bd, "o", dim, dim, false)?,
                edge: match edge_dim {
                    Some(e) => Some(Linear::new(bd, "edge", e, dim, true)?),
                    None => None,
                },
                gate: if gated { Some(Mlp::new(bd, "gate", 2 * dim, dim, dim)?) } else { None },
                ffn_in: Linear::new(bd, "ffn_in", dim, 2 * dim, false)?,
                ffn_out: Linear::new(bd, "ffn_out", 2 * dim, dim, false)?,
            })
        })
    }

    /// Source content `rows` plus the projected geometric `edge_feat`, then
    /// normalised and projected to keys and values.
    pub fn prepare(&self, g: &mut Graph, p: &ParamStore, rows: NodeId, edge_feat: Option<NodeId>) -> NnResult<KvCache> {
        let n = g.shape(rows)[0];
        let mut x = rows;
        match (&self.edge, edge_feat) {
            (Some(lin), Some(f)) => {
                let e = lin.forward(g, p, f)?;
                x = g.add(x, e)?;
            }
            (None, None) => {}
            _ => {
                return Err(DiffError::Invalid {
                    op: "attention",
                    msg: "edge features must be given exactly when the block has an edge projection".into(),
                })
            }
        }
        let normed = g.layer_norm(x, 1)?;
        let keys = self.wk.forward(g, p, normed)?;
        let values = self.wv.forward(g, p, normed)?;
        Ok(KvCache {
            normed,
            keys,
            values,
            rows: n,
        })
    }

    /// Message for every query row of `queries` from the links `(dst, src)`.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        queries: NodeId,
        kv: &KvCache,
        links: &[(usize, usize)],
    ) -> NnResult<NodeId> {
        let nq = g.shape(queries)[0];
        if links.is_empty() {
            return Ok(g.constant(NdArray::zeros(&[nq, self.dim])));
        }
        let dst: Vec<usize> = links.iter().map(|l| l.0).collect();
        let src: Vec<usize> = links.iter().map(|l| l.1).collect();
        let qn = g.layer_norm(queries, 1)?;
        let q = self.wq.forward(g, p, qn)?;
        let ql = g.gather_rows(q, dst.clone())?;
        let kl = g.gather_rows(kv.keys, src.clone())?;
        let vl = g.gather_rows(kv.values, src.clone())?;

        let prod = g.mul(ql, kl)?;
        let hsum = g.constant(head_sum_matrix(self.dim, self.heads));
        let logits = g.matmul(prod, hsum)?;
        let logits = g.scale(logits, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        let alpha = g.segment_softmax(logits, dst.clone(), nq)?;
        let hexp = g.constant(head_expand_matrix(self.dim, self.heads));
        let alpha = g.matmul(alpha, hexp)?;

        let mut vl = vl;
        if let Some(gate) = &self.gate {
            let sl = g.gather_rows(kv.normed, src)?;
            let dl = g.gather_rows(qn, dst.clone())?;
            let cat = g.concat(&[sl, dl], 1)?;
            let z = gate.forward(g, p, cat)?;
            let gv = g.sigmoid(z)?;
            vl = g.mul(vl, gv)?;
        }
        let msg = g.mul(alpha, vl)?;
        let agg = g.scatter_add_rows(msg, dst, nq)?;
        let o = self.wo.forward(g, p, agg)?;
        let h = self.ffn_in.forward(g, p, o)?;
        let h = g.relu(h)?;
        let h = self.ffn_out.forward(g, p, h)?;
        g.add(o, h)
    }

    /// Gate activations for each link, for inspection in tests.
    pub fn gate_values(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        queries: NodeId,
        kv: &KvCache,
        links: &[(usize, usize)],
    ) -> NnResult<Option<NodeId>> {
        let Some(gate) = &self.gate else { return Ok(None) };
        let dst: Vec<usize> = links.iter().map(|l| l.0).collect();
        let src: Vec<usize> = links.iter().map(|l| l.1).collect();
        let qn = g.layer_norm(queries, 1)?;
        let sl = g.gather_rows(kv.normed, src)?;
        let dl = g.gather_rows(qn, dst)?;
        let cat = g.concat(&[sl, dl], 1)?;
        let z = gate.forward(g, p, cat)?;
        Ok(Some(g.sigmoid(z)?))
    }
}

/// Constant `[n, k]` one-hot rows.
pub fn one_hot(indices: &[usize], k: usize) -> NdArray {
    let mut m = NdArray::zeros(&[indices.len(), k]);
    for (i, &c) in indices.iter().enumerate() {
        m.data_mut()[i * k + c] = 1.0;
    }
    m
}

/// Row-stacks equal-width feature vectors into an `[n, width]` array.
pub fn stack_rows(rows: &[Vec<f64>], width: usize) -> NdArray {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
    }
    NdArray::new(vec![rows.len(), width], data).expect("rows have the stated width")
}
