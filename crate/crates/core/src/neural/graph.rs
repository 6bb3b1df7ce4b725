//! Reverse-mode automatic differentiation over a linear tape.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::kernels::{self, AttnSpec, LnCache, RelIndex, RelTables};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, linear, Mat};

pub type NodeId = usize;

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        g: NodeId,
        b: NodeId,
        cache: LnCache,
    },
    Gelu(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: Arc<AttnSpec>,
        rel: Option<(NodeId, NodeId, Arc<RelIndex>)>,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: NodeId,
        segs: Vec<Range<usize>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        scale: f64,
        probs: Mat,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// One forward pass. Parameter values are read from the store, never copied.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&p) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(p),
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(p, n);
        n
    }

    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Input)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let v = linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (v, cache) =
            kernels::layer_norm(self.value(x), &self.value(g).data, &self.value(b).data);
        self.push(v, Op::LayerNorm { x, g, b, cache })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let v = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|&a| kernels::gelu(a)).collect());
        self.push(v, Op::Gelu(x))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let v = self.value(table).select_rows(&ids);
        self.push(v, Op::Gather { table, ids })
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: Arc<AttnSpec>,
        rel: Option<(NodeId, NodeId, Arc<RelIndex>)>,
    ) -> NodeId {
        let (out, probs) = {
            let tables = rel.as_ref().map(|(mk, mv, index)| RelTables {
                mk: self.value(*mk),
                mv: self.value(*mv),
                index,
            });
            kernels::attention(self.value(q), self.value(k), self.value(v), &spec, tables.as_ref())
        };
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                rel,
                probs,
            },
        )
    }

    /// One output row per segment: the mean of its rows.
    pub fn segment_mean(&mut self, x: NodeId, segs: Vec<Range<usize>>) -> NodeId {
        let src = self.value(x);
        let mut out = Mat::zeros(segs.len(), src.cols);
        for (s, r) in segs.iter().enumerate() {
            assert!(!r.is_empty(), "empty segment");
            let inv = 1.0 / r.len() as f64;
            let o = out.row_mut(s);
            for i in r.clone() {
                for (a, b) in o.iter_mut().zip(src.row(i)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        self.push(out, Op::SegmentMean { x, segs })
    }

    /// `scale * sum_r -log softmax(logits_r)[targets_r]`, a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, scale: f64) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let mut probs = Mat::zeros(l.rows, l.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lp = kernels::log_softmax(l.row(r));
            total -= lp[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(&lp) {
                *p = v.exp();
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![total * scale]),
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            },
        )
    }

    /// Gradients of the scalar node `out` with respect to every trainable
    /// parameter used in the pass.
    pub fn backward(&self, out: NodeId) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(out);
        grads[out] = Some(Mat::from_vec(seed.rows, seed.cols, vec![1.0; seed.len()]));
        let mut result = Grads::empty(self.store.len());
        for id in (0..=out).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let acc = |grads: &mut Vec<Option<Mat>>, n: NodeId, g: Mat| {
                if !self.needs_grad(n) {
                    return;
                }
                match &mut grads[n] {
                    Some(a) => a.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => {
                    if self.store.trainable(*p) {
                        result.accumulate(*p, dy);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs_grad(*x) {
                        let mut dx = Mat::zeros(xv.rows, xv.cols);
                        gemm(dy.rows, dy.cols, wv.rows, 1.0, &dy.data, false, &wv.data, true, 0.0, &mut dx.data);
                        acc(&mut grads, *x, dx);
                    }
                    if self.needs_grad(*w) {
                        let mut dw = Mat::zeros(wv.rows, wv.cols);
                        gemm(xv.cols, xv.rows, dy.cols, 1.0, &xv.data, true, &dy.data, false, 0.0, &mut dw.data);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = Mat::zeros(1, dy.cols);
                        for r in 0..dy.rows {
                            for (a, v) in db.data.iter_mut().zip(dy.row(r)) {
                                *a += v;
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::LayerNorm { x, g, b, cache } => {
                    let gv = &self.value(*g).data;
                    let mut dg = vec![0.0; gv.len()];
                    let mut db = vec![0.0; gv.len()];
                    let dx = kernels::layer_norm_backward(&dy, self.value(*x), gv, cache, &mut dg, &mut db);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *g, Mat::from_vec(1, dg.len(), dg));
                    acc(&mut grads, *b, Mat::from_vec(1, db.len(), db));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = xv.data.iter().zip(&dy.data).map(|(&a, g)| g * kernels::gelu_grad(a)).collect();
                    acc(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, dx));
                }
                Op::Gather { table, ids } => {
                    if self.needs_grad(*table) {
                        let tv = self.value(*table);
                        let mut dt = Mat::zeros(tv.rows, tv.cols);
                        for (r, &i) in ids.iter().enumerate() {
                            for (a, v) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                                *a += v;
                            }
                        }
                        acc(&mut grads, *table, dt);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    rel,
                    probs,
                } => {
                    let tables = rel.as_ref().map(|(mk, mv, index)| RelTables {
                        mk: self.value(*mk),
                        mv: self.value(*mv),
                        index,
                    });
                    let g = kernels::attention_backward(
                        &dy,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        spec,
                        tables.as_ref(),
                        probs,
                    );
                    acc(&mut grads, *q, g.dq);
                    acc(&mut grads, *k, g.dk);
                    acc(&mut grads, *v, g.dv);
                    if let Some((mk, mv, _)) = rel {
                        acc(&mut grads, *mk, g.dmk.unwrap());
                        acc(&mut grads, *mv, g.dmv.unwrap());
                    }
                }
                Op::SegmentMean { x, segs } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (s, r) in segs.iter().enumerate() {
                        let inv = 1.0 / r.len() as f64;
                        for i in r.clone() {
                            for (a, v) in dx.row_mut(i).iter_mut().zip(dy.row(s)) {
                                *a += v * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    scale,
                    probs,
                } => {
                    let s = dy.data[0] * scale;
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl.row_mut(r)[t] -= 1.0;
                    }
                    dl.scale(s);
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        result
    }

    fn needs_grad(&self, n: NodeId) -> bool {
        match &self.nodes[n].op {
            Op::Input => false,
            Op::Param(p) => self.store.trainable(*p),
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_cross_entropy_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(2, 3, vec![0.1, -0.2, 0.3, 0.05, 0.4, -0.1]), true);
        let x = Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let xi = g.input(x.clone());
            let wi = g.param(w);
            let l = g.linear(xi, wi, None);
            let out = g.cross_entropy(l, vec![2, 0], 0.5);
            (g.value(out).data[0], g.backward(out))
        };
        let (_, grads) = loss(&store);
        let gw = grads.g[w].clone().unwrap();
        for c in 0..6 {
            let mut p = store.clone();
            p.get_mut(w).data[c] += 1e-6;
            let mut m = store.clone();
            m.get_mut(w).data[c] -= 1e-6;
            let num = (loss(&p).0 - loss(&m).0) / 2e-6;
            assert!((num - gw.data[c]).abs() < 1e-8, "coord {c}");
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 2, vec![0.3, 0.7]), false);
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_vec(1, 1, vec![1.0]));
        let wi = g.param(w);
        let l = g.linear(x, wi, None);
        let out = g.cross_entropy(l, vec![0], 1.0);
        assert!(g.backward(out).g[w].is_none());
    }
}
