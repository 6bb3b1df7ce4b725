//! Forward and backward kernels shared by the tape and the incremental decoder.

use std::ops::Range;

use super::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let n = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut mean = Vec::with_capacity(x.rows);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mu) * rs * g[c] + b[c];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, LnCache { mean, rstd })
}

/// Returns `dx` and accumulates into `dg`, `db`.
pub fn layer_norm_backward(
    dy: &Mat,
    x: &Mat,
    g: &[f64],
    cache: &LnCache,
    dg: &mut [f64],
    db: &mut [f64],
) -> Mat {
    let n = x.cols;
    let mut dx = Mat::zeros(x.rows, n);
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for r in 0..x.rows {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let (row, dyr) = (x.row(r), dy.row(r));
        let (mut m1, mut m2) = (0.0, 0.0);
        for c in 0..n {
            xhat[c] = (row[c] - mu) * rs;
            dg[c] += dyr[c] * xhat[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Full,
    /// Local query `a` sees local keys `0..=a + q_offset`.
    Causal { q_offset: usize },
}

/// Packed multi-head attention: query segment `s` attends key segment `s`.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub heads: usize,
    pub q_segs: Vec<Range<usize>>,
    pub k_segs: Vec<Range<usize>>,
    pub mask: Mask,
}

impl AttnSpec {
    pub fn single(heads: usize, lq: usize, lk: usize, mask: Mask) -> Self {
        Self {
            heads,
            q_segs: vec![0..lq],
            k_segs: vec![0..lk],
            mask,
        }
    }

    /// Self-attention over equal query and key segments.
    pub fn packed(heads: usize, segs: Vec<Range<usize>>, mask: Mask) -> Self {
        Self {
            heads,
            q_segs: segs.clone(),
            k_segs: segs,
            mask,
        }
    }

    fn visible(&self, a: usize, lk: usize) -> usize {
        match self.mask {
            Mask::Full => lk,
            Mask::Causal { q_offset } => (a + q_offset + 1).min(lk),
        }
    }

    fn prob_len(&self) -> usize {
        self.q_segs
            .iter()
            .zip(&self.k_segs)
            .map(|(q, k)| self.heads * q.len() * k.len())
            .sum()
    }
}

/// Relative offsets added to keys and values. For segment `s`, query `a`
/// and key `b`, the offset row is `index[base[s] + a * len_k + b]` of the
/// offset tables; offsets have the per-head width and are shared by all heads.
#[derive(Debug, Clone)]
pub struct RelIndex {
    pub base: Vec<usize>,
    pub index: Vec<u32>,
}

impl RelIndex {
    /// Dense layout for one segment: row `a * lk + b`.
    pub fn dense(lq: usize, lk: usize) -> Self {
        Self {
            base: vec![0],
            index: (0..(lq * lk) as u32).collect(),
        }
    }
}

pub struct RelTables<'a> {
    pub mk: &'a Mat,
    pub mv: &'a Mat,
    pub index: &'a RelIndex,
}

pub fn attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    spec: &AttnSpec,
    rel: Option<&RelTables<'_>>,
) -> (Mat, Vec<f64>) {
    let dm = q.cols;
    assert_eq!(dm % spec.heads, 0, "model width divisible by heads");
    assert_eq!((k.cols, v.cols), (dm, dm), "attention widths");
    let d = dm / spec.heads;
    if let Some(r) = rel {
        assert_eq!((r.mk.cols, r.mv.cols), (d, d), "offset width equals head width");
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Mat::zeros(q.rows, dm);
    let mut probs = vec![0.0; spec.prob_len()];
    let mut pbase = 0;
    let mut kk = vec![0.0; d];
    for (s, (qs, ks)) in spec.q_segs.iter().zip(&spec.k_segs).enumerate() {
        let (lq, lk) = (qs.len(), ks.len());
        for h in 0..spec.heads {
            let cols = h * d..(h + 1) * d;
            for a in 0..lq {
                let qa = &q.row(qs.start + a)[cols.clone()];
                let p = &mut probs[pbase + (h * lq + a) * lk..pbase + (h * lq + a + 1) * lk];
                let vis = spec.visible(a, lk);
                if vis == 0 {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for b in 0..vis {
                    kk.copy_from_slice(&k.row(ks.start + b)[cols.clone()]);
                    if let Some(r) = rel {
                        let o = r.index.index[r.index.base[s] + a * lk + b] as usize;
                        for (x, m) in kk.iter_mut().zip(r.mk.row(o)) {
                            *x += m;
                        }
                    }
                    let e = qa.iter().zip(&kk).map(|(x, y)| x * y).sum::<f64>() * scale;
                    p[b] = e;
                    max = max.max(e);
                }
                let mut z = 0.0;
                for pb in p[..vis].iter_mut() {
                    *pb = (*pb - max).exp();
                    z += *pb;
                }
                let o_row = &mut out.row_mut(qs.start + a)[cols.clone()];
                for b in 0..vis {
                    p[b] /= z;
                    let vb = &v.row(ks.start + b)[cols.clone()];
                    for (o, x) in o_row.iter_mut().zip(vb) {
                        *o += p[b] * x;
                    }
                    if let Some(r) = rel {
                        let oi = r.index.index[r.index.base[s] + a * lk + b] as usize;
                        for (o, x) in o_row.iter_mut().zip(r.mv.row(oi)) {
                            *o += p[b] * x;
                        }
                    }
                }
            }
        }
        pbase += spec.heads * lq * lk;
    }
    (out, probs)
}

pub struct AttnGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
    pub dmk: Option<Mat>,
    pub dmv: Option<Mat>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    spec: &AttnSpec,
    rel: Option<&RelTables<'_>>,
    probs: &[f64],
) -> AttnGrads {
    let dm = q.cols;
    let d = dm / spec.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, dm);
    let mut dk = Mat::zeros(k.rows, dm);
    let mut dv = Mat::zeros(v.rows, dm);
    let mut dmk = rel.map(|r| Mat::zeros(r.mk.rows, d));
    let mut dmv = rel.map(|r| Mat::zeros(r.mv.rows, d));
    let mut pbase = 0;
    let mut dp = Vec::new();
    for (s, (qs, ks)) in spec.q_segs.iter().zip(&spec.k_segs).enumerate() {
        let (lq, lk) = (qs.len(), ks.len());
        for h in 0..spec.heads {
            let cols = h * d..(h + 1) * d;
            for a in 0..lq {
                let vis = spec.visible(a, lk);
                let p = &probs[pbase + (h * lq + a) * lk..][..vis];
                let go = &dout.row(qs.start + a)[cols.clone()];
                let qa = &q.row(qs.start + a)[cols.clone()];
                let off = |b: usize| {
                    rel.map(|r| r.index.index[r.index.base[s] + a * lk + b] as usize)
                };
                dp.clear();
                let mut dot = 0.0;
                for b in 0..vis {
                    let vb = &v.row(ks.start + b)[cols.clone()];
                    let mut g = go.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>();
                    if let (Some(r), Some(o)) = (rel, off(b)) {
                        g += go.iter().zip(r.mv.row(o)).map(|(x, y)| x * y).sum::<f64>();
                    }
                    dp.push(g);
                    dot += p[b] * g;
                }
                for b in 0..vis {
                    let pb = p[b];
                    for (o, x) in dv.row_mut(ks.start + b)[cols.clone()].iter_mut().zip(go) {
                        *o += pb * x;
                    }
                    if let (Some(dmv), Some(o)) = (dmv.as_mut(), off(b)) {
                        for (t, x) in dmv.row_mut(o).iter_mut().zip(go) {
                            *t += pb * x;
                        }
                    }
                    let ds = pb * (dp[b] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kb = &k.row(ks.start + b)[cols.clone()];
                    let dqa = &mut dq.row_mut(qs.start + a)[cols.clone()];
                    for (o, x) in dqa.iter_mut().zip(kb) {
                        *o += ds * x;
                    }
                    if let (Some(r), Some(o)) = (rel, off(b)) {
                        for (t, x) in dqa.iter_mut().zip(r.mk.row(o)) {
                            *t += ds * x;
                        }
                    }
                    for (o, x) in dk.row_mut(ks.start + b)[cols.clone()].iter_mut().zip(qa) {
                        *o += ds * x;
                    }
                    if let (Some(dmk), Some(o)) = (dmk.as_mut(), off(b)) {
                        for (t, x) in dmk.row_mut(o).iter_mut().zip(qa) {
                            *t += ds * x;
                        }
                    }
                }
            }
        }
        pbase += spec.heads * lq * lk;
    }
    AttnGrads {
        dq,
        dk,
        dv,
        dmk,
        dmv,
    }
}

/// Cross-attention of decoder queries `q` (`T x d_c`) over encoder keys and
/// values (`l_x x d_c`) with relative offsets `mk`, `mv` of shape
/// `(T * l_x) x d`, row `j * l_x + i` holding the offset between query `j`
/// and key `i`. With `mk = mv = 0` this is standard multi-head attention.
pub fn cross_attention_rel(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    mk: &Mat,
    mv: &Mat,
    heads: usize,
) -> Mat {
    let index = RelIndex::dense(q.rows, k.rows);
    let spec = AttnSpec::single(heads, q.rows, k.rows, Mask::Full);
    let rel = RelTables { mk, mv, index: &index };
    attention(q, k, v, &spec, Some(&rel)).0
}
