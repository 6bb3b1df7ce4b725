//! Pre-norm encoder-decoder transformer with a state-flag encoder whose
//! outputs enter the decoder cross-attention as relative key/value offsets.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tracking::StateMatrix;
use crate::vocab::{TokenId, Vocab, BOS, EOS, MIN_VOCAB};

use super::flags::{flag_seed_token, tokenize_flag, FlagInput, FlagStrings, FLAG_ALPHABET};
use super::graph::{Graph, NodeId};
use super::kernels::{self, AttnSpec, Mask, RelIndex, RelTables};
use super::params::{apply_freeze_mask, FreezeMode, Grads, ParamId, ParamStore, FLAG_EMBED};
use super::tensor::{linear, Mat};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model width `d_c`; the embedding width equals it.
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub flag_ffn: usize,
    pub flag_heads: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub max_flag_len: usize,
    /// `false` gives the plain sequence-to-sequence baseline.
    pub use_flags: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 64,
            flag_ffn: 256,
            flag_heads: 4,
            max_src_len: 96,
            max_tgt_len: 64,
            max_flag_len: 48,
            use_flags: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Per-head width `d`, also the flag encoder width.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.use_flags && self.vocab_size < MIN_VOCAB {
            return bad(format!("vocab_size must be at least {MIN_VOCAB} with flags on"));
        }
        if self.vocab_size <= EOS as usize {
            return bad("vocab_size must include BOS and EOS".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads".into());
        }
        if self.flag_heads == 0 || self.head_dim() % self.flag_heads != 0 {
            return bad("the head width must be a multiple of flag_heads".into());
        }
        if self.ffn == 0 || self.flag_ffn == 0 {
            return bad("feed-forward sizes must be positive".into());
        }
        if self.max_src_len == 0 || self.max_tgt_len == 0 || self.max_flag_len == 0 {
            return bad("maximum lengths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct FlagIds {
    embed: ParamId,
    pos: ParamId,
    layer: EncLayer,
    ln: LnIds,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    out_w: ParamId,
    out_b: ParamId,
    flag: Option<FlagIds>,
}

/// Parameter shapes in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (v, dc, d) = (cfg.vocab_size, cfg.d_model, cfg.head_dim());
    let mut out = vec![
        ("embed".to_string(), v, dc),
        ("enc.pos".to_string(), cfg.max_src_len, dc),
        ("dec.pos".to_string(), cfg.max_tgt_len, dc),
    ];
    let ln = |out: &mut Vec<(String, usize, usize)>, p: &str, w: usize| {
        out.push((format!("{p}.g"), 1, w));
        out.push((format!("{p}.b"), 1, w));
    };
    let attn = |out: &mut Vec<(String, usize, usize)>, p: &str, w: usize| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), w, w));
            out.push((format!("{p}.b{m}"), 1, w));
        }
    };
    let ffn = |out: &mut Vec<(String, usize, usize)>, p: &str, w: usize, h: usize| {
        out.push((format!("{p}.w1"), w, h));
        out.push((format!("{p}.b1"), 1, h));
        out.push((format!("{p}.w2"), h, w));
        out.push((format!("{p}.b2"), 1, w));
    };
    for l in 0..cfg.enc_layers {
        ln(&mut out, &format!("enc.{l}.ln1"), dc);
        attn(&mut out, &format!("enc.{l}.self"), dc);
        ln(&mut out, &format!("enc.{l}.ln2"), dc);
        ffn(&mut out, &format!("enc.{l}.ffn"), dc, cfg.ffn);
    }
    ln(&mut out, "enc.ln", dc);
    for l in 0..cfg.dec_layers {
        ln(&mut out, &format!("dec.{l}.ln1"), dc);
        attn(&mut out, &format!("dec.{l}.self"), dc);
        ln(&mut out, &format!("dec.{l}.ln2"), dc);
        attn(&mut out, &format!("dec.{l}.cross"), dc);
        ln(&mut out, &format!("dec.{l}.ln3"), dc);
        ffn(&mut out, &format!("dec.{l}.ffn"), dc, cfg.ffn);
    }
    ln(&mut out, "dec.ln", dc);
    out.push(("out.w".to_string(), dc, v));
    out.push(("out.b".to_string(), 1, v));
    if cfg.use_flags {
        out.push((FLAG_EMBED.to_string(), FLAG_ALPHABET.len(), d));
        out.push(("flag.pos".to_string(), cfg.max_flag_len, d));
        ln(&mut out, "flag.ln1", d);
        attn(&mut out, "flag.self", d);
        ln(&mut out, "flag.ln2", d);
        ffn(&mut out, "flag.ffn", d, cfg.flag_ffn);
        ln(&mut out, "flag.ln", d);
        out.push(("flag.wk".to_string(), d, d));
        out.push(("flag.bk".to_string(), 1, d));
        out.push(("flag.wv".to_string(), d, d));
        out.push(("flag.bv".to_string(), 1, d));
    }
    out
}

fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Ids, ModelError> {
    for (name, r, c) in layout(cfg) {
        match store.by_name(&name) {
            None => return Err(ModelError::MissingParam(name)),
            Some(m) if m.shape() != (r, c) => {
                return Err(ModelError::Shape {
                    name,
                    expected: (r, c),
                    found: m.shape(),
                })
            }
            _ => {}
        }
    }
    let expected = layout(cfg).len();
    if store.len() != expected {
        return Err(ModelError::Config(format!(
            "checkpoint has {} tensors, config implies {expected}",
            store.len()
        )));
    }
    let id = |n: &str| store.id(n).unwrap();
    let ln = |p: &str| LnIds {
        g: id(&format!("{p}.g")),
        b: id(&format!("{p}.b")),
    };
    let attn = |p: &str| AttnIds {
        wq: id(&format!("{p}.wq")),
        bq: id(&format!("{p}.bq")),
        wk: id(&format!("{p}.wk")),
        bk: id(&format!("{p}.bk")),
        wv: id(&format!("{p}.wv")),
        bv: id(&format!("{p}.bv")),
        wo: id(&format!("{p}.wo")),
        bo: id(&format!("{p}.bo")),
    };
    let ffn = |p: &str| FfnIds {
        w1: id(&format!("{p}.w1")),
        b1: id(&format!("{p}.b1")),
        w2: id(&format!("{p}.w2")),
        b2: id(&format!("{p}.b2")),
    };
    Ok(Ids {
        embed: id("embed"),
        enc_pos: id("enc.pos"),
        dec_pos: id("dec.pos"),
        enc: (0..cfg.enc_layers)
            .map(|l| EncLayer {
                ln1: ln(&format!("enc.{l}.ln1")),
                attn: attn(&format!("enc.{l}.self")),
                ln2: ln(&format!("enc.{l}.ln2")),
                ffn: ffn(&format!("enc.{l}.ffn")),
            })
            .collect(),
        enc_ln: ln("enc.ln"),
        dec: (0..cfg.dec_layers)
            .map(|l| DecLayer {
                ln1: ln(&format!("dec.{l}.ln1")),
                self_attn: attn(&format!("dec.{l}.self")),
                ln2: ln(&format!("dec.{l}.ln2")),
                cross: attn(&format!("dec.{l}.cross")),
                ln3: ln(&format!("dec.{l}.ln3")),
                ffn: ffn(&format!("dec.{l}.ffn")),
            })
            .collect(),
        dec_ln: ln("dec.ln"),
        out_w: id("out.w"),
        out_b: id("out.b"),
        flag: cfg.use_flags.then(|| FlagIds {
            embed: id(FLAG_EMBED),
            pos: id("flag.pos"),
            layer: EncLayer {
                ln1: ln("flag.ln1"),
                attn: attn("flag.self"),
                ln2: ln("flag.ln2"),
                ffn: ffn("flag.ffn"),
            },
            ln: ln("flag.ln"),
            wk: id("flag.wk"),
            bk: id("flag.bk"),
            wv: id("flag.wv"),
            bv: id("flag.bv"),
        }),
    })
}

/// One teacher-forced example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [TokenId],
    /// Target tokens, ending with EOS.
    pub y: &'a [TokenId],
    /// Required when the model uses flags; one column per target token.
    pub flags: Option<&'a FlagInput>,
}

/// Graph handles of a batch forward pass.
pub struct BatchOut {
    pub loss: NodeId,
    pub logits: NodeId,
    /// Logit rows of each sample.
    pub rows: Vec<Range<usize>>,
}

/// Encoded flag tensors `h^k`, `h^v`: value `(i, j)` is row `j * l_x + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagTensor {
    pub l_x: usize,
    pub cols: usize,
    pub hk: Mat,
    pub hv: Mat,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn segments(lens: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lens.map(|l| {
        let r = start..start + l;
        start += l;
        r
    })
    .collect()
}

impl Model {
    /// Seeded initialisation. The flag embedding copies the leading
    /// components of the data-embedding rows named by [`flag_seed_token`].
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        for (name, r, c) in layout(&cfg) {
            let last = name.rsplit('.').next().unwrap();
            if name == FLAG_EMBED {
                let vocab = Vocab::synthetic(cfg.vocab_size).map_err(|e| ModelError::Config(e.to_string()))?;
                let embed = store.by_name("embed").unwrap();
                let m = Mat::from_fn(r, c, |t, k| embed.get(flag_seed_token(t, &vocab) as usize, k));
                store.add(name, m, false);
            } else if last == "g" {
                store.add_const(name, r, c, 1.0);
            } else if last.starts_with('b') || r == 1 {
                store.add_const(name, r, c, 0.0);
            } else if name == "embed" {
                store.add_random(name, r, c, 1.0, &mut rng);
            } else if name.ends_with("pos") {
                store.add_random(name, r, c, 0.3, &mut rng);
            } else {
                store.add_random(name, r, c, 1.0 / (r as f64).sqrt(), &mut rng);
            }
        }
        let ids = resolve(&cfg, &store)?;
        Ok(Self {
            cfg,
            params: store,
            ids,
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let ids = resolve(&cfg, &params)?;
        Ok(Self { cfg, params, ids })
    }

    pub fn freeze(&mut self, mode: FreezeMode) {
        apply_freeze_mask(&mut self.params, mode);
    }

    fn ln(&self, g: &mut Graph, x: NodeId, ids: &LnIds) -> NodeId {
        let (gg, bb) = (g.param(ids.g), g.param(ids.b));
        g.layer_norm(x, gg, bb)
    }

    fn lin(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, Some(b))
    }

    fn attn(
        &self,
        g: &mut Graph,
        ids: &AttnIds,
        q_in: NodeId,
        kv_in: NodeId,
        spec: Arc<AttnSpec>,
        rel: Option<(NodeId, NodeId, Arc<RelIndex>)>,
    ) -> NodeId {
        let q = self.lin(g, q_in, ids.wq, ids.bq);
        let k = self.lin(g, kv_in, ids.wk, ids.bk);
        let v = self.lin(g, kv_in, ids.wv, ids.bv);
        let a = g.attention(q, k, v, spec, rel);
        self.lin(g, a, ids.wo, ids.bo)
    }

    fn ffn(&self, g: &mut Graph, ids: &FfnIds, x: NodeId) -> NodeId {
        let h = self.lin(g, x, ids.w1, ids.b1);
        let h = g.gelu(h);
        self.lin(g, h, ids.w2, ids.b2)
    }

    fn enc_layer(&self, g: &mut Graph, l: &EncLayer, h: NodeId, spec: &Arc<AttnSpec>) -> NodeId {
        let a = self.ln(g, h, &l.ln1);
        let a = self.attn(g, &l.attn, a, a, spec.clone(), None);
        let h = g.add(h, a);
        let a = self.ln(g, h, &l.ln2);
        let a = self.ffn(g, &l.ffn, a);
        g.add(h, a)
    }

    fn embed(&self, g: &mut Graph, table: ParamId, pos: ParamId, seqs: &[&[usize]]) -> NodeId {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let (t, p) = (g.param(table), g.param(pos));
        let e = g.gather(t, ids);
        let p = g.gather(p, positions);
        g.add(e, p)
    }

    fn check_tokens(&self, toks: &[TokenId], max: usize, what: &'static str) -> Result<(), ModelError> {
        if toks.len() > max {
            return Err(ModelError::TooLong {
                what,
                len: toks.len(),
                max,
            });
        }
        if let Some(&t) = toks.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange(t));
        }
        Ok(())
    }

    /// Encoder states of a packed batch.
    pub fn encode_graph(&self, g: &mut Graph, xs: &[&[TokenId]]) -> Result<(NodeId, Vec<Range<usize>>), ModelError> {
        for x in xs {
            self.check_tokens(x, self.cfg.max_src_len, "source")?;
        }
        let seqs: Vec<Vec<usize>> = xs.iter().map(|x| x.iter().map(|&t| t as usize).collect()).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut h = self.embed(g, self.ids.embed, self.ids.enc_pos, &refs);
        let segs = segments(xs.iter().map(|x| x.len()));
        let spec = Arc::new(AttnSpec::packed(self.cfg.heads, segs.clone(), Mask::Full));
        for l in &self.ids.enc {
            h = self.enc_layer(g, l, h, &spec);
        }
        Ok((self.ln(g, h, &self.ids.enc_ln), segs))
    }

    /// Flag encoder over distinct flag strings: `(m^k, m^v)` with one row per string.
    fn flag_graph(&self, g: &mut Graph, flags: &[&str]) -> Result<(NodeId, NodeId), ModelError> {
        let f = self.ids.flag.as_ref().ok_or(ModelError::NoFlags)?;
        let toks = flags
            .iter()
            .map(|s| {
                let t = tokenize_flag(s)?;
                if t.len() > self.cfg.max_flag_len {
                    return Err(ModelError::TooLong {
                        what: "flag",
                        len: t.len(),
                        max: self.cfg.max_flag_len,
                    });
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
        let h = self.embed(g, f.embed, f.pos, &refs);
        let segs = segments(toks.iter().map(Vec::len));
        let spec = Arc::new(AttnSpec::packed(self.cfg.flag_heads, segs.clone(), Mask::Full));
        let h = self.enc_layer(g, &f.layer, h, &spec);
        let h = self.ln(g, h, &f.ln);
        let pooled = g.segment_mean(h, segs);
        let mk = self.lin(g, pooled, f.wk, f.bk);
        let mv = self.lin(g, pooled, f.wv, f.bv);
        Ok((mk, mv))
    }

    /// Teacher-forced pass; the loss node is `loss_scale` times the summed
    /// token cross-entropy.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        samples: &[Sample<'_>],
        table: &FlagStrings,
        loss_scale: f64,
    ) -> Result<BatchOut, ModelError> {
        let xs: Vec<&[TokenId]> = samples.iter().map(|s| s.x).collect();
        let (enc, enc_segs) = self.encode_graph(g, &xs)?;
        for s in samples {
            self.check_tokens(s.y, self.cfg.max_tgt_len, "target")?;
            if s.y.is_empty() {
                return Err(ModelError::EmptyTarget);
            }
        }
        let rel = if self.cfg.use_flags {
            let mut local: HashMap<u32, u32> = HashMap::new();
            let mut order: Vec<&str> = Vec::new();
            let mut base = Vec::with_capacity(samples.len());
            let mut index = Vec::new();
            for s in samples {
                let fi = s.flags.ok_or(ModelError::NoFlags)?;
                if fi.n_cols() != s.y.len() || fi.classes.len() != s.x.len() {
                    return Err(ModelError::FlagShape {
                        cols: fi.n_cols(),
                        rows: fi.classes.len(),
                        expected_cols: s.y.len(),
                        expected_rows: s.x.len(),
                    });
                }
                base.push(index.len());
                for j in 0..s.y.len() {
                    for i in 0..s.x.len() {
                        let id = fi.flag(i, j);
                        let next = local.len() as u32;
                        let l = *local.entry(id).or_insert_with(|| {
                            order.push(table.get(id));
                            next
                        });
                        index.push(l);
                    }
                }
            }
            if order.is_empty() {
                None
            } else {
                let (mk, mv) = self.flag_graph(g, &order)?;
                Some((mk, mv, Arc::new(RelIndex { base, index })))
            }
        } else {
            None
        };
        let dec_in: Vec<Vec<usize>> = samples
            .iter()
            .map(|s| {
                std::iter::once(BOS as usize)
                    .chain(s.y[..s.y.len() - 1].iter().map(|&t| t as usize))
                    .collect()
            })
            .collect();
        let refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let mut h = self.embed(g, self.ids.embed, self.ids.dec_pos, &refs);
        let dec_segs = segments(samples.iter().map(|s| s.y.len()));
        let self_spec = Arc::new(AttnSpec::packed(self.cfg.heads, dec_segs.clone(), Mask::Causal { q_offset: 0 }));
        let cross_spec = Arc::new(AttnSpec {
            heads: self.cfg.heads,
            q_segs: dec_segs.clone(),
            k_segs: enc_segs,
            mask: Mask::Full,
        });
        for l in &self.ids.dec {
            let a = self.ln(g, h, &l.ln1);
            let a = self.attn(g, &l.self_attn, a, a, self_spec.clone(), None);
            h = g.add(h, a);
            let a = self.ln(g, h, &l.ln2);
            let a = self.attn(g, &l.cross, a, enc, cross_spec.clone(), rel.clone());
            h = g.add(h, a);
            let a = self.ln(g, h, &l.ln3);
            let a = self.ffn(g, &l.ffn, a);
            h = g.add(h, a);
        }
        let h = self.ln(g, h, &self.ids.dec_ln);
        let logits = self.lin(g, h, self.ids.out_w, self.ids.out_b);
        let targets = samples.iter().flat_map(|s| s.y.iter().map(|&t| t as usize)).collect();
        let loss = g.cross_entropy(logits, targets, loss_scale);
        Ok(BatchOut {
            loss,
            logits,
            rows: dec_segs,
        })
    }

    /// Mean token cross-entropy and per-position log-probabilities of one example.
    pub fn forward_train(
        &self,
        x: &[TokenId],
        y: &[TokenId],
        flags: Option<&StateMatrix>,
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut table = FlagStrings::new();
        let fi = flags.map(|m| FlagInput::from_matrix(m, &mut table));
        let mut g = Graph::new(&self.params);
        let s = Sample {
            x,
            y,
            flags: fi.as_ref(),
        };
        let out = self.forward_batch(&mut g, &[s], &table, 1.0 / y.len() as f64)?;
        let logits = g.value(out.logits);
        let lp = (0..logits.rows).map(|r| kernels::log_softmax(logits.row(r))).collect();
        Ok((g.value(out.loss).data[0], lp))
    }

    /// Loss and gradients of a batch.
    pub fn loss_and_grads(
        &self,
        samples: &[Sample<'_>],
        table: &FlagStrings,
        loss_scale: f64,
    ) -> Result<(f64, Grads), ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_batch(&mut g, samples, table, loss_scale)?;
        let loss = g.value(out.loss).data[0];
        Ok((loss, g.backward(out.loss)))
    }

    /// Encoder states `l_x x d_c` of one input.
    pub fn encode(&self, x: &[TokenId]) -> Result<Mat, ModelError> {
        let mut g = Graph::new(&self.params);
        let (h, _) = self.encode_graph(&mut g, &[x])?;
        Ok(g.value(h).clone())
    }

    /// Offset rows `(m^k, m^v)` for each flag string.
    pub fn encode_flag_strings(&self, flags: &[&str]) -> Result<(Mat, Mat), ModelError> {
        let mut g = Graph::new(&self.params);
        let (mk, mv) = self.flag_graph(&mut g, flags)?;
        Ok((g.value(mk).clone(), g.value(mv).clone()))
    }

    /// Encodes every cell of a state matrix.
    pub fn encode_flags(&self, m: &StateMatrix) -> Result<FlagTensor, ModelError> {
        let mut table = FlagStrings::new();
        let fi = FlagInput::from_matrix(m, &mut table);
        let strings: Vec<&str> = (0..table.len() as u32).map(|i| table.get(i)).collect();
        let (mk, mv) = self.encode_flag_strings(&strings)?;
        let (l_x, cols) = (m.n_rows(), m.n_cols());
        let d = self.cfg.head_dim();
        let mut hk = Mat::zeros(l_x * cols, d);
        let mut hv = Mat::zeros(l_x * cols, d);
        for j in 0..cols {
            for i in 0..l_x {
                let f = fi.flag(i, j) as usize;
                hk.row_mut(j * l_x + i).copy_from_slice(mk.row(f));
                hv.row_mut(j * l_x + i).copy_from_slice(mv.row(f));
            }
        }
        Ok(FlagTensor { l_x, cols, hk, hv })
    }

    /// Encoder output plus per-layer cross-attention keys and values.
    pub fn prepare(&self, x: &[TokenId]) -> Result<EncodedInput, ModelError> {
        let h = self.encode(x)?;
        let p = |id| self.params.get(id);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for l in &self.ids.dec {
            keys.push(linear(&h, p(l.cross.wk), Some(p(l.cross.bk))));
            values.push(linear(&h, p(l.cross.wv), Some(p(l.cross.bv))));
        }
        Ok(EncodedInput {
            x: x.to_vec(),
            h,
            keys,
            values,
        })
    }

    pub fn start_decoder(&self) -> DecoderState {
        DecoderState {
            t: 0,
            keys: vec![Mat::zeros(0, self.cfg.d_model); self.cfg.dec_layers],
            values: vec![Mat::zeros(0, self.cfg.d_model); self.cfg.dec_layers],
        }
    }

    fn ln_row(&self, x: &Mat, ids: &LnIds) -> Mat {
        kernels::layer_norm(x, &self.params.get(ids.g).data, &self.params.get(ids.b).data).0
    }

    fn lin_row(&self, x: &Mat, w: ParamId, b: ParamId) -> Mat {
        linear(x, self.params.get(w), Some(self.params.get(b)))
    }

    /// Log-probabilities of the next token after feeding `token_in` at
    /// position `state.t`. `offsets` are the per-input-token flag offsets
    /// `(l_x x d, l_x x d)` of the current column.
    pub fn decoder_step(
        &self,
        enc: &EncodedInput,
        state: &mut DecoderState,
        token_in: TokenId,
        offsets: Option<(&Mat, &Mat)>,
    ) -> Result<Vec<f64>, ModelError> {
        if state.t >= self.cfg.max_tgt_len {
            return Err(ModelError::TooLong {
                what: "target",
                len: state.t + 1,
                max: self.cfg.max_tgt_len,
            });
        }
        if token_in as usize >= self.cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange(token_in));
        }
        if state.keys.len() != self.cfg.dec_layers {
            return Err(ModelError::Config("decoder state from another model".into()));
        }
        if self.cfg.use_flags != offsets.is_some() {
            return Err(ModelError::NoFlags);
        }
        let l_x = enc.x.len();
        let dc = self.cfg.d_model;
        let mut h = Mat::zeros(1, dc);
        let (e, p) = (self.params.get(self.ids.embed), self.params.get(self.ids.dec_pos));
        for c in 0..dc {
            h.data[c] = e.get(token_in as usize, c) + p.get(state.t, c);
        }
        let index = RelIndex::dense(1, l_x);
        for (li, l) in self.ids.dec.iter().enumerate() {
            let a = self.ln_row(&h, &l.ln1);
            let q = self.lin_row(&a, l.self_attn.wq, l.self_attn.bq);
            state.keys[li].push_rows(&self.lin_row(&a, l.self_attn.wk, l.self_attn.bk));
            state.values[li].push_rows(&self.lin_row(&a, l.self_attn.wv, l.self_attn.bv));
            let spec = AttnSpec::single(self.cfg.heads, 1, state.t + 1, Mask::Full);
            let (att, _) = kernels::attention(&q, &state.keys[li], &state.values[li], &spec, None);
            h.add_assign(&self.lin_row(&att, l.self_attn.wo, l.self_attn.bo));

            let a = self.ln_row(&h, &l.ln2);
            let q = self.lin_row(&a, l.cross.wq, l.cross.bq);
            let spec = AttnSpec::single(self.cfg.heads, 1, l_x, Mask::Full);
            let tables = offsets.map(|(mk, mv)| RelTables { mk, mv, index: &index });
            let (att, _) = kernels::attention(&q, &enc.keys[li], &enc.values[li], &spec, tables.as_ref());
            h.add_assign(&self.lin_row(&att, l.cross.wo, l.cross.bo));

            let a = self.ln_row(&h, &l.ln3);
            let f = self.lin_row(&a, l.ffn.w1, l.ffn.b1);
            let f = Mat::from_vec(1, f.cols, f.data.iter().map(|&v| kernels::gelu(v)).collect());
            h.add_assign(&self.lin_row(&f, l.ffn.w2, l.ffn.b2));
        }
        state.t += 1;
        let h = self.ln_row(&h, &self.ids.dec_ln);
        let logits = self.lin_row(&h, self.ids.out_w, self.ids.out_b);
        Ok(kernels::log_softmax(&logits.data))
    }
}

/// Encoder-side cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    pub x: Vec<TokenId>,
    pub h: Mat,
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

/// Decoder self-attention cache of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub t: usize,
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

/// Flag encodings memoised by rendered string.
#[derive(Debug, Clone, Default)]
pub struct FlagCache {
    enabled: bool,
    map: HashMap<String, (Vec<f64>, Vec<f64>)>,
    pub hits: u64,
    pub misses: u64,
}

impl FlagCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Default::default()
        }
    }

    /// Offsets of every input token for one matrix column.
    pub fn column_offsets(
        &mut self,
        model: &Model,
        m: &StateMatrix,
        t: usize,
    ) -> Result<(Mat, Mat), ModelError> {
        let classes = m.token_classes();
        let strings = m.class_flags(t);
        let d = model.cfg.head_dim();
        let mut local: HashMap<&str, usize> = HashMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for s in &strings {
            let cached = self.enabled && self.map.contains_key(s.as_str());
            if !cached && !local.contains_key(s.as_str()) {
                local.insert(s, missing.len());
                missing.push(s);
            }
        }
        let fresh = if missing.is_empty() {
            None
        } else {
            Some(model.encode_flag_strings(&missing)?)
        };
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(strings.len());
        for s in &strings {
            if self.enabled {
                if let Some(v) = self.map.get(s) {
                    self.hits += 1;
                    rows.push(v.clone());
                    continue;
                }
            }
            self.misses += 1;
            let (mk, mv) = fresh.as_ref().unwrap();
            let r = local[s.as_str()];
            let v = (mk.row(r).to_vec(), mv.row(r).to_vec());
            if self.enabled {
                self.map.insert(s.clone(), v.clone());
            }
            rows.push(v);
        }
        let mut mk = Mat::zeros(classes.len(), d);
        let mut mv = Mat::zeros(classes.len(), d);
        for (i, &c) in classes.iter().enumerate() {
            mk.row_mut(i).copy_from_slice(&rows[c].0);
            mv.row_mut(i).copy_from_slice(&rows[c].1);
        }
        Ok((mk, mv))
    }
}
