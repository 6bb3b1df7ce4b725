use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rule_exec::neural::checkpoint::{self, load_checkpoint, save_checkpoint, Checkpoint};
use rule_exec::neural::{
    cross_attention_rel, Adam, AdamConfig, FlagCache, FlagInput, FlagStrings, FreezeMode, Mat,
    Model, ModelConfig, ModelError, Sample,
};
use rule_exec::{Formula, Tracker, Vocab, EOS};

fn small(use_flags: bool) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        ffn: 24,
        flag_ffn: 16,
        flag_heads: 4,
        max_src_len: 40,
        max_tgt_len: 16,
        max_flag_len: 16,
        use_flags,
        seed: 7,
        ..ModelConfig::default()
    }
}

struct Case {
    tracker: Arc<Tracker>,
    y: Vec<u32>,
}

fn case(expr: &str, y: &str) -> Case {
    let v = Vocab::synthetic(64).unwrap();
    let f = Formula::parse(expr, &v).unwrap();
    let src = v.encode("dog . tree").unwrap();
    let t = Tracker::for_input(f, &src, &v, Arc::new(v.stop_words().clone())).compressed();
    Case {
        tracker: Arc::new(t),
        y: v.encode(y).unwrap(),
    }
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Eqs. 11-13 evaluated with explicit loops.
fn naive_rel_attention(q: &Mat, k: &Mat, v: &Mat, mk: &Mat, mv: &Mat, heads: usize) -> Mat {
    let (t, lx, dm) = (q.rows, k.rows, q.cols);
    let d = dm / heads;
    let mut out = Mat::zeros(t, dm);
    for h in 0..heads {
        for j in 0..t {
            let mut e = vec![0.0; lx];
            for i in 0..lx {
                for c in 0..d {
                    e[i] += q.get(j, h * d + c) * (k.get(i, h * d + c) + mk.get(j * lx + i, c));
                }
                e[i] /= (d as f64).sqrt();
            }
            let z: f64 = e.iter().map(|x| x.exp()).sum();
            for i in 0..lx {
                let a = e[i].exp() / z;
                for c in 0..d {
                    out.data[j * dm + h * d + c] += a * (v.get(i, h * d + c) + mv.get(j * lx + i, c));
                }
            }
        }
    }
    out
}

#[test]
fn relative_attention_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let heads = rng.gen_range(1..=2);
        let d = rng.gen_range(1..=4);
        let (lx, t) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let q = random_mat(t, heads * d, &mut rng);
        let k = random_mat(lx, heads * d, &mut rng);
        let v = random_mat(lx, heads * d, &mut rng);
        let mk = random_mat(t * lx, d, &mut rng);
        let mv = random_mat(t * lx, d, &mut rng);
        let got = cross_attention_rel(&q, &k, &v, &mk, &mv, heads);
        let want = naive_rel_attention(&q, &k, &v, &mk, &mv, heads);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn single_key_attention_returns_offset_value() {
    let q = Mat::from_vec(2, 2, vec![0.3, -0.1, 2.0, 1.0]);
    let k = Mat::from_vec(1, 2, vec![1.0, 1.0]);
    let v = Mat::from_vec(1, 2, vec![0.5, -0.5]);
    let mk = Mat::from_vec(2, 2, vec![9.0, 9.0, -3.0, 1.0]);
    let mv = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let out = cross_attention_rel(&q, &k, &v, &mk, &mv, 1);
    assert_eq!(out.data, vec![1.5, 1.5, 3.5, 3.5]);
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let mut m = Model::new(small(false)).unwrap();
    let w = m.params.id("out.w").unwrap();
    *m.params.get_mut(w) = Mat::zeros(16, 64);
    let v = Vocab::synthetic(64).unwrap();
    let x = v.encode("car snow").unwrap();
    let (loss, lp) = m.forward_train(&x, &[30, 31, EOS], None).unwrap();
    assert!((loss - 64f64.ln()).abs() < 1e-6);
    for row in lp {
        let s: f64 = row.iter().map(|p| p.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

fn zero_flag_projections(m: &mut Model) {
    for n in ["flag.wk", "flag.bk", "flag.wv", "flag.bv"] {
        let id = m.params.id(n).unwrap();
        let (r, c) = m.params.get(id).shape();
        *m.params.get_mut(id) = Mat::zeros(r, c);
    }
}

#[test]
fn zero_offsets_reproduce_baseline() {
    let c = case("InSen(car, 1) & Len(1, 3)", "car snow a . </s>");
    let mut flag = Model::new(small(true)).unwrap();
    zero_flag_projections(&mut flag);
    let mut base = Model::new(small(false)).unwrap();
    for p in base.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
        let id = base.params.id(&p).unwrap();
        *base.params.get_mut(id) = flag.params.by_name(&p).unwrap().clone();
    }
    let gt = c.tracker.build_gt_matrix(&c.y);
    let (a, la) = flag.forward_train(c.tracker.x(), &c.y, Some(&gt)).unwrap();
    let (b, lb) = base.forward_train(c.tracker.x(), &c.y, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn stepwise_decoding_matches_teacher_forcing() {
    for use_flags in [false, true] {
        let c = case("Order(car, snow) & Len(1, 4) & Copy(dog)", "car the snow a . dog </s>");
        let model = Model::new(small(use_flags)).unwrap();
        let full = c.tracker.build_full_matrix(&c.y);
        let gt = c.tracker.build_gt_matrix(&c.y);
        let (_, forced) = model.forward_train(c.tracker.x(), &c.y, use_flags.then_some(&gt)).unwrap();
        let enc = model.prepare(c.tracker.x()).unwrap();
        let mut st = model.start_decoder();
        let mut cache = FlagCache::new(true);
        let mut prev = rule_exec::BOS;
        for (t, &tok) in c.y.iter().enumerate() {
            let offs = if use_flags {
                Some(cache.column_offsets(&model, &full, t).unwrap())
            } else {
                None
            };
            let lp = model
                .decoder_step(&enc, &mut st, prev, offs.as_ref().map(|(a, b)| (a, b)))
                .unwrap();
            for (a, b) in lp.iter().zip(&forced[t]) {
                assert!((a - b).abs() < 1e-8, "step {t}");
            }
            prev = tok;
        }
    }
}

#[test]
fn flag_cache_changes_nothing() {
    let c = case("Copy(car) & Len(5)", "car snow the a </s>");
    let v = Vocab::synthetic(64).unwrap();
    let y = v.encode("car snow the a </s>").unwrap();
    let model = Model::new(small(true)).unwrap();
    let m = c.tracker.build_full_matrix(&y);
    let mut on = FlagCache::new(true);
    let mut off = FlagCache::new(false);
    for t in 0..m.n_cols() {
        let a = on.column_offsets(&model, &m, t).unwrap();
        let b = off.column_offsets(&model, &m, t).unwrap();
        for (x, z) in a.0.data.iter().zip(&b.0.data).chain(a.1.data.iter().zip(&b.1.data)) {
            assert!((x - z).abs() < 1e-12);
        }
    }
    assert!(on.hits > 0);
    assert_eq!(off.hits, 0);
}

#[test]
fn identical_flags_encode_identically() {
    let model = Model::new(small(true)).unwrap();
    let (mk, mv) = model.encode_flag_strings(&["N 1 5 N", "2", "N 1 5 N"]).unwrap();
    assert_eq!(mk.row(0), mk.row(2));
    assert_eq!(mv.row(0), mv.row(2));
    assert!(matches!(model.encode_flag_strings(&["1 x"]), Err(ModelError::BadFlag(_))));
    let c = case("Len(1, 3)", "car . </s>");
    let gt = c.tracker.build_gt_matrix(&c.y);
    let ft = model.encode_flags(&gt).unwrap();
    assert_eq!((ft.l_x, ft.cols), (c.tracker.x().len(), 3));
}

#[test]
fn encoder_batching_and_positions() {
    let model = Model::new(small(false)).unwrap();
    let v = Vocab::synthetic(64).unwrap();
    let x = v.encode("car snow car").unwrap();
    let h = model.encode(&x).unwrap();
    assert_eq!(h.shape(), (3, 16));
    assert!(h.is_finite());
    let mut g = rule_exec::neural::graph::Graph::new(&model.params);
    let y = v.encode("dog").unwrap();
    let (hb, _) = model.encode_graph(&mut g, &[&x, &y]).unwrap();
    assert_eq!(&g.value(hb).data[..48], &h.data[..]);
    assert!(matches!(
        model.encode(&vec![30; 41]),
        Err(ModelError::TooLong { .. })
    ));
}

#[test]
fn finetune_freeze_leaves_decoder_blocks_untouched() {
    let c = case("Copy(car) & Len(1, 2)", "car a . </s>");
    let mut model = Model::new(small(true)).unwrap();
    model.freeze(FreezeMode::FlagFinetune);
    let before = model.params.clone();
    let mut table = FlagStrings::new();
    let fi = FlagInput::from_matrix(&c.tracker.build_gt_matrix(&c.y), &mut table);
    let s = Sample {
        x: c.tracker.x(),
        y: &c.y,
        flags: Some(&fi),
    };
    let (_, grads) = model.loss_and_grads(&[s], &table, 0.25).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &model.params);
    opt.update(&mut model.params, &grads);
    for (a, b) in before.iter().zip(model.params.iter()) {
        let frozen = b.name == "flag.embed" || b.name.starts_with("dec.0.self") || b.name.starts_with("dec.1.ffn");
        if frozen {
            assert_eq!(a.value, b.value, "{}", b.name);
            assert!(grads.g[model.params.id(&b.name).unwrap()].is_none());
        }
        if b.name == "dec.0.cross.wq" {
            assert_ne!(a.value, b.value);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(small(true)).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &model.params);
    opt.step = 3;
    opt.m[0].data[0] = 0.125;
    let ck = Checkpoint {
        model,
        optimizer: Some(opt),
        meta: serde_json::json!({"step": 3}),
    };
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, AdamConfig::default()).unwrap();
    assert_eq!(back, ck);
    assert!(matches!(
        checkpoint::load_for_vocab(&path, 80),
        Err(ModelError::VocabMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    let cut = checkpoint::from_bytes(&bytes[..bytes.len() - 100], AdamConfig::default());
    assert!(matches!(cut, Err(ModelError::Checkpoint(_))));
    let mut flipped = bytes.clone();
    flipped[200] ^= 1;
    assert!(checkpoint::from_bytes(&flipped, AdamConfig::default()).is_err());
}

#[test]
fn gradients_match_central_differences() {
    let cases = [
        case("InSen(car, 2) & (Len(1, 2) || StopWordCount(1, 1)) & not Copy(tree)", "a snow . car </s>"),
        case("Order(dog, car) & Len(4)", "dog the car . </s>"),
    ];
    let mut model = Model::new(small(true)).unwrap();
    // Nonzero flag projections so the flag path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in ["flag.bk", "flag.bv"] {
        let id = model.params.id(n).unwrap();
        let (r, c) = model.params.get(id).shape();
        *model.params.get_mut(id) = random_mat(r, c, &mut rng);
    }
    let mut table = FlagStrings::new();
    let inputs: Vec<FlagInput> = cases
        .iter()
        .map(|c| FlagInput::from_matrix(&c.tracker.build_gt_matrix(&c.y), &mut table))
        .collect();
    let samples: Vec<Sample> = cases
        .iter()
        .zip(&inputs)
        .map(|(c, fi)| Sample {
            x: c.tracker.x(),
            y: &c.y,
            flags: Some(fi),
        })
        .collect();
    let loss = |m: &Model| m.loss_and_grads(&samples, &table, 0.1).unwrap();
    let (_, grads) = loss(&model);
    let (mut probed, mut agree) = (0, 0);
    for id in 0..model.params.len() {
        if !model.params.trainable(id) {
            continue;
        }
        let n = model.params.get(id).len();
        let g = grads.g[id].as_ref().expect("every trainable tensor gets a gradient");
        for _ in 0..3 {
            let c = rng.gen_range(0..n);
            let mut p = model.clone();
            p.params.get_mut(id).data[c] += 1e-4;
            let mut q = model.clone();
            q.params.get_mut(id).data[c] -= 1e-4;
            let num = (loss(&p).0 - loss(&q).0) / 2e-4;
            let ana = g.data[c];
            let scale = num.abs().max(ana.abs());
            probed += 1;
            if scale < 1e-9 || (num - ana).abs() / scale <= 1e-4 {
                agree += 1;
            }
        }
    }
    assert!(agree * 100 >= probed * 99, "{agree}/{probed}");
}
