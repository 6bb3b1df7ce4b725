#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rule_exec::vocab::Vocab;
use rule_exec::{Atom, Formula, Literal, TokenId, EOS, SEP};

pub fn vocab() -> Vocab {
    Vocab::synthetic(64).unwrap()
}

/// Small token pool so that random atoms hold often enough to matter.
pub fn pool(v: &Vocab) -> (Vec<TokenId>, Vec<TokenId>) {
    let words = ["car", "snow", "dog", "tree", "bird"].iter().map(|w| v.id(w).unwrap()).collect();
    let stops = ["the", "a"].iter().map(|w| v.id(w).unwrap()).collect();
    (words, stops)
}

fn keyword(rng: &mut ChaCha8Rng, words: &[TokenId]) -> Vec<TokenId> {
    let n = if rng.gen_bool(0.8) { 1 } else { 2 };
    (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect()
}

pub fn random_atom(rng: &mut ChaCha8Rng, words: &[TokenId]) -> Atom {
    let sentence = |rng: &mut ChaCha8Rng| rng.gen_range(1..=4u32);
    match rng.gen_range(0..6) {
        0 => Atom::Copy { keyword: keyword(rng, words) },
        1 => Atom::InSen {
            keyword: keyword(rng, words),
            sentence: sentence(rng),
        },
        2 => Atom::Order {
            first: keyword(rng, words),
            second: keyword(rng, words),
        },
        3 => Atom::Len {
            sentence: rng.gen_bool(0.7).then(|| sentence(rng)),
            target: rng.gen_range(1..7),
        },
        4 => Atom::StopWordCount {
            sentence: rng.gen_bool(0.7).then(|| sentence(rng)),
            target: rng.gen_range(0..4),
        },
        _ => Atom::TranslatedOnce { sentence: sentence(rng) },
    }
}

/// CNF over every predicate kind, with some negation and OR-groups.
pub fn random_formula(rng: &mut ChaCha8Rng, words: &[TokenId]) -> Formula {
    let clauses = (0..rng.gen_range(1..=4))
        .map(|_| {
            (0..rng.gen_range(1..=3))
                .map(|_| {
                    let a = random_atom(rng, words);
                    if rng.gen_bool(0.2) {
                        Literal::neg(a)
                    } else {
                        Literal::pos(a)
                    }
                })
                .collect()
        })
        .collect();
    Formula::new(clauses)
}

/// Up to `max_len` tokens from the pool and separators; EOS-terminated
/// with probability `p_end`.
pub fn random_seq(rng: &mut ChaCha8Rng, words: &[TokenId], stops: &[TokenId], max_len: usize, p_end: f64) -> Vec<TokenId> {
    let n = rng.gen_range(0..=max_len);
    let mut y: Vec<TokenId> = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=1 => SEP,
            2..=3 => stops[rng.gen_range(0..stops.len())],
            _ => words[rng.gen_range(0..words.len())],
        })
        .collect();
    if rng.gen_bool(p_end) {
        y.push(EOS);
    }
    y
}

/// A conjunction of Copy atoms over distinct or overlapping keywords.
pub fn random_copy_formula(rng: &mut ChaCha8Rng, words: &[TokenId]) -> Formula {
    let k = rng.gen_range(1..=5);
    Formula::new((0..k).map(|_| vec![Literal::pos(Atom::Copy { keyword: keyword(rng, words) })]).collect())
}
