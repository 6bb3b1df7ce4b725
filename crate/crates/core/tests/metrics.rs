mod common;

use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rule_exec::decoding::read_decodes;
use rule_exec::metrics::{evaluate, score_example, SlackMode};
use rule_exec::Tracker;

fn golden(mode: SlackMode) -> rule_exec::metrics::EvalReport {
    let v = common::vocab();
    let recs = read_decodes(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden20.jsonl")).unwrap();
    assert_eq!(recs.len(), 20);
    evaluate(recs.iter().map(|r| (r.expr.as_str(), r.src.as_slice(), r.hyp.as_slice())), &v, mode).unwrap()
}

#[test]
fn golden_fixture_rates() {
    let r = golden(SlackMode::PerAtom);
    assert_eq!(r.n, 20);
    assert_eq!(r.truncated, 1);
    assert_eq!(r.csr, 9.0 / 20.0);
    assert_eq!(r.csr_pm1, 12.0 / 20.0);
    assert_eq!(r.csr_pm2, 13.0 / 20.0);
    assert_eq!(r.mention_ratio, Some(11.0 / 13.0));
    assert_eq!(r.sar, Some(0.5));
    let rate = |k: &str| {
        let x = &r.per_predicate[k];
        (x.hits, x.total)
    };
    assert_eq!(rate("Copy(w)"), (4, 7));
    assert_eq!(rate("Order(w1, w2)"), (1, 2));
    assert_eq!(rate("InSen(w, j)"), (1, 2));
    assert_eq!(rate("Len(j, l)"), (2, 6));
    assert_eq!(rate("StopWordCount(j, s)"), (1, 3));
    assert_eq!(rate("not Copy(w)"), (1, 2));
    assert_eq!(rate("TranslatedOnce(i)"), (3, 4));
    assert_eq!(r.per_predicate.len(), 7);
}

#[test]
fn golden_fixture_summed_slack() {
    let r = golden(SlackMode::Summed);
    assert_eq!(r.csr, 9.0 / 20.0);
    assert_eq!(r.csr_pm1, 11.0 / 20.0);
    assert_eq!(r.csr_pm2, 13.0 / 20.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn checker_agrees_with_tracker(seed in any::<u64>()) {
        let v = common::vocab();
        let (words, stops) = common::pool(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_formula(&mut rng, &words);
        let y = common::random_seq(&mut rng, &words, &stops, 14, 1.0);
        let sw = Arc::new(v.stop_words().clone());
        let t = Tracker::for_input(f.clone(), &[], &v, sw.clone());
        let verdict = t.final_satisfaction(&y);
        let s = score_example(&f, &[], &y, &sw);
        let checked: Vec<bool> = s.atoms.iter().map(|a| a.holds).collect();
        prop_assert_eq!(&checked, &verdict.atoms);
        prop_assert_eq!(s.satisfied(), verdict.satisfied);
    }

    #[test]
    fn relaxation_is_monotone(seed in any::<u64>()) {
        let v = common::vocab();
        let (words, stops) = common::pool(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::random_formula(&mut rng, &words);
        let y = common::random_seq(&mut rng, &words, &stops, 14, 0.9);
        let s = score_example(&f, &[], &y, v.stop_words());
        for mode in [SlackMode::PerAtom, SlackMode::Summed] {
            let at: Vec<bool> = (0..4).map(|d| s.satisfied_within(d, mode)).collect();
            prop_assert!(at.windows(2).all(|w| !w[0] || w[1]));
        }
        prop_assert!(!s.satisfied_within(3, SlackMode::Summed) || s.satisfied_within(3, SlackMode::PerAtom));
    }
}
