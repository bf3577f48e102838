//! ROUGE checked against a brute-force oracle: n-gram overlap by repeated
//! matching and removal, LCS by enumerating every subsequence.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softpipe::eval::{evaluate_predictions, rouge_l, rouge_n};
use softpipe::tasks::Vocab;

use common::oracle;

#[test]
fn rouge_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let a = common::random_sequence(&mut rng);
        let b = common::random_sequence(&mut rng);
        assert_eq!(rouge_n(&a, &b, 1), oracle::rouge_n(&a, &b, 1), "{a:?} {b:?}");
        assert_eq!(rouge_n(&a, &b, 2), oracle::rouge_n(&a, &b, 2), "{a:?} {b:?}");
        assert_eq!(rouge_l(&a, &b), oracle::rouge_l(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn aggregate_average_is_the_mean_of_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let preds: Vec<_> = (0..50).map(|_| common::random_sequence(&mut rng)).collect();
    let refs: Vec<_> = (0..50).map(|_| common::random_sequence(&mut rng)).collect();
    let report = evaluate_predictions(&preds, &refs, &Vocab::new(32));
    assert_eq!(report.rouge_avg, (report.rouge1 + report.rouge2 + report.rouge_l) / 3.0);
    let r1: f64 = preds.iter().zip(&refs).map(|(p, r)| oracle::rouge_n(p, r, 1)).sum::<f64>() / 50.0;
    assert_eq!(report.rouge1, r1);
}
