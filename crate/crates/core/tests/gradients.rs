mod common;

use common::{op_suite, random, tiny_config, total_loss_gradcheck};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repcount::autodiff::Tape;

#[test]
fn every_op_matches_finite_differences() {
    let results = op_suite();
    assert!(results.len() >= 30);
    for (name, err) in results {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn total_loss_matches_finite_differences() {
    let cfg = tiny_config();
    let (params, err) = total_loss_gradcheck(&cfg, 3);
    assert!(params <= 5000, "{params} parameters");
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn ablated_total_loss_matches_finite_differences() {
    for (daq, icl) in [(false, true), (true, false)] {
        let mut cfg = tiny_config();
        cfg.use_daq = daq;
        cfg.use_icl = icl;
        let (_, err) = total_loss_gradcheck(&cfg, 5);
        assert!(err < 1e-3, "daq {daq} icl {icl}: relative error {err:e}");
    }
}

#[test]
fn wide_window_equals_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (q, k, v) = (
        random(&[9, 6], -1.0, 1.0, &mut rng),
        random(&[9, 6], -1.0, 1.0, &mut rng),
        random(&[9, 6], -1.0, 1.0, &mut rng),
    );
    let run = |window: Option<usize>| {
        let tape = Tape::new();
        let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let p = tape.attention_probs(q, k, 3, window).unwrap();
        let out = tape.attention_apply(p, v, window).unwrap();
        let value = tape.value(out).clone();
        value
    };
    let dense = run(None);
    for w in [8, 9, 20] {
        let banded = run(Some(w));
        for (a, b) in banded.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-12, "window {w}");
        }
    }
}
