mod common;

use common::compare::errors_for;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn branches_and_module_match_explicit_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let dims = [rng.gen_range(1..3), [4, 8][rng.gen_range(0..2)], rng.gen_range(1..5), rng.gen_range(1..9)];
        let e = errors_for(&mut rng, dims);
        assert!(e.max() < 1e-12, "{dims:?}: {e:?}");
        worst = worst.max(e.max());
    }
    println!("worst deviation {worst:e}");
}

#[test]
fn odd_heights_without_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for h in [1, 2, 3, 5, 7] {
        let e = errors_for(&mut rng, [2, h, 3, 5]);
        assert!(e.max() < 1e-12, "h={h}: {e:?}");
    }
}

#[test]
fn pooling_hand_case() {
    let s = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    assert_eq!(common::pool(&s, 2), vec![vec![2.5, 3.0], vec![3.5, 4.0]]);
}
