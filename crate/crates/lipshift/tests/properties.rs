//! Randomized invariants (proptest): schedule monotonicity, margin-loss
//! domination of cross-entropy, and certification monotonicity in the radius.

use proptest::prelude::*;

use lipshift::tape::Tape;
use lipshift::tensor::Tensor;
use lipshift::train::{emma_loss, EpsSchedule};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eps_schedule_is_monotone_and_bounded(
        eps in 0.0f64..2.0,
        total in 1usize..200,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let s = EpsSchedule { eps, total_epochs: total };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t = total as f64;
        prop_assert!(s.eps_at_f(lo * t) <= s.eps_at_f(hi * t) + 1e-12);
        prop_assert!(s.eps_at_f(hi * t) <= eps + 1e-12);
        prop_assert!(s.eps_at_f(0.0) == 0.0 || total == 0);
    }

    #[test]
    fn emma_dominates_cross_entropy(
        seed in 0u64..1000,
        eps in 0.0f64..1.5,
        b in 2usize..6,
        c in 2usize..5,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::from_fn(vec![b, c], |_| rng.gen_range(-4.0..4.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut k = Tensor::<f64>::zeros(vec![c, c]);
        for i in 0..c {
            for j in 0..i {
                let v = rng.gen_range(0.0..3.0);
                k.data_mut()[i * c + j] = v;
                k.data_mut()[j * c + i] = v;
            }
        }
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let kv = tape.leaf(k);
        let ce = tape.softmax_ce(zv, &labels).unwrap();
        let emma = emma_loss(&mut tape, zv, kv, &labels, eps, false).unwrap();
        prop_assert!(tape.value(emma).item() >= tape.value(ce).item() - 1e-10);
    }

    #[test]
    fn emma_is_monotone_in_radius(
        seed in 0u64..500,
        e1 in 0.0f64..1.0,
        e2 in 0.0f64..1.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (4, 3);
        let z = Tensor::<f64>::from_fn(vec![b, c], |_| rng.gen_range(-4.0..4.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let mut k = Tensor::<f64>::zeros(vec![c, c]);
        for i in 0..c {
            for j in 0..i {
                let v = rng.gen_range(0.0..2.0);
                k.data_mut()[i * c + j] = v;
                k.data_mut()[j * c + i] = v;
            }
        }
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let kv = tape.leaf(k);
        let a = emma_loss(&mut tape, zv, kv, &labels, lo, false).unwrap();
        let bvar = emma_loss(&mut tape, zv, kv, &labels, hi, false).unwrap();
        prop_assert!(tape.value(bvar).item() >= tape.value(a).item() - 1e-10);
    }

    #[test]
    fn certification_slack_is_monotone_in_radius(
        zy in -2.0f64..2.0,
        zj in -2.0f64..2.0,
        k in 0.0f64..3.0,
        e1 in 0.0f64..1.0,
        e2 in 0.0f64..1.0,
    ) {
        // per-pair slack (zy - zj - eps * k) can only shrink as eps grows
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let s_lo = zy - zj - lo * k;
        let s_hi = zy - zj - hi * k;
        prop_assert!(s_hi <= s_lo + 1e-12);
    }
}
