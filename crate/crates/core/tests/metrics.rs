use anatomask::metrics::{dsc, nsd};
use anatomask::rng::seeded;
use anatomask::LabelVolume;
use proptest::prelude::*;
use rand::Rng;

const SIDE: usize = 6;

/// Random two-class labels on a `SIDE`^3 block.
fn block(seed: u64) -> Vec<u16> {
    let mut rng = seeded(seed);
    let fill = rng.gen_range(0.2..0.8);
    (0..SIDE * SIDE * SIDE)
        .map(|_| if rng.gen_bool(fill) { rng.gen_range(1..3) } else { 0 })
        .collect()
}

/// `block` placed at `offset` inside a zero volume of side `outer`.
fn embed(b: &[u16], outer: usize, offset: [usize; 3]) -> LabelVolume {
    LabelVolume::from_fn([outer; 3], 3, |x, y, z| {
        let inside = [x, y, z].iter().zip(offset).all(|(&c, o)| c >= o && c < o + SIDE);
        if inside {
            let (bx, by, bz) = (x - offset[0], y - offset[1], z - offset[2]);
            b[bx + SIDE * (by + SIDE * bz)]
        } else {
            0
        }
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>(), tau in 0.0f64..3.0) {
        let (p, g) = (embed(&block(a), SIDE, [0; 3]), embed(&block(b), SIDE, [0; 3]));
        for class in 1..3 {
            let d = dsc(&p, &g, class).unwrap();
            prop_assert_eq!(d, dsc(&g, &p, class).unwrap());
            let n = nsd(&p, &g, class, tau).unwrap();
            prop_assert_eq!(n, nsd(&g, &p, class, tau).unwrap());
            for v in [d, n].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert_eq!(dsc(&p, &p, 1).unwrap().unwrap_or(1.0), 1.0);
    }

    #[test]
    fn scores_are_translation_invariant(
        a in any::<u64>(),
        b in any::<u64>(),
        o1 in [1usize..4, 1usize..4, 1usize..4],
        o2 in [1usize..4, 1usize..4, 1usize..4],
        tau in 0.0f64..3.0,
    ) {
        let outer = SIDE + 5;
        let (ba, bb) = (block(a), block(b));
        let (p1, g1) = (embed(&ba, outer, o1), embed(&bb, outer, o1));
        let (p2, g2) = (embed(&ba, outer, o2), embed(&bb, outer, o2));
        for class in 1..3 {
            prop_assert_eq!(dsc(&p1, &g1, class).unwrap(), dsc(&p2, &g2, class).unwrap());
            prop_assert_eq!(nsd(&p1, &g1, class, tau).unwrap(), nsd(&p2, &g2, class, tau).unwrap());
        }
    }

    #[test]
    fn nsd_grows_with_tolerance(a in any::<u64>(), b in any::<u64>(), t1 in 0.0f64..4.0, dt in 0.0f64..4.0) {
        let (p, g) = (embed(&block(a), SIDE, [0; 3]), embed(&block(b), SIDE, [0; 3]));
        for class in 1..3 {
            if let (Some(x), Some(y)) = (nsd(&p, &g, class, t1).unwrap(), nsd(&p, &g, class, t1 + dt).unwrap()) {
                prop_assert!(y >= x);
            }
        }
    }
}
