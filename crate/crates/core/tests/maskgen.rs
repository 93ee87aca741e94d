use anatomask::maskgen::{anatomask, budget, random_mask, LossMap, MaskSchedule, PatchGrid, Significance};
use anatomask::rng::seeded;
use proptest::prelude::*;
use rand::Rng;
use std::collections::BTreeMap;

fn case() -> impl Strategy<Value = ([usize; 3], f64, f64, u64, bool)> {
    ([1usize..7, 1usize..7, 1usize..7], 0.05f64..=1.0, 0.0f64..=1.0, any::<u64>(), any::<bool>())
}

proptest! {
    #[test]
    fn masks_have_exact_budget_and_distinct_units((g, gamma, r_t, seed, high) in case()) {
        let grid = PatchGrid::new([1; 3], g).unwrap();
        let mut rng = seeded(seed);
        let init = random_mask(&grid, gamma, &mut rng).unwrap();
        let b = budget(gamma, grid.n());
        prop_assert_eq!(b, (gamma * grid.n() as f64).ceil() as usize);
        prop_assert_eq!(init.len(), b);
        let losses: BTreeMap<usize, f64> = init.masked().iter().map(|&u| (u, rng.gen::<f64>())).collect();
        let losses = LossMap::new(grid, losses).unwrap();
        let sig = if high { Significance::High } else { Significance::Low };
        let m = anatomask(&losses, &init, gamma, r_t, sig, &mut rng).unwrap();
        prop_assert_eq!(m.len(), b);
        prop_assert!(m.masked().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.masked().iter().all(|&u| u < grid.n()));
    }

    #[test]
    fn top_ranked_units_always_survive((g, gamma, r_t, seed, high) in case()) {
        let grid = PatchGrid::new([1; 3], g).unwrap();
        let mut rng = seeded(seed);
        let init = random_mask(&grid, gamma, &mut rng).unwrap();
        let losses: BTreeMap<usize, f64> = init.masked().iter().map(|&u| (u, rng.gen::<f64>())).collect();
        let sig = if high { Significance::High } else { Significance::Low };
        let map = LossMap::new(grid, losses.clone()).unwrap();
        let m = anatomask(&map, &init, gamma, r_t, sig, &mut rng).unwrap();
        let b = init.len();
        let k = ((r_t * b as f64).ceil() as usize).min(b);
        let mut values: Vec<f64> = losses.values().copied().collect();
        values.sort_by(|a, c| if high { c.total_cmp(a) } else { a.total_cmp(c) });
        if k > 0 {
            let cut = values[k - 1];
            for (&u, &l) in &losses {
                let strictly_better = if high { l > cut } else { l < cut };
                if strictly_better || l == cut && values.iter().filter(|&&v| v == cut).count() == 1 {
                    prop_assert!(m.contains(u), "unit {} with loss {} dropped (cut {})", u, l, cut);
                }
            }
        }
    }

    #[test]
    fn schedule_is_linear_between_its_endpoints(r0 in 0.0f64..=1.0, r_end in 0.0f64..=1.0, total in 1u64..2000, t in 0u64..2000) {
        let s = MaskSchedule::new(r0, r_end, total).unwrap();
        let t = t.min(total);
        let want = r0 + t as f64 / total as f64 * (r_end - r0);
        prop_assert!((s.ratio(t).unwrap() - want).abs() < 1e-12);
        if t < total {
            let (a, b) = (s.ratio(t).unwrap(), s.ratio(t + 1).unwrap());
            let monotone = if r0 <= r_end { b >= a } else { b <= a };
            prop_assert!(monotone);
        }
        prop_assert!(s.ratio(total + 1).is_err());
    }
}
