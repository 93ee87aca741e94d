use anatomask::rng::seeded;
use anatomask::volume::{
    gen_phantom, load_labels, load_volume, save_labels, save_volume, znorm, PhantomSpec, PHANTOM_CLASSES,
};
use anatomask::{LabelVolume, Volume};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..7, 1usize..7, 1usize..7]
}

fn volume() -> impl Strategy<Value = Volume> {
    (dims(), [0.2f64..4.0, 0.2f64..4.0, 0.2f64..4.0]).prop_flat_map(|(d, sp)| {
        prop::collection::vec(-1e4f32..1e4, d.iter().product::<usize>())
            .prop_map(move |data| Volume::new(d, sp, data).unwrap())
    })
}

proptest! {
    #[test]
    fn volumes_round_trip_bit_exactly(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn labels_round_trip(d in dims(), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let l = LabelVolume::from_fn(d, 5, |_, _, _| rand::Rng::gen_range(&mut rng, 0..5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.lab");
        save_labels(&l, &path).unwrap();
        prop_assert_eq!(load_labels(&path).unwrap(), l);
    }

    #[test]
    fn znorm_is_standardising_and_idempotent(v in volume()) {
        let z = znorm(&v);
        let n = z.len() as f64;
        let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
        let spread = v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - v.data().iter().cloned().fold(f32::INFINITY, f32::min);
        if spread > 1.0 {
            let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-3, "variance {}", var);
            let zz = znorm(&z);
            prop_assert!(zz.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() < 1e-4));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantom_labels_agree_with_clean_intensities(seed in any::<u64>(), side in 12usize..24) {
        let spec = PhantomSpec::default();
        let p = gen_phantom(&spec, [side; 3], [1.0; 3], &mut seeded(seed)).unwrap();
        prop_assert_eq!(p.labels.classes(), PHANTOM_CLASSES);
        for (&label, &value) in p.labels.data().iter().zip(p.clean.data()) {
            match spec.intensity_range(label) {
                Some([lo, hi]) => prop_assert!(
                    value as f64 >= lo - 1e-3 && value as f64 <= hi + 1e-3,
                    "class {} intensity {}", label, value
                ),
                None => {
                    prop_assert_eq!(label, 0);
                    prop_assert_eq!(value as f64, spec.background);
                }
            }
        }
        let total: f64 = p.stats.class_fractions.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let again = gen_phantom(&spec, [side; 3], [1.0; 3], &mut seeded(seed)).unwrap();
        prop_assert_eq!(again.image, p.image);
    }
}
