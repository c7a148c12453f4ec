use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strm_core::autodiff::Mode;
use strm_core::nn::ParamStore;
use strm_core::rru::{refine_with_gates, GateMap, GateModel, RruConfig, RruVariant};
use strm_core::Tensor;

/// Gate model with every parameter redrawn so that gates spread out.
fn random_model(seed: u64, c: usize, h: usize, w: usize, variant: RruVariant) -> (GateModel, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RruConfig {
        transition_channels: 6,
        spatial_hidden: 5,
        variant,
        ..RruConfig::new(c, h, w)
    };
    let mut store = ParamStore::new();
    let model = GateModel::new(&mut store, cfg, &mut rng).unwrap();
    for p in store.params_mut() {
        p.value = Tensor::randn(p.value.shape().to_vec(), 1.0, &mut rng);
    }
    (model, store)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=5, 1usize..=4, 1usize..=4, 1usize..=3)
}

fn variant() -> impl Strategy<Value = RruVariant> {
    prop::sample::select(RruVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gates_are_open_and_refinement_stays_in_the_envelope(
        seed: u64,
        (t, c, h, w) in dims(),
        variant in variant(),
        scale in 0.1f64..10.0,
    ) {
        let (model, mut store) = random_model(seed, c, h, w, variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::randn([t, c, h, w], scale, &mut rng);
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
        let (refined, gates) = model.refine_sequence(&mut store, &x, mode, true).unwrap();
        for z in gates.unwrap() {
            prop_assert!(z.0.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        // each refined value lies between the previous state and the frame
        let n = c * h * w;
        for i in 0..n {
            let (ci, rest) = (i / (h * w), i % (h * w));
            let mut prev = x.data()[i];
            for step in 0..t {
                let v = x.data()[step * n + i];
                let s = refined.0.data()[(ci * t + step) * h * w + rest];
                prop_assert!(prev.min(v) <= s && s <= prev.max(v), "step {step}: {s} outside {prev}, {v}");
                prev = s;
            }
        }
    }

    #[test]
    fn constant_sequences_are_fixed_points(
        seed: u64,
        (t, c, h, w) in dims(),
        variant in variant(),
    ) {
        let (model, mut store) = random_model(seed, c, h, w, variant);
        let frame = Tensor::randn([c, h, w], 3.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let x = Tensor::new([t, c, h, w], frame.data().repeat(t)).unwrap();
        let (refined, _) = model.refine_sequence(&mut store, &x, Mode::Train, false).unwrap();
        for step in 0..t {
            for i in 0..c * h * w {
                let (ci, rest) = (i / (h * w), i % (h * w));
                let s = refined.0.data()[(ci * t + step) * h * w + rest];
                prop_assert!((s - frame.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn open_gates_pass_frames_through(
        seed: u64,
        (t, c, h, w) in dims(),
    ) {
        let x = Tensor::randn([t, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let ones = vec![GateMap(Tensor::ones([c, h, w])); t];
        let refined = refine_with_gates(&x, &ones).unwrap();
        for step in 0..t {
            for i in 0..c * h * w {
                let (ci, rest) = (i / (h * w), i % (h * w));
                let s = refined.0.data()[(ci * t + step) * h * w + rest];
                prop_assert_eq!(s.to_bits(), x.data()[step * c * h * w + i].to_bits());
            }
        }
    }

    #[test]
    fn closed_gates_hold_the_first_frame(
        seed: u64,
        (t, c, h, w) in dims(),
    ) {
        let x = Tensor::randn([t, c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let zeros = vec![GateMap(Tensor::zeros([c, h, w])); t];
        let refined = refine_with_gates(&x, &zeros).unwrap();
        for step in 0..t {
            for i in 0..c * h * w {
                let (ci, rest) = (i / (h * w), i % (h * w));
                prop_assert_eq!(refined.0.data()[(ci * t + step) * h * w + rest], x.data()[i]);
            }
        }
    }
}

#[test]
fn mismatched_gates_are_rejected() {
    let x = Tensor::zeros([3, 2, 2, 2]);
    assert!(refine_with_gates(&x, &[GateMap(Tensor::ones([2, 2, 2]))]).is_err());
    let wrong = vec![GateMap(Tensor::ones([2, 1, 2])); 3];
    assert!(refine_with_gates(&x, &wrong).is_err());
}
