#[path = "common/oracles.rs"]
mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strm_core::eval::{rank_and_score, score_distances, EvalSet};
use strm_core::Tensor;

/// Random probe and gallery sets with small integer descriptors, so that
/// equal distances are common, and at least one probe with a match.
fn random_set(rng: &mut impl Rng) -> EvalSet {
    let (p, g, d) = (rng.random_range(1..=20), rng.random_range(1..=50), rng.random_range(1..=4));
    let ids = rng.random_range(1..=8);
    let vector = |rng: &mut ChaCha8Rng| loop {
        let v: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-2i32..=2))).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let probe: Vec<f64> = (0..p).flat_map(|_| vector(&mut r)).collect();
    let gallery: Vec<f64> = (0..g).flat_map(|_| vector(&mut r)).collect();
    let mut probe_ids: Vec<usize> = (0..p).map(|_| rng.random_range(0..ids)).collect();
    let gallery_ids: Vec<usize> = (0..g).map(|_| rng.random_range(0..ids)).collect();
    probe_ids[0] = gallery_ids[0];
    EvalSet {
        probe: Tensor::new([p, d], probe).unwrap(),
        probe_ids,
        probe_cams: vec![0; p],
        gallery: Tensor::new([g, d], gallery).unwrap(),
        gallery_ids,
        gallery_cams: vec![1; g],
        strict: false,
    }
}

fn oracle_distances(set: &EvalSet) -> Vec<Vec<f64>> {
    let d = set.probe.shape()[1];
    set.probe
        .data()
        .chunks(d)
        .map(|a| set.gallery.data().chunks(d).map(|b| oracles::cosine(a, b)).collect())
        .collect()
}

#[test]
fn scores_match_exhaustive_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let set = random_set(&mut rng);
        let got = rank_and_score(&set).unwrap();
        let (cmc, map) = oracles::cmc_map(&oracle_distances(&set), &set.probe_ids, &set.gallery_ids);
        assert_eq!(got.cmc, cmc, "case {case}");
        assert_eq!(got.map, map, "case {case}");
    }
}

#[test]
fn scores_are_invariant_under_increasing_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: [fn(f64) -> f64; 3] = [|d| 3.0 * d + 1.0, |d| d * d * d, |d| (d * 2.0).exp()];
    for case in 0..100 {
        let set = random_set(&mut rng);
        let base = rank_and_score(&set).unwrap();
        let dist = set.distances().unwrap();
        for f in maps {
            let moved = dist.map(f);
            let r = score_distances(&moved, &set.probe_ids, &set.gallery_ids, false).unwrap();
            assert_eq!(r, base, "case {case}");
        }
    }
}

#[test]
fn strict_sets_reject_unmatched_probes() {
    let mut set = random_set(&mut ChaCha8Rng::seed_from_u64(5));
    set.probe_ids[0] = 1000;
    set.strict = true;
    assert!(rank_and_score(&set).is_err());
    set.strict = false;
    if set.probe_ids.len() == 1 {
        assert!(rank_and_score(&set).is_err());
    }
}
