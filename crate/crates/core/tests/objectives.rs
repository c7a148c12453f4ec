#[path = "common/oracles.rs"]
mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strm_core::autodiff::Graph;
use strm_core::model::Model;
use strm_core::nn::{Ctx, ParamStore};
use strm_core::objectives::{part_features, part_level_loss, LossTerms, DEFAULT_MARGIN};
use strm_core::synthdata::{sample_batch, SynthConfig};
use strm_core::Tensor;

fn pk_labels(rng: &mut impl Rng) -> Vec<usize> {
    let (n, k) = (rng.random_range(2..=4), rng.random_range(1..=3));
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Values on a coarse grid so that tied distances occur.
fn grid(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(-2i32..=2)) * 0.5).collect()
}

#[test]
fn triplet_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let labels = pk_labels(&mut rng);
        let d = rng.random_range(1..=5);
        let data = if case % 2 == 0 { grid(&mut rng, labels.len() * d) } else { Tensor::randn([labels.len(), d], 1.0, &mut rng).data().to_vec() };
        let rows: Vec<Vec<f64>> = data.chunks(d).map(<[f64]>::to_vec).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([labels.len(), d], data).unwrap());
        let l = g.batch_hard_triplet(x, &labels, DEFAULT_MARGIN).unwrap();
        assert_eq!(g.value(l).item().unwrap(), oracles::triplet(&rows, &labels, DEFAULT_MARGIN), "case {case}");
    }
}

#[test]
fn identical_features_cost_the_margin() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([6, 3], [0.3, -1.0, 2.0].repeat(6)).unwrap());
    let l = g.batch_hard_triplet(x, &[0, 0, 1, 1, 2, 2], 0.4).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.4);
}

#[test]
fn single_identity_batch_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([3, 2]));
    assert!(g.batch_hard_triplet(x, &[1, 1, 1], 0.4).is_err());
}

#[test]
fn part_loss_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let labels = pk_labels(&mut rng);
        let shape = [labels.len(), rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3)];
        let n: usize = shape.iter().product();
        let data = if case % 2 == 0 { grid(&mut rng, n) } else { Tensor::randn(shape.to_vec(), 1.0, &mut rng).data().to_vec() };
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(shape.to_vec(), data.clone()).unwrap());
        let p = part_features(&mut g, v).unwrap();
        let l = part_level_loss(&mut g, p, &labels, DEFAULT_MARGIN).unwrap();
        assert_eq!(g.value(l).item().unwrap(), oracles::part_loss(&data, shape, &labels, DEFAULT_MARGIN), "case {case}");
    }
}

fn tiny_model() -> (Model, ParamStore, SynthConfig) {
    let mut cfg = strm_core::config::Config::default();
    cfg.model.backbone.widths = [4, 4, 4];
    cfg.model.backbone.image_height = 16;
    cfg.model.backbone.image_width = 8;
    cfg.model.transition_channels = 8;
    cfg.model.spatial_hidden = 6;
    cfg.model.descriptor_dim = 8;
    cfg.model.classifier_hidden = 10;
    cfg.data.frames = 3;
    cfg.data.corruption.occlusion_size = (3, 6);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model.clone(), 0).unwrap();
    (model, store, cfg.synth())
}

/// Gradient of the objective restricted to `terms`, per parameter.
fn grads(model: &Model, store: &mut ParamStore, images: &Tensor, labels: &[usize], terms: LossTerms) -> Vec<(String, Tensor)> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(images.clone());
    let mut ctx = Ctx {
        g: &mut g,
        bound: &bound,
        store,
        mode: strm_core::autodiff::Mode::Train,
    };
    let (loss, _) = model.loss(&mut ctx, x, labels, terms, DEFAULT_MARGIN, 7).unwrap();
    g.backward(loss).unwrap();
    store
        .params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| (p.name.clone(), g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))))
        .collect()
}

#[test]
fn each_term_reaches_its_own_parameters_only() {
    let (model, mut store, synth) = tiny_model();
    let batch = sample_batch(&synth, 2, 2, 5).unwrap();
    let only = |c, v, p| LossTerms { classification: c, video: v, part: p };

    let cls = grads(&model, &mut store, &batch.images, &batch.labels, only(true, false, false));
    let vid = grads(&model, &mut store, &batch.images, &batch.labels, only(false, true, false));
    let part = grads(&model, &mut store, &batch.images, &batch.labels, only(false, false, true));
    let none = grads(&model, &mut store, &batch.images, &batch.labels, only(false, false, false));

    let nonzero = |gs: &[(String, Tensor)], prefix: &str| {
        gs.iter().filter(|(n, _)| n.starts_with(prefix)).any(|(_, t)| t.data().iter().any(|&v| v != 0.0))
    };
    // classifier weights are touched by the classification term alone
    assert!(nonzero(&cls, "classifier"));
    assert!(!nonzero(&vid, "classifier"));
    assert!(!nonzero(&part, "classifier"));
    // the integration module sits after the refined maps, so the part term
    // cannot reach it
    assert!(nonzero(&vid, "stim"));
    assert!(!nonzero(&part, "stim"));
    assert!(nonzero(&part, "rru"));
    assert!(none.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn identical_volumes_cost_the_margin() {
    for h in 1..=4 {
        let shape = [6, 3, 2, h, 2];
        let mut g = Graph::new();
        let v = g.constant(Tensor::full(shape.to_vec(), 0.7));
        let p = part_features(&mut g, v).unwrap();
        let l = part_level_loss(&mut g, p, &[0, 0, 1, 1, 2, 2], 0.4).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.4, "h = {h}");
    }
}
