//! Training objective: identity cross-entropy, video-level batch-hard
//! triplet and part-level (horizontal strip) triplet.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNormIds, Ctx, DenseIds, ParamStore};
use crate::tensor::Tensor;

pub use crate::autodiff::euclidean;

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.4;

/// PK batch layout and margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    /// Identities per batch.
    pub n: usize,
    /// Sequences per identity.
    pub k: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            n: 4,
            k: 2,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "batch-hard mining needs N >= 2 and K >= 2, got N={} K={}",
                self.n, self.k
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// FC, batch norm, ReLU, dropout, FC: the identity classifier on top of
/// the video descriptor.
#[derive(Clone, Debug)]
pub struct ClassifierBlock {
    fc1: DenseIds,
    bn: BatchNormIds,
    fc2: DenseIds,
    pub dropout: f64,
}

impl ClassifierBlock {
    pub fn new(
        store: &mut ParamStore,
        d_in: usize,
        hidden: usize,
        num_identities: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: DenseIds::new(store, "classifier.fc1", d_in, hidden, rng),
            bn: BatchNormIds::new(store, "classifier.bn", hidden),
            fc2: DenseIds::new(store, "classifier.fc2", hidden, num_identities, rng),
            dropout: 0.5,
        }
    }

    /// Identity logits `[B, num_identities]` for descriptors `[B, d]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var, dropout_seed: u64) -> Result<Var> {
        let h = self.fc1.forward(ctx, f)?;
        let h = ctx.batch_norm(h, &self.bn, 1, true)?;
        let h = ctx.g.relu(h)?;
        let h = ctx.g.dropout(h, self.dropout, dropout_seed, ctx.mode)?;
        self.fc2.forward(ctx, h)
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    let [rows, classes] = *s else {
        return Err(Error::shape("cross_entropy", format!("logits must be [N, classes], got {s:?}")));
    };
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, labels)?;
    let mean = g.mean_all(picked)?;
    g.scale(mean, -1.0)
}

/// Classifier cross-entropy on the sequence logits plus the auxiliary
/// cross-entropy on per-frame logits (`[B·T, classes]`, frames of a
/// sequence contiguous), the latter averaged over all frames.
pub fn cross_entropy_losses(g: &mut Graph, logits: Var, frame_logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = g.shape(frame_logits)[0];
    if labels.is_empty() || !rows.is_multiple_of(labels.len()) {
        return Err(Error::shape(
            "cross_entropy_losses",
            format!("{rows} frame rows for {} sequences", labels.len()),
        ));
    }
    let t = rows / labels.len();
    let frame_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, t)).collect();
    let main = cross_entropy(g, logits, labels)?;
    let aux = cross_entropy(g, frame_logits, &frame_labels)?;
    g.add(main, aux)
}

/// Strip features `[B, C, H]` of refined sequences `[B, C, T, H, W]`: the
/// mean over time and width of each row.
pub fn part_features(g: &mut Graph, s: Var) -> Result<Var> {
    if g.shape(s).len() != 5 {
        return Err(Error::shape("part_features", format!("expected [B, C, T, H, W], got {:?}", g.shape(s))));
    }
    g.mean(s, &[2, 4], false)
}

/// Batch-hard triplet loss per strip of `parts` (`[B, C, H]`), averaged
/// over strips.
pub fn part_level_loss(g: &mut Graph, parts: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let s = g.shape(parts);
    if s.len() != 3 {
        return Err(Error::shape("part_level_loss", format!("expected [B, C, H], got {s:?}")));
    }
    let h = s[2];
    let mut per_strip = Vec::with_capacity(h);
    for r in 0..h {
        let strip = g.select(parts, 2, r)?;
        per_strip.push(g.batch_hard_triplet(strip, labels, margin)?);
    }
    let stacked = g.stack(&per_strip, 0)?;
    g.mean_all(stacked)
}

/// Which terms of the objective are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub classification: bool,
    pub video: bool,
    pub part: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            classification: true,
            video: true,
            part: true,
        }
    }
}

/// Individual terms of one evaluation of the objective; disabled terms are
/// `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub classification: Option<Var>,
    pub video: Option<Var>,
    pub part: Option<Var>,
}

/// Unweighted sum of the present terms; a constant zero if none are.
pub fn total_loss(g: &mut Graph, parts: &LossParts) -> Result<Var> {
    let mut terms = [parts.classification, parts.video, parts.part].into_iter().flatten();
    let Some(mut total) = terms.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triplet(values: &[f64], d: usize, labels: &[usize], m: f64) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([values.len() / d, d], values.to_vec()).unwrap());
        let l = g.batch_hard_triplet(x, labels, m).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn triplet_worked_examples() {
        let labels = [0, 0, 1, 1];
        assert_eq!(triplet(&[1.5; 8], 2, &labels, 0.4), 0.4);
        assert_eq!(triplet(&[0.0, 1.0, 10.0, 11.0], 1, &labels, 0.4), 0.0);
        assert_eq!(triplet(&[0.0, 2.0, 1.0, 3.0], 1, &labels, 0.4), 1.4);
    }

    #[test]
    fn triplet_configuration_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3, 2]));
        assert!(g.batch_hard_triplet(x, &[0, 0, 0], 0.4).is_err());
        assert!(g.batch_hard_triplet(x, &[0, 1], 0.4).is_err());
        assert!(g.batch_hard_triplet(x, &[0, 1, 1], -1.0).is_err());
        assert!(TripletConfig { n: 1, ..Default::default() }.validate().is_err());
        assert!(TripletConfig::default().validate().is_ok());
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros([3, 5]));
        let ce = cross_entropy(&mut g, logits, &[0, 4, 2]).unwrap();
        assert!((g.value(ce).item().unwrap() - 5f64.ln()).abs() < 1e-15);
        let frames = g.constant(Tensor::zeros([6, 5]));
        let both = cross_entropy_losses(&mut g, logits, frames, &[0, 4, 2]).unwrap();
        assert!((g.value(both).item().unwrap() - 2.0 * 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new([1, 3], vec![-200.0, 200.0, -200.0]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[1]).unwrap();
        assert!(g.value(ce).item().unwrap().abs() < 1e-15);
        assert!(cross_entropy(&mut g, logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::randn([4, 6], 3.0, &mut rng);
        let labels = [5, 0, 2, 2];
        let mut g = Graph::new();
        let logits = g.constant(t.clone());
        let ce = cross_entropy(&mut g, logits, &labels).unwrap();
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &t.data()[r * 6..(r + 1) * 6];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[l].exp() / z).ln();
        }
        assert!((g.value(ce).item().unwrap() - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn part_features_of_row_indexed_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tensor::randn([2, 3, 2, 4, 3], 1.0, &mut rng);
        let r = 2;
        for b in 0..2 {
            for c in 0..3 {
                for tt in 0..2 {
                    for w in 0..3 {
                        t.set(&[b, c, tt, r, w], r as f64);
                    }
                }
            }
        }
        let mut g = Graph::new();
        let s = g.constant(t);
        let p = part_features(&mut g, s).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 3, 4]);
        for b in 0..2 {
            for c in 0..3 {
                assert_eq!(g.value(p).get(&[b, c, r]), r as f64);
            }
        }
    }

    #[test]
    fn part_loss_of_identical_sequences_is_margin() {
        let mut g = Graph::new();
        let parts = g.constant(Tensor::full([4, 3, 2], 0.7));
        let l = part_level_loss(&mut g, parts, &[0, 0, 1, 1], 0.4).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.4);
    }

    #[test]
    fn single_strip_reduces_to_video_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::randn([6, 4, 1], 1.0, &mut rng);
        let labels = [0, 0, 1, 1, 2, 2];
        let mut g = Graph::new();
        let parts = g.constant(t.clone());
        let lp = part_level_loss(&mut g, parts, &labels, 0.4).unwrap();
        let flat = g.constant(t.reshape([6, 4]).unwrap());
        let lv = g.batch_hard_triplet(flat, &labels, 0.4).unwrap();
        assert_eq!(g.value(lp).item().unwrap(), g.value(lv).item().unwrap());
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let none = total_loss(&mut g, &LossParts::default()).unwrap();
        assert_eq!(g.value(none).item().unwrap(), 0.0);
        let a = g.constant(Tensor::scalar(1.25));
        let b = g.constant(Tensor::scalar(0.5));
        let c = g.constant(Tensor::scalar(2.0));
        let all = LossParts {
            classification: Some(a),
            video: Some(b),
            part: Some(c),
        };
        let sum = total_loss(&mut g, &all).unwrap();
        assert_eq!(g.value(sum).item().unwrap(), 3.75);
        let no_video = total_loss(&mut g, &LossParts { video: None, ..all }).unwrap();
        assert_eq!(g.value(no_video).item().unwrap(), 3.25);
    }

    #[test]
    fn classifier_eval_ignores_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut block = ClassifierBlock::new(&mut store, 4, 6, 3, &mut rng);
        let x = Tensor::randn([2, 4], 1.0, &mut rng);
        let run = |block: &ClassifierBlock, store: &mut ParamStore| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let mut ctx = Ctx {
                g: &mut g,
                bound: &bound,
                store,
                mode: Mode::Eval,
            };
            let y = block.forward(&mut ctx, xv, 9).unwrap();
            g.value(y).clone()
        };
        let a = run(&block, &mut store);
        block.dropout = 0.0;
        assert_eq!(run(&block, &mut store), a);
    }
}
