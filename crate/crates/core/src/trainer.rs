//! Optimization loop: PK batches, the multi-term objective, SGD with
//! Nesterov momentum and L2 weight decay, held-out evaluation.
//!
//! Every random choice is a function of `(seed, iteration)`, so a run can
//! be resumed from a checkpoint and two runs with the same configuration
//! produce identical parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{multi_trial, rank_and_score, CmcResult, EvalSet, TrialSummary};
use crate::model::Model;
use crate::nn::{Ctx, ParamStore};
use crate::synthdata::{
    derive_seed, eval_sequences, load_frame_dirs, sample_batch, FrameDataset, LabeledSequences, LoadOptions, Split,
    VideoBatch,
};
use crate::tensor::Tensor;

const TAG_BATCH: u64 = 11;
const TAG_DROPOUT: u64 = 12;

/// Sequences described per eval-mode forward pass.
const EVAL_CHUNK: usize = 8;

/// Loss values of one training step; disabled terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub classification: Option<f64>,
    pub video: Option<f64>,
    pub part: Option<f64>,
    pub total: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "iteration,L_c,L_v,L_p,total";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.16e}",
            self.iteration,
            f(self.classification),
            f(self.video),
            f(self.part),
            self.total
        )
    }
}

/// Where batches and held-out sequences come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic,
    Frames(FrameData),
}

/// A loaded frame-directory dataset with its train/test partition.
#[derive(Clone, Debug)]
pub struct FrameData {
    dataset: FrameDataset,
    /// Indices into `dataset.sequences` per training label.
    train: Vec<Vec<usize>>,
}

impl FrameData {
    pub fn new(dataset: FrameDataset) -> Result<Self> {
        let persons = dataset.persons(Split::Train);
        let train = persons
            .iter()
            .map(|p| {
                (0..dataset.sequences.len())
                    .filter(|&i| &dataset.sequences[i].person == p)
                    .collect::<Vec<_>>()
            })
            .filter(|v| !v.is_empty())
            .collect();
        Ok(Self { dataset, train })
    }

    pub fn num_train_identities(&self) -> usize {
        self.train.len()
    }
}

impl DataSource {
    /// Opens the data described by `cfg.data`.
    pub fn open(cfg: &Config) -> Result<Self> {
        match &cfg.data.root {
            None => Ok(DataSource::Synthetic),
            Some(root) => {
                let opts = LoadOptions {
                    height: cfg.model.backbone.image_height,
                    width: cfg.model.backbone.image_width,
                    min_length: cfg.data.min_length,
                };
                let ds = load_frame_dirs(root, cfg.data.split.as_deref(), opts)?;
                Ok(DataSource::Frames(FrameData::new(ds)?))
            }
        }
    }
}

/// Copies `[T', ...]` frames into a fixed-length clip of `t` frames
/// starting at `start`, repeating the last frame if the sequence is short.
fn clip(frames: &Tensor, start: usize, t: usize) -> Vec<f64> {
    let len = frames.shape()[0];
    let per = frames.numel() / len;
    let mut out = Vec::with_capacity(t * per);
    for i in 0..t {
        let f = (start + i).min(len - 1);
        out.extend_from_slice(&frames.data()[f * per..(f + 1) * per]);
    }
    out
}

/// SGD with Nesterov momentum, in the form
/// `g = ∇ + wd·p; v = μv + g; p -= lr·(g + μv)`.
/// Weight decay applies only to parameters whose kind decays.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], momentum: &mut [Tensor], cfg: &crate::config::TrainConfig) {
    let scale = match cfg.grad_clip {
        Some(max) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for ((p, g), v) in store.params_mut().iter_mut().zip(grads).zip(momentum.iter_mut()) {
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let (pd, gd, vd) = (p.value.data_mut(), g.data(), v.data_mut());
        for i in 0..pd.len() {
            let grad = gd[i] * scale + wd * pd[i];
            vd[i] = cfg.momentum * vd[i] + grad;
            pd[i] -= cfg.lr * (grad + cfg.momentum * vd[i]);
        }
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore,
    /// Momentum buffers, parallel to `store.params()`.
    pub momentum: Vec<Tensor>,
    pub iteration: u64,
    data: DataSource,
}

impl Trainer {
    /// Fresh model for `config`, initialized from `config.train.seed`.
    pub fn new(mut config: Config) -> Result<Self> {
        let data = DataSource::open(&config)?;
        if let DataSource::Frames(f) = &data {
            config.model.backbone.num_identities = f.num_train_identities().max(1);
        }
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config.model.clone(), config.train.seed)?;
        let momentum = store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Ok(Self {
            config,
            model,
            store,
            momentum,
            iteration: 0,
            data,
        })
    }

    /// Reassembles a trainer from checkpointed state.
    pub fn from_parts(config: Config, model: Model, store: ParamStore, momentum: Vec<Tensor>, iteration: u64) -> Result<Self> {
        let data = DataSource::open(&config)?;
        Ok(Self {
            config,
            model,
            store,
            momentum,
            iteration,
            data,
        })
    }

    /// Replaces the data configuration, e.g. to evaluate a checkpoint on
    /// other data. Model shapes are unchanged.
    pub fn set_data(&mut self, data: crate::config::DataConfig) -> Result<()> {
        self.config.data = data;
        self.data = DataSource::open(&self.config)?;
        Ok(())
    }

    /// The PK batch for `iteration`.
    pub fn batch(&self, iteration: u64) -> Result<VideoBatch> {
        let t = &self.config.train;
        let epoch_seed = derive_seed(&[t.seed, TAG_BATCH, iteration]);
        match &self.data {
            DataSource::Synthetic => sample_batch(&self.config.synth(), t.n, t.k, epoch_seed),
            DataSource::Frames(f) => {
                if f.train.len() < t.n {
                    return Err(Error::Config(format!(
                        "{} training identities, batch needs {}",
                        f.train.len(),
                        t.n
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
                let ids = rand::seq::index::sample(&mut rng, f.train.len(), t.n).into_vec();
                let frames = self.config.data.frames;
                let mut data = Vec::new();
                let (mut labels, mut cameras) = (Vec::new(), Vec::new());
                for &id in &ids {
                    for _ in 0..t.k {
                        let seq = &f.dataset.sequences[f.train[id][rng.random_range(0..f.train[id].len())]];
                        let len = seq.frames.shape()[0];
                        let start = rng.random_range(0..len.saturating_sub(frames) + 1);
                        data.extend(clip(&seq.frames, start, frames));
                        labels.push(id);
                        cameras.push(0);
                    }
                }
                let b = &self.config.model.backbone;
                let images = Tensor::new([t.n * t.k, frames, 3, b.image_height, b.image_width], data)?;
                Ok(VideoBatch { images, labels, cameras })
            }
        }
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, batch: &VideoBatch) -> Result<StepMetrics> {
        let t = self.config.train.clone();
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(batch.images.clone());
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store: &mut self.store,
            mode: Mode::Train,
        };
        let dropout_seed = derive_seed(&[t.seed, TAG_DROPOUT, self.iteration]);
        let (total, parts) = self.model.loss(&mut ctx, x, &batch.labels, t.terms, t.margin, dropout_seed)?;
        let value = |v: Option<_>| v.map(|v| g.value(v).data()[0]);
        let metrics = StepMetrics {
            iteration: self.iteration,
            classification: value(parts.classification),
            video: value(parts.video),
            part: value(parts.part),
            total: g.value(total).data()[0],
        };
        g.backward(total)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).cloned().expect("parameters are gradient leaves"))
            .collect();
        sgd_step(&mut self.store, &grads, &mut self.momentum, &t);
        self.iteration += 1;
        Ok(metrics)
    }

    /// Trains until `config.train.iterations`, calling `on_step` after
    /// every step and `on_eval` after every periodic evaluation.
    pub fn fit(
        &mut self,
        mut on_step: impl FnMut(&StepMetrics),
        mut on_eval: impl FnMut(u64, &TrialSummary),
    ) -> Result<()> {
        while self.iteration < self.config.train.iterations {
            let batch = self.batch(self.iteration)?;
            let m = self.step(&batch)?;
            on_step(&m);
            let every = self.config.train.eval_every;
            if every > 0 && self.iteration.is_multiple_of(every) {
                let s = self.evaluate(self.config.eval.trials)?;
                on_eval(self.iteration, &s);
            }
        }
        Ok(())
    }

    /// Eval-mode descriptors `[S, D]` of `sequences` `[S, T, 3, h, w]`.
    pub fn describe(&mut self, sequences: &Tensor) -> Result<Tensor> {
        let s = sequences.shape()[0];
        let per = sequences.numel() / s;
        let mut out = Vec::new();
        let mut shape = sequences.shape().to_vec();
        for start in (0..s).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(s);
            shape[0] = end - start;
            let chunk = Tensor::new(shape.clone(), sequences.data()[start * per..end * per].to_vec())?;
            out.extend_from_slice(self.model.describe_batch(&mut self.store, &chunk)?.data());
        }
        let d = out.len() / s;
        Tensor::new([s, d], out)
    }

    /// Probe/gallery descriptors of held-out split `trial`.
    pub fn eval_set(&mut self, trial: u64) -> Result<EvalSet> {
        match &self.data {
            DataSource::Synthetic => {
                let seqs = eval_sequences(&self.config.synth(), trial)?;
                let desc = self.describe(&seqs.images)?;
                split_by_camera(&seqs, &desc, self.config.eval.strict)
            }
            DataSource::Frames(f) => {
                let test: Vec<_> = f
                    .dataset
                    .sequences
                    .iter()
                    .filter(|s| f.dataset.split.get(&s.person) == Some(&Split::Test))
                    .cloned()
                    .collect();
                if test.is_empty() {
                    return Err(Error::InvalidArgument("the dataset has no test sequences".into()));
                }
                let mut cameras: Vec<&str> = test.iter().map(|s| s.camera.as_str()).collect();
                cameras.sort();
                cameras.dedup();
                let persons: Vec<&str> = {
                    let mut p: Vec<&str> = test.iter().map(|s| s.person.as_str()).collect();
                    p.sort();
                    p.dedup();
                    p
                };
                let mut desc = Vec::new();
                let (mut labels, mut cams) = (Vec::new(), Vec::new());
                for s in &test {
                    let d = self.model.extract_descriptor(&mut self.store, &s.frames)?;
                    desc.extend_from_slice(d.0.data());
                    labels.push(persons.binary_search(&s.person.as_str()).unwrap_or(0));
                    cams.push(cameras.binary_search(&s.camera.as_str()).unwrap_or(0));
                }
                let d = desc.len() / test.len();
                let seqs = LabeledSequences {
                    images: Tensor::zeros([1]),
                    labels,
                    cameras: cams,
                };
                split_by_camera(&seqs, &Tensor::new([test.len(), d], desc)?, self.config.eval.strict)
            }
        }
    }

    /// Mean and spread of CMC/mAP over `trials` held-out splits.
    pub fn evaluate(&mut self, trials: usize) -> Result<TrialSummary> {
        let results = (0..trials as u64)
            .map(|t| self.eval_set(t).and_then(|s| rank_and_score(&s)))
            .collect::<Result<Vec<CmcResult>>>()?;
        multi_trial(&results)
    }
}

/// Camera 0 sequences become probes, all others the gallery.
pub fn split_by_camera(seqs: &LabeledSequences, desc: &Tensor, strict: bool) -> Result<EvalSet> {
    let d = desc.shape()[1];
    let (mut probe, mut gallery) = (Vec::new(), Vec::new());
    let (mut pi, mut pc, mut gi, mut gc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (&id, &cam)) in seqs.labels.iter().zip(&seqs.cameras).enumerate() {
        let row = &desc.data()[i * d..(i + 1) * d];
        if cam == 0 {
            probe.extend_from_slice(row);
            pi.push(id);
            pc.push(cam);
        } else {
            gallery.extend_from_slice(row);
            gi.push(id);
            gc.push(cam);
        }
    }
    Ok(EvalSet {
        probe: Tensor::new([pi.len(), d], probe)?,
        probe_ids: pi,
        probe_cams: pc,
        gallery: Tensor::new([gi.len(), d], gallery)?,
        gallery_ids: gi,
        gallery_cams: gc,
        strict,
    })
}
