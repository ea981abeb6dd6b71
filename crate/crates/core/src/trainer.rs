//! Training loop: warmup-cosine schedule, Adam with global-norm clipping,
//! epoch batching over caption rounds, per-epoch logging and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoders::{PaddedBatch, TokenSequence};
use crate::error::{Error, FormatError, Result};
use crate::evaluator::{evaluate, MetricsLine, ScoreMode};
use crate::model::{mix_key, Modality, ModelConfig, ModelParams};
use crate::objectives::{build_objective, max_log_inv_temp, Direction, LossBreakdown, LossWeights};
use crate::synthcorpus::{Corpus, CorpusConfig, Split};
use crate::tensor::{Scalar, Tensor};
use crate::tensorfile::TensorFile;
use crate::uncertainty::NoiseStream;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UATV";

const LOG_INV_TEMP: &str = "logit.log_inv_temp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Samples per item for the distribution loss.
    pub k: usize,
    pub extra_video: usize,
    pub extra_text: usize,
    pub dim: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            base_lr: 5e-5,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            k: 7,
            extra_video: 3,
            extra_text: 2,
            dim: 32,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale reference run on the default corpus: batch 32, lr 5e-4.
    pub fn desk(seed: u64) -> Self {
        TrainConfig { batch_size: 32, base_lr: 5e-4, seed, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} must lie in [0, 1]", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }

    /// Model shape for a corpus: vocabularies and lengths come from the
    /// corpus, width and extra-token counts from this config.
    pub fn model_config(&self, corpus: &CorpusConfig) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            text_vocab: corpus.text_vocab,
            video_vocab: corpus.video_vocab,
            max_text_len: corpus.words + 1,
            max_video_len: corpus.frames,
            extra_text: self.extra_text,
            extra_video: self.extra_video,
            ..ModelConfig::default()
        }
    }
}

fn warmup_steps(total: usize, cfg: &TrainConfig) -> usize {
    (cfg.warmup_fraction * total as f64).round() as usize
}

/// Linear ramp to `base_lr` over the warmup steps, then cosine decay to 0.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = warmup_steps(total, cfg);
    if step >= total {
        return 0.0;
    }
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> =
            params.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.dims()))).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Fails with the first tensor holding a non-finite gradient.
pub fn check_finite<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteGradient(name.clone())),
        None => Ok(()),
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update. Every parameter must have a gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    check_finite(grads)?;
    for (name, p) in &params.tensors {
        let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
        if g.dims() != p.dims() {
            return Err(Error::DimMismatch { expected: p.len(), actual: g.len() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moment");
        let v = state.v.get_mut(name).expect("moment");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = gi.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::c(mn);
            *vi = T::c(vn);
            let delta = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps);
            *pi = T::c(pi.as_f64() - delta);
        }
    }
    if let Some(lit) = params.get_mut(LOG_INV_TEMP) {
        let cap = T::c(max_log_inv_temp());
        lit.data_mut().iter_mut().for_each(|x| {
            if *x > cap {
                *x = cap;
            }
        });
    }
    Ok(())
}

/// Train-split batches for one epoch as `(video, caption)` pairs. Each round
/// visits every train video once with its `round`-th caption, in a fresh
/// shuffled order; incomplete trailing batches are dropped.
pub fn epoch_batches(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<(usize, usize)>> {
    let train = corpus.video_indices(Split::Train);
    let caps: BTreeMap<usize, Vec<usize>> = train.iter().map(|&v| (v, corpus.captions_of(v).collect())).collect();
    let mut out = Vec::new();
    for round in 0..corpus.config.captions_per_video {
        let mut order = train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_key(seed, &[0xba7c, epoch, round as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch_size) {
            out.push(chunk.iter().filter_map(|&v| caps[&v].get(round).map(|&c| (v, c))).collect());
        }
    }
    out.retain(|b: &Vec<_>| b.len() == batch_size);
    out
}

pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub corpus_sha256: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    model: ModelConfig,
}

impl Checkpoint {
    pub fn init(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config(&corpus.config);
        let params = ModelParams::init(&model, cfg.seed)?;
        Ok(Checkpoint {
            adam: AdamState::new(&params),
            params,
            train: cfg.clone(),
            model,
            corpus_sha256: corpus.fingerprint(),
        })
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new(CHECKPOINT_MAGIC);
        for (name, t) in &self.params.tensors {
            f.insert_tensor(&format!("param.{name}"), t)?;
            f.insert_tensor(&format!("adam.m.{name}"), &self.adam.m[name])?;
            f.insert_tensor(&format!("adam.v.{name}"), &self.adam.v[name])?;
        }
        f.insert_u64("meta.step", &[self.adam.step])?;
        let meta = serde_json::to_vec(&Meta { train: self.train.clone(), model: self.model.clone() })
            .map_err(|e| Error::Config(e.to_string()))?;
        f.insert_bytes("meta.config", &meta)?;
        f.insert_bytes("meta.corpus_sha256", &self.corpus_sha256)?;
        Ok(f)
    }

    pub fn from_file(f: &TensorFile) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(f.bytes("meta.config")?)
            .map_err(|e| FormatError::Corrupt(format!("meta.config: {e}")))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in f.names_with_prefix("param.") {
            params.insert(name.to_string(), f.tensor(&format!("param.{name}"))?);
            m.insert(name.to_string(), f.tensor(&format!("adam.m.{name}"))?);
            v.insert(name.to_string(), f.tensor(&format!("adam.v.{name}"))?);
        }
        let params = ModelParams { tensors: params };
        let expected = ModelParams::<f32>::init(&meta.model, 0)?;
        for (name, t) in &expected.tensors {
            match params.get(name) {
                Some(p) if p.dims() == t.dims() => {}
                _ => return Err(FormatError::Corrupt(format!("parameter {name} missing or misshapen")).into()),
            }
        }
        if params.tensors.len() != expected.tensors.len() {
            return Err(FormatError::Corrupt("unexpected parameter tensors".into()).into());
        }
        let step = match f.u64s("meta.step")? {
            [s] => *s,
            _ => return Err(FormatError::Corrupt("meta.step".into()).into()),
        };
        let corpus_sha256 =
            f.bytes("meta.corpus_sha256")?.try_into().map_err(|_| FormatError::Corrupt("meta.corpus_sha256".into()))?;
        Ok(Checkpoint { params, adam: AdamState { m, v, step }, train: meta.train, model: meta.model, corpus_sha256 })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_file()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_file(&TensorFile::from_bytes(bytes, CHECKPOINT_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Loss terms and mean uncertainty levels of one optimisation step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub losses: LossBreakdown,
    pub text_uncertainty: f64,
    pub video_uncertainty: f64,
}

fn mean_level<T: Scalar>(log_var: &Tensor<T>) -> f64 {
    let rows: Vec<f64> =
        log_var.rows().map(|r| (0.5 * r.iter().map(|x| x.as_f64()).sum::<f64>() / r.len() as f64).exp()).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// Forward and backward for one batch of `(video, caption)` pairs.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    epoch: u64,
    batch: u64,
) -> Result<(BTreeMap<String, Tensor<f32>>, StepStats)> {
    let texts: Vec<&TokenSequence> = pairs.iter().map(|&(_, c)| &corpus.captions[c].text).collect();
    let videos: Vec<&TokenSequence> = pairs.iter().map(|&(v, _)| &corpus.videos[v]).collect();
    let tb = PaddedBatch::new(&texts, model, Modality::Text)?;
    let vb = PaddedBatch::new(&videos, model, Modality::Video)?;
    let b = pairs.len();
    let tn = NoiseStream::new(mix_key(cfg.seed, &[1])).batch_tensor(epoch, batch, b, cfg.k, model.dim);
    let vn = NoiseStream::new(mix_key(cfg.seed, &[2])).batch_tensor(epoch, batch, b, cfg.k, model.dim);
    let mut g = Graph::new();
    let pv = params.declare(&mut g, true)?;
    let obj = build_objective(&mut g, &pv, model, &tb, &vb, tn, vn, cfg.weights)?;
    g.forward(&params.tensors)?;
    let losses = obj.breakdown(&g)?;
    let grads = g.backward_scalar(obj.total)?;
    let stats = StepStats {
        losses,
        text_uncertainty: mean_level(g.value(obj.text_log_var)?),
        video_uncertainty: mean_level(g.value(obj.video_log_var)?),
    };
    Ok((grads, stats))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsLine>,
}

pub fn train_run(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_run_with(corpus, cfg, |_| {})
}

/// Trains from a fresh initialisation, calling `on_epoch` after each epoch.
pub fn train_run_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsLine),
) -> Result<TrainOutcome> {
    let mut ckpt = Checkpoint::init(corpus, cfg)?;
    let train_videos = corpus.video_indices(Split::Train).len();
    if train_videos == 0 {
        return Err(Error::Empty("train split"));
    }
    if cfg.batch_size > train_videos {
        return Err(Error::Config(format!(
            "batch_size ({}) exceeds the train split ({train_videos} videos)",
            cfg.batch_size
        )));
    }
    let per_epoch = epoch_batches(corpus, cfg.batch_size, cfg.seed, 0).len();
    let total = per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 6];
        let batches = epoch_batches(corpus, cfg.batch_size, cfg.seed, epoch as u64);
        for (bi, pairs) in batches.iter().enumerate() {
            let (mut grads, s) =
                batch_gradients(&ckpt.params, &ckpt.model, cfg, corpus, pairs, epoch as u64, bi as u64)?;
            check_finite(&grads)?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            step += 1;
            let lr = lr_schedule(step, total, cfg);
            adam_step(&mut ckpt.params, &grads, &mut ckpt.adam, lr, cfg)?;
            let l = s.losses;
            for (acc, x) in sums.iter_mut().zip([l.dsa, l.dua, l.kl, l.total, s.text_uncertainty, s.video_uncertainty])
            {
                *acc += x;
            }
        }
        let n = batches.len() as f64;
        let report = evaluate(&ckpt.params, &ckpt.model, corpus, Direction::T2V, ScoreMode::Deterministic)?;
        let line = MetricsLine {
            epoch: Some(epoch + 1),
            losses: Some(LossBreakdown { dsa: sums[0] / n, dua: sums[1] / n, kl: sums[2] / n, total: sums[3] / n }),
            text_uncertainty: sums[4] / n,
            video_uncertainty: sums[5] / n,
            metrics: report.metrics,
        };
        on_epoch(&line);
        log.push(line);
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

pub fn format_log(lines: &[MetricsLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::generate_corpus;

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            video_count: 12,
            test_videos: 4,
            captions_per_video: 2,
            frames: 6,
            words: 6,
            topics: 6,
            segments: 2,
            tokens_per_topic: 4,
            video_vocab: 24,
            text_vocab: 25,
            noise: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, base_lr: 1e-3, k: 2, dim: 8, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 100, &cfg), 0.0);
        assert_eq!(lr_schedule(10, 100, &cfg), 5e-5);
        assert_eq!(lr_schedule(5, 100, &cfg), 2.5e-5);
        assert_eq!(lr_schedule(100, 100, &cfg), 0.0);
        assert!((lr_schedule(55, 100, &cfg) - 2.5e-5).abs() < 1e-18);
        for s in 10..100 {
            assert!(lr_schedule(s + 1, 100, &cfg) <= lr_schedule(s, 100, &cfg));
        }
    }

    fn scalar_params(x: f64) -> ModelParams<f64> {
        ModelParams { tensors: [("w".to_string(), Tensor::vector(&[x]))].into() }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p);
        let grads = [("w".to_string(), Tensor::vector(&[1.0]))].into();
        adam_step(&mut p, &grads, &mut st, 1e-3, &TrainConfig::default()).unwrap();
        let delta = p.get("w").unwrap().data()[0] - 0.5;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        st.m.insert("w".into(), Tensor::vector(&[0.2]));
        st.v.insert("w".into(), Tensor::vector(&[0.4]));
        let grads = [("w".to_string(), Tensor::vector(&[0.0]))].into();
        adam_step(&mut p, &grads, &mut st, 0.0, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
        assert!((st.m["w"].data()[0] - 0.18).abs() < 1e-15);
        assert!((st.v["w"].data()[0] - 0.4 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p);
        let grads = [("w".to_string(), Tensor::vector(&[f64::NAN]))].into();
        match adam_step(&mut p, &grads, &mut st, 1e-3, &TrainConfig::default()) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: BTreeMap<String, Tensor<f64>> =
            [("a".to_string(), Tensor::vector(&[3.0])), ("b".to_string(), Tensor::vector(&[4.0]))].into();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15 && (g["b"].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), 1.0);
    }

    #[test]
    fn batches_have_distinct_videos() {
        let c = tiny_corpus();
        let train = c.video_indices(Split::Train);
        let batches = epoch_batches(&c, 3, 0, 0);
        assert_eq!(batches.len(), 2 * (train.len() / 3));
        for b in &batches {
            let mut vs: Vec<usize> = b.iter().map(|p| p.0).collect();
            vs.sort_unstable();
            vs.dedup();
            assert_eq!(vs.len(), 3);
            for &(v, cap) in b {
                assert_eq!(c.captions[cap].video, v);
                assert_eq!(c.splits[v], Split::Train);
            }
        }
        assert_ne!(epoch_batches(&c, 3, 0, 0), epoch_batches(&c, 3, 0, 1));
    }

    #[test]
    fn zero_epochs_is_initialisation() {
        let c = tiny_corpus();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train_run(&c, &cfg).unwrap();
        assert!(out.log.is_empty());
        let init = Checkpoint::init(&c, &cfg).unwrap();
        assert_eq!(out.checkpoint.to_bytes().unwrap(), init.to_bytes().unwrap());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let c = tiny_corpus();
        let cfg = TrainConfig { base_lr: 0.0, ..tiny_cfg() };
        let out = train_run(&c, &cfg).unwrap();
        let init = Checkpoint::init(&c, &cfg).unwrap();
        assert_eq!(out.checkpoint.params, init.params);
        assert!(out.checkpoint.adam.step > 0);
    }

    #[test]
    fn runs_are_deterministic_and_checkpoints_round_trip() {
        let c = tiny_corpus();
        let a = train_run(&c, &tiny_cfg()).unwrap();
        let b = train_run(&c, &tiny_cfg()).unwrap();
        let bytes = a.checkpoint.to_bytes().unwrap();
        assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
        assert_eq!(format_log(&a.log), format_log(&b.log));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.train, tiny_cfg());
        for l in &a.log {
            assert!(l.text_uncertainty.is_finite() && l.text_uncertainty > 0.0);
            assert!(l.video_uncertainty.is_finite() && l.video_uncertainty > 0.0);
        }
        assert_ne!(a.checkpoint.params, Checkpoint::init(&c, &tiny_cfg()).unwrap().params);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let c = tiny_corpus();
        let cfg = TrainConfig { batch_size: 9, ..tiny_cfg() };
        assert!(matches!(train_run(&c, &cfg), Err(Error::Config(_))));
    }
}
