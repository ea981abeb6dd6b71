//! Model configuration, named parameter storage and graph bindings.
//!
//! Every trainable tensor lives in [`ModelParams`] under a dotted name:
//!
//! ```text
//! {text,video}.enc.token            vocab × D      token table
//! {text,video}.enc.pos              maxLen × D     content positions
//! {text,video}.enc.l{i}.*           backbone transformer layer i
//! {text,video}.seq.pos              maxLen × D     seqTransf content positions
//! {text,video}.seq.extra            C × D          extra learnable tokens (C > 0)
//! {text,video}.seq.extra_pos        C × D          their dedicated positions
//! {text,video}.seq.l{i}.*           seqTransf layer i
//! {text,video}.head.{mu,sigma}.*    probabilistic heads
//! logit.log_inv_temp                1              shared inverse temperature
//! ```
//!
//! A transformer layer holds `ln1.{g,b}`, `attn.{wq,wk,wv,wo}`, `ln2.{g,b}`,
//! `mlp.{w1,b1,w2,b2}`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphError, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which tower a sequence or parameter group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Video,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub video_vocab: usize,
    /// Maximum text length including the leading [CLS] token.
    pub max_text_len: usize,
    pub max_video_len: usize,
    pub encoder_layers: usize,
    pub seq_layers: usize,
    pub extra_text: usize,
    pub extra_video: usize,
    pub init_std: f64,
    pub init_log_inv_temp: f64,
    /// Whether the [CLS] row joins the token-wise word set.
    pub include_cls_in_matching: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            text_vocab: 160,
            video_vocab: 160,
            max_text_len: 17,
            max_video_len: 12,
            encoder_layers: 1,
            seq_layers: 2,
            extra_text: 2,
            extra_video: 3,
            init_std: 0.02,
            init_log_inv_temp: 100f64.ln(),
            include_cls_in_matching: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide a positive dim ({})", self.heads, self.dim)));
        }
        if self.text_vocab < 2 || self.video_vocab < 1 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if self.max_text_len < 2 || self.max_video_len < 1 {
            return Err(Error::Config("maximum lengths too small".into()));
        }
        Ok(())
    }

    pub fn vocab(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text_vocab,
            Modality::Video => self.video_vocab,
        }
    }

    pub fn max_len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.max_text_len,
            Modality::Video => self.max_video_len,
        }
    }

    pub fn extra(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.extra_text,
            Modality::Video => self.extra_video,
        }
    }
}

/// Mixes a seed and a name into an independent 64-bit stream key.
pub fn mix_key(seed: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p)))
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// All trainable tensors, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so adding a tensor never perturbs the others.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let d = cfg.dim;
        for m in [Modality::Text, Modality::Video] {
            let p = m.prefix();
            specs.push((format!("{p}.enc.token"), vec![cfg.vocab(m), d], Init::Normal));
            specs.push((format!("{p}.enc.pos"), vec![cfg.max_len(m), d], Init::Normal));
            for l in 0..cfg.encoder_layers {
                layer_specs(&mut specs, &format!("{p}.enc.l{l}"), d, false);
            }
            specs.push((format!("{p}.seq.pos"), vec![cfg.max_len(m), d], Init::Normal));
            let c = cfg.extra(m);
            if c > 0 {
                specs.push((format!("{p}.seq.extra"), vec![c, d], Init::Normal));
                specs.push((format!("{p}.seq.extra_pos"), vec![c, d], Init::Normal));
            }
            for l in 0..cfg.seq_layers {
                // Zero output projections: seqTransf starts as the identity.
                layer_specs(&mut specs, &format!("{p}.seq.l{l}"), d, true);
            }
            specs.push((format!("{p}.head.mu.w"), vec![d, d], Init::Normal));
            specs.push((format!("{p}.head.mu.b"), vec![d], Init::Zeros));
            specs.push((format!("{p}.head.mu.ln.g"), vec![d], Init::Ones));
            specs.push((format!("{p}.head.mu.ln.b"), vec![d], Init::Zeros));
            specs.push((format!("{p}.head.sigma.w"), vec![d, d], Init::Zeros));
            specs.push((format!("{p}.head.sigma.b"), vec![d], Init::Zeros));
        }
        let mut tensors = BTreeMap::new();
        for (name, dims, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&dims),
                Init::Ones => Tensor::full(&dims, T::one()),
                Init::Normal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(seed, &[name_hash(&name)]));
                    Tensor::randn(&dims, cfg.init_std, &mut rng)
                }
            };
            tensors.insert(name, t);
        }
        tensors.insert("logit.log_inv_temp".into(), Tensor::scalar(T::c(cfg.init_log_inv_temp)));
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Declares every tensor as a named graph input.
    pub fn declare(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<ParamVars> {
        self.declare_where(g, |_| requires_grad)
    }

    /// Declares every tensor, tracking gradients for names that match.
    pub fn declare_where(&self, g: &mut Graph<T>, requires_grad: impl Fn(&str) -> bool) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.input(name, t.dims(), requires_grad(name))?);
        }
        Ok(ParamVars { vars })
    }
}

fn layer_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str, d: usize, zero_out: bool) {
    let out_init = || if zero_out { Init::Zeros } else { Init::Normal };
    specs.push((format!("{p}.ln1.g"), vec![d], Init::Ones));
    specs.push((format!("{p}.ln1.b"), vec![d], Init::Zeros));
    specs.push((format!("{p}.attn.wq"), vec![d, d], Init::Normal));
    specs.push((format!("{p}.attn.wk"), vec![d, d], Init::Normal));
    specs.push((format!("{p}.attn.wv"), vec![d, d], Init::Normal));
    specs.push((format!("{p}.attn.wo"), vec![d, d], out_init()));
    specs.push((format!("{p}.ln2.g"), vec![d], Init::Ones));
    specs.push((format!("{p}.ln2.b"), vec![d], Init::Zeros));
    specs.push((format!("{p}.mlp.w1"), vec![d, 4 * d], Init::Normal));
    specs.push((format!("{p}.mlp.b1"), vec![4 * d], Init::Zeros));
    specs.push((format!("{p}.mlp.w2"), vec![4 * d, d], out_init()));
    specs.push((format!("{p}.mlp.b2"), vec![d], Init::Zeros));
}

/// Graph handles of the declared parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, GraphError> {
        self.vars.get(name).copied().ok_or_else(|| GraphError::UnknownInput(name.to_string()))
    }
}
