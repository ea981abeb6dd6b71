//! Finite-difference verification: every primitive and composed loss at
//! random points, and the full training objective on a small random batch
//! with frozen noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    check_graph_with, finite_difference_check_with, GradCheckReport, Graph, GraphError, Stencil, Var,
};
use crate::encoders::{PaddedBatch, TokenSequence, TowerVars, NORM_EPS};
use crate::error::{Error, Result};
use crate::matching::dsa_similarity_graph;
use crate::model::{Modality, ModelConfig, ModelParams};
use crate::objectives::{build_objective, info_nce_graph, kl_graph, mil_nce_graph, LossWeights};
use crate::tensor::Tensor;
use crate::uncertainty::{sample_graph, NoiseStream};

/// Shape of the objective verification batch.
#[derive(Clone, Debug)]
pub struct CheckSetup {
    pub batch: usize,
    pub samples: usize,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Std of the random perturbation added to every parameter.
    pub param_std: f64,
    pub stencil: Stencil,
}

impl Default for CheckSetup {
    fn default() -> Self {
        CheckSetup {
            batch: 3,
            samples: 2,
            model: ModelConfig {
                dim: 4,
                heads: 2,
                text_vocab: 9,
                video_vocab: 8,
                max_text_len: 5,
                max_video_len: 4,
                encoder_layers: 1,
                seq_layers: 2,
                extra_text: 1,
                extra_video: 1,
                init_std: 0.3,
                init_log_inv_temp: 0.0,
                include_cls_in_matching: false,
            },
            weights: LossWeights::default(),
            param_std: 0.3,
            stencil: Stencil::FourPoint,
        }
    }
}

/// Random parameters with every tensor perturbed, including the ones that
/// start at zero or one. The logit scale stays at its configured value.
pub fn random_params(cfg: &ModelConfig, std: f64, seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in p.tensors.iter_mut() {
        if name == "logit.log_inv_temp" {
            continue;
        }
        let noise = Tensor::<f64>::randn(t.dims(), std, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    Ok(p)
}

/// Random text and video batches with some padding.
pub fn random_batches(cfg: &ModelConfig, b: usize, rng: &mut impl Rng) -> Result<(PaddedBatch, PaddedBatch)> {
    let mut texts = Vec::new();
    let mut videos = Vec::new();
    for _ in 0..b {
        let lt = rng.random_range(3..=cfg.max_text_len);
        let mut ids = vec![0];
        ids.extend((1..lt).map(|_| rng.random_range(1..cfg.text_vocab as u32)));
        let mut mask = vec![true; lt];
        if lt > 3 && rng.random_bool(0.5) {
            mask[lt - 1] = false;
        }
        texts.push(TokenSequence::new(ids, mask, Modality::Text)?);

        let lv = rng.random_range(2..=cfg.max_video_len);
        let ids = (0..lv).map(|_| rng.random_range(0..cfg.video_vocab as u32)).collect();
        let mut mask = vec![true; lv];
        if lv > 2 && rng.random_bool(0.5) {
            mask[lv - 1] = false;
        }
        videos.push(TokenSequence::new(ids, mask, Modality::Video)?);
    }
    let tr: Vec<&TokenSequence> = texts.iter().collect();
    let vr: Vec<&TokenSequence> = videos.iter().collect();
    Ok((PaddedBatch::new(&tr, cfg, Modality::Text)?, PaddedBatch::new(&vr, cfg, Modality::Video)?))
}

/// Compares analytic gradients of the total objective with finite
/// differences for every parameter coordinate.
pub fn objective_gradcheck(setup: &CheckSetup, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = &setup.model;
    let params = random_params(cfg, setup.param_std, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (text, video) = random_batches(cfg, setup.batch, &mut rng)?;
    let noise = NoiseStream::new(seed);
    let tn = noise.batch_tensor(0, 0, setup.batch, setup.samples, cfg.dim);
    let vn = noise.batch_tensor(1, 0, setup.batch, setup.samples, cfg.dim);

    let mut g = Graph::<f64>::new();
    let pv = params.declare(&mut g, true)?;
    let obj = build_objective(&mut g, &pv, cfg, &text, &video, tn, vn, setup.weights)?;
    Ok(check_graph_with(&mut g, obj.total, &params.tensors, eps, setup.stencil)?)
}

type Op = fn(&mut Graph<f64>, Var) -> std::result::Result<Var, GraphError>;

struct Case {
    name: &'static str,
    dims: &'static [usize],
    positive: bool,
    op: Op,
}

fn graph_err(e: Error) -> GraphError {
    match e {
        Error::Graph(g) => g,
        other => GraphError::InvalidTensor(other.to_string()),
    }
}

fn tower(g: &mut Graph<f64>, x: Var, lo: usize, hi: usize) -> std::result::Result<TowerVars, GraphError> {
    let part = g.slice(x, 0, lo, hi)?;
    let tokens = g.l2_normalize(part, NORM_EPS);
    let rows = g.dims(x)[1];
    let batch = hi - lo;
    let match_mask = (0..batch * rows).map(|i| i % rows != rows - 1 || i % 2 == 0).collect();
    Ok(TowerVars { tokens, pooled: tokens, match_mask, batch, rows })
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "exp", dims: &[3, 4], positive: false, op: |g, x| Ok(g.exp(x)) },
        Case { name: "log", dims: &[3, 4], positive: true, op: |g, x| Ok(g.log(x)) },
        Case { name: "gelu", dims: &[3, 4], positive: false, op: |g, x| Ok(g.gelu(x)) },
        Case { name: "mul", dims: &[3, 4], positive: false, op: |g, x| g.mul(x, x) },
        Case {
            name: "add",
            dims: &[3, 4],
            positive: false,
            op: |g, x| {
                let e = g.exp(x);
                g.add(e, x)
            },
        },
        Case { name: "sum", dims: &[3, 4], positive: false, op: |g, x| Ok(g.sum_last(x)) },
        Case { name: "mean", dims: &[3, 4], positive: false, op: |g, x| Ok(g.mean_last(x)) },
        Case { name: "max", dims: &[3, 4], positive: false, op: |g, x| Ok(g.max_last(x)) },
        Case { name: "softmax", dims: &[3, 4], positive: false, op: |g, x| Ok(g.softmax(x)) },
        Case { name: "l2_normalize", dims: &[3, 4], positive: false, op: |g, x| Ok(g.l2_normalize(x, NORM_EPS)) },
        Case {
            name: "matmul",
            dims: &[3, 3],
            positive: false,
            op: |g, x| {
                let xt = g.transpose(x)?;
                g.matmul(x, xt)
            },
        },
        Case {
            name: "concat",
            dims: &[2, 3, 4],
            positive: false,
            op: |g, x| {
                let e = g.exp(x);
                g.concat(&[x, e], 1)
            },
        },
        Case { name: "slice", dims: &[2, 5, 3], positive: false, op: |g, x| g.slice(x, 1, 1, 4) },
        Case {
            name: "layer_norm",
            dims: &[3, 4],
            positive: false,
            op: |g, x| {
                let gain = g.slice(x, 0, 0, 1)?;
                let bias = g.slice(x, 0, 2, 3)?;
                g.layer_norm(x, gain, bias, 1e-5)
            },
        },
        Case {
            name: "attention",
            dims: &[2, 3, 4],
            positive: false,
            op: |g, x| {
                let xt = g.transpose(x)?;
                let s = g.matmul(x, xt)?;
                let s = g.scale(s, 0.5);
                let p = g.softmax(s);
                g.matmul(p, x)
            },
        },
        Case {
            name: "token_wise_similarity",
            dims: &[4, 3, 4],
            positive: false,
            op: |g, x| {
                let t = tower(g, x, 0, 2)?;
                let v = tower(g, x, 2, 4)?;
                dsa_similarity_graph(g, &t, &v, 4).map_err(graph_err)
            },
        },
        Case {
            name: "info_nce",
            dims: &[3, 3],
            positive: false,
            op: |g, x| {
                let a = info_nce_graph(g, x).map_err(graph_err)?;
                let xt = g.transpose(x)?;
                let b = info_nce_graph(g, xt).map_err(graph_err)?;
                g.add(a, b)
            },
        },
        Case {
            name: "multi_instance_nce",
            dims: &[12, 3],
            positive: false,
            op: |g, x| {
                let t = g.slice(x, 0, 0, 6)?;
                let v = g.slice(x, 0, 6, 12)?;
                let vt = g.transpose(v)?;
                let l = g.matmul(t, vt)?;
                let a = mil_nce_graph(g, l, 3, 2).map_err(graph_err)?;
                let lt = g.transpose(l)?;
                let b = mil_nce_graph(g, lt, 3, 2).map_err(graph_err)?;
                g.add(a, b)
            },
        },
        Case {
            name: "kl",
            dims: &[2, 3, 4],
            positive: false,
            op: |g, x| {
                let mu = g.slice(x, 0, 0, 1)?;
                let mu = g.reshape(mu, &[3, 4])?;
                let lv = g.slice(x, 0, 1, 2)?;
                let lv = g.reshape(lv, &[3, 4])?;
                kl_graph(g, mu, lv).map_err(graph_err)
            },
        },
        Case {
            name: "sampling",
            dims: &[2, 3, 4],
            positive: false,
            op: |g, x| {
                let mu = g.slice(x, 0, 0, 1)?;
                let mu = g.reshape(mu, &[3, 4])?;
                let lv = g.slice(x, 0, 1, 2)?;
                let lv = g.reshape(lv, &[3, 4])?;
                let noise = NoiseStream::new(3).batch_tensor(0, 0, 3, 2, 4);
                sample_graph(g, mu, lv, noise).map_err(graph_err)
            },
        },
    ]
}

/// Per-case outcome of [`primitive_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Checks `sum(op(x) ⊙ w)` for every primitive and composed loss at
/// `trials` random points with random readout weights `w`.
pub fn primitive_suite(trials: usize, eps: f64, seed: u64, stencil: Stencil) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut report = GradCheckReport::default();
        for _ in 0..trials {
            let mut p = Tensor::<f64>::randn(case.dims, 1.0, &mut rng);
            if case.positive {
                p.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            }
            let wseed: u64 = rng.random();
            let op = case.op;
            let r = finite_difference_check_with(
                move |g, x| {
                    let y = op(g, x)?;
                    let yd = g.dims(y).to_vec();
                    let w = Tensor::randn(&yd, 1.0, &mut ChaCha8Rng::seed_from_u64(wseed));
                    let w = g.constant(w);
                    let p = g.mul(y, w)?;
                    Ok(g.sum_all(p))
                },
                &p,
                eps,
                stencil,
            )?;
            report.merge(r);
        }
        out.push(SuiteEntry { name: case.name, report });
    }
    Ok(out)
}
