//! Training losses: symmetric InfoNCE over token-wise similarities, the
//! multi-instance InfoNCE over sampled embeddings, KL to the unit Gaussian
//! and their weighted total.
//!
//! Every loss exists twice: a plain `f64` version over a [`BatchBundle`],
//! and a graph builder used for training and gradient checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::{encode_tower, EmbeddingMatrix, PaddedBatch};
use crate::error::{Error, Result};
use crate::matching::{batch_similarity, dsa_similarity, dsa_similarity_graph, SimilarityMatrix};
use crate::model::{Modality, ModelConfig, ParamVars};
use crate::tensor::{Scalar, Tensor};
use crate::uncertainty::{
    kl_to_unit_gaussian, mu_head_graph, sample_graph, sigma_head_graph, GaussianEmbedding, SampleSet,
};

/// Upper bound of the logit scale, as a log.
pub fn max_log_inv_temp() -> f64 {
    100f64.ln()
}

/// `exp(min(logInvTemp, ln 100))`.
pub fn logit_scale(log_inv_temp: f64) -> f64 {
    log_inv_temp.min(max_log_inv_temp()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1e-2, beta: 1e-4 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative (alpha {alpha}, beta {beta})")));
        }
        Ok(LossWeights { alpha, beta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    T2V,
    V2T,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2V => "t2v",
            Direction::V2T => "v2t",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Direction::T2V),
            "v2t" => Ok(Direction::V2T),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dsa: f64,
    pub dua: f64,
    pub kl: f64,
    pub total: f64,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over rows (t2v) or columns (v2t) of `−log softmax` at the diagonal.
pub fn info_nce(sim: &SimilarityMatrix, scale: f64, direction: Direction) -> Result<f64> {
    if !sim.is_square() {
        return Err(Error::DimMismatch { expected: sim.rows(), actual: sim.cols() });
    }
    let m = match direction {
        Direction::T2V => sim.clone(),
        Direction::V2T => sim.transpose(),
    };
    let b = m.rows();
    let mut acc = 0.0;
    for i in 0..b {
        let row = m.row(i);
        acc += log_sum_exp(row.iter().map(|v| scale * v)) - scale * row[i];
    }
    Ok(acc / b as f64)
}

pub fn symmetric_info_nce(sim: &SimilarityMatrix, scale: f64) -> Result<f64> {
    Ok(info_nce(sim, scale, Direction::T2V)? + info_nce(sim, scale, Direction::V2T)?)
}

/// One batch of encoded pairs; item `i` of each side forms the positive pair.
#[derive(Clone, Debug)]
pub struct BatchBundle {
    /// Enlarged, row-normalized token matrices with the matching mask.
    pub texts: Vec<EmbeddingMatrix>,
    pub videos: Vec<EmbeddingMatrix>,
    pub text_dists: Vec<GaussianEmbedding>,
    pub video_dists: Vec<GaussianEmbedding>,
    pub text_samples: Vec<SampleSet>,
    pub video_samples: Vec<SampleSet>,
}

impl BatchBundle {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn similarity(&self) -> Result<SimilarityMatrix> {
        batch_similarity(&self.texts, &self.videos, dsa_similarity)
    }
}

pub fn dsa_loss(bundle: &BatchBundle, scale: f64) -> Result<f64> {
    symmetric_info_nce(&bundle.similarity()?, scale)
}

fn sample_k(sets: &[SampleSet]) -> Result<usize> {
    let k = sets.first().map_or(0, SampleSet::k);
    if k == 0 {
        return Err(Error::Empty("sample set"));
    }
    match sets.iter().find(|s| s.k() != k) {
        Some(s) => Err(Error::DimMismatch { expected: k, actual: s.k() }),
        None => Ok(k),
    }
}

fn mil_direction(anchors: &[SampleSet], candidates: &[SampleSet], scale: f64) -> f64 {
    let b = anchors.len();
    let mut total = 0.0;
    for (i, a) in anchors.iter().enumerate() {
        let mut item = 0.0;
        for t in &a.samples {
            let logits: Vec<Vec<f64>> =
                candidates.iter().map(|c| c.samples.iter().map(|v| scale * dot(t, v)).collect()).collect();
            let all = log_sum_exp(logits.iter().flatten().copied());
            let pos = log_sum_exp(logits[i].iter().copied());
            item += all - pos;
        }
        total += item / a.k() as f64;
    }
    total / b as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(text-anchored, video-anchored)` multi-instance InfoNCE terms.
pub fn dua_loss_directions(bundle: &BatchBundle, scale: f64) -> Result<(f64, f64)> {
    let kt = sample_k(&bundle.text_samples)?;
    let kv = sample_k(&bundle.video_samples)?;
    if kt != kv {
        return Err(Error::DimMismatch { expected: kt, actual: kv });
    }
    Ok((
        mil_direction(&bundle.text_samples, &bundle.video_samples, scale),
        mil_direction(&bundle.video_samples, &bundle.text_samples, scale),
    ))
}

pub fn dua_loss(bundle: &BatchBundle, scale: f64) -> Result<f64> {
    let (a, b) = dua_loss_directions(bundle, scale)?;
    Ok(a + b)
}

pub fn kl_loss(bundle: &BatchBundle) -> f64 {
    let sum: f64 = bundle
        .text_dists
        .iter()
        .zip(&bundle.video_dists)
        .map(|(t, v)| kl_to_unit_gaussian(t) + kl_to_unit_gaussian(v))
        .sum();
    sum / bundle.text_dists.len() as f64
}

/// `dsa + α·dua + β·kl`; a term with zero weight is left out of the sum.
pub fn total_loss(bundle: &BatchBundle, weights: LossWeights, scale: f64) -> Result<LossBreakdown> {
    let dsa = dsa_loss(bundle, scale)?;
    let dua = dua_loss(bundle, scale)?;
    let kl = kl_loss(bundle);
    Ok(LossBreakdown { dsa, dua, kl, total: combine(dsa, dua, kl, weights) })
}

fn combine(dsa: f64, dua: f64, kl: f64, w: LossWeights) -> f64 {
    let mut total = dsa;
    if w.alpha != 0.0 {
        total += w.alpha * dua;
    }
    if w.beta != 0.0 {
        total += w.beta * kl;
    }
    total
}

// ------------------------------------------------------------------- graph

/// Row-wise `log Σ exp`, `(..., N) → (..., 1)`.
pub fn log_sum_exp_graph<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let m = g.max_last(x);
    let shifted = g.sub(x, m)?;
    let e = g.exp(shifted);
    let s = g.sum_last(e);
    let l = g.log(s);
    Ok(g.add(l, m)?)
}

/// Mean over rows of `LSE(row) − ⟨row, target⟩` for an `(N, B)` logit matrix
/// and a one-hot target pattern.
fn cross_entropy_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Tensor<T>) -> Result<Var> {
    let lse = log_sum_exp_graph(g, logits)?;
    let t = g.constant(target);
    let picked = g.mul(logits, t)?;
    let picked = g.sum_last(picked);
    let terms = g.sub(lse, picked)?;
    Ok(g.mean_all(terms))
}

fn block_targets<T: Scalar>(b: usize, k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[b * k, b]);
    for r in 0..b * k {
        t.data_mut()[r * b + r / k] = T::one();
    }
    t
}

/// InfoNCE of a square `(B, B)` logit matrix along rows (pass the transpose
/// for columns).
pub fn info_nce_graph<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let b = g.dims(logits)[0];
    cross_entropy_graph(g, logits, block_targets(b, 1))
}

/// Multi-instance InfoNCE over `(B·K, B·K)` sample logits, rows anchored:
/// each row's positives are the K columns of its own item.
pub fn mil_nce_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, b: usize, k: usize) -> Result<Var> {
    let blocks = g.reshape(logits, &[b * k, b, k])?;
    let lse = log_sum_exp_graph(g, blocks)?;
    let lse = g.reshape(lse, &[b * k, b])?;
    cross_entropy_graph(g, lse, block_targets(b, k))
}

/// `mean_B 0.5·Σ_d (μ² + e^lv − lv − 1)`.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let sq = g.mul(mu, mu)?;
    let e = g.exp(log_var);
    let t = g.add(sq, e)?;
    let t = g.sub(t, log_var)?;
    let one = g.scalar_constant(1.0);
    let t = g.sub(t, one)?;
    let per_item = g.sum_last(t);
    let mean = g.mean_all(per_item);
    Ok(g.scale(mean, 0.5))
}

/// `exp(clamp(logInvTemp, −∞, ln 100))` as a `[1]` node.
pub fn logit_scale_graph<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars) -> Result<Var> {
    let lit = pv.get("logit.log_inv_temp")?;
    let c = g.clamp(lit, f64::NEG_INFINITY, max_log_inv_temp());
    Ok(g.exp(c))
}

/// Handles into a built objective graph.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub sim: Var,
    pub scale: Var,
    pub dsa: Var,
    pub dua: Var,
    pub kl: Var,
    pub total: Var,
    pub text_mu: Var,
    pub text_log_var: Var,
    pub video_mu: Var,
    pub video_log_var: Var,
    pub text_samples: Var,
    pub video_samples: Var,
}

/// Builds the full objective for one batch of pairs. `text_noise` and
/// `video_noise` are `(B, K, D)` standard-normal draws.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    text: &PaddedBatch,
    video: &PaddedBatch,
    text_noise: Tensor<T>,
    video_noise: Tensor<T>,
    weights: LossWeights,
) -> Result<ObjectiveVars> {
    let b = text.batch;
    if video.batch != b {
        return Err(Error::DimMismatch { expected: b, actual: video.batch });
    }
    let k = text_noise.dims()[1];
    if text_noise.dims() != [b, k, cfg.dim] || video_noise.dims() != [b, k, cfg.dim] {
        return Err(Error::DimMismatch { expected: b * k * cfg.dim, actual: video_noise.len() });
    }
    let tt = encode_tower(g, pv, cfg, Modality::Text, text)?;
    let tv = encode_tower(g, pv, cfg, Modality::Video, video)?;
    let scale = logit_scale_graph(g, pv)?;

    let sim = dsa_similarity_graph(g, &tt, &tv, cfg.dim)?;
    let logits = g.mul(sim, scale)?;
    let t2v = info_nce_graph(g, logits)?;
    let lt = g.transpose(logits)?;
    let v2t = info_nce_graph(g, lt)?;
    let dsa = g.add(t2v, v2t)?;

    let text_mu = mu_head_graph(g, pv, Modality::Text, tt.pooled)?;
    let text_log_var = sigma_head_graph(g, pv, Modality::Text, tt.pooled)?;
    let video_mu = mu_head_graph(g, pv, Modality::Video, tv.pooled)?;
    let video_log_var = sigma_head_graph(g, pv, Modality::Video, tv.pooled)?;
    let ts = sample_graph(g, text_mu, text_log_var, text_noise)?;
    let vs = sample_graph(g, video_mu, video_log_var, video_noise)?;
    let vst = g.transpose(vs)?;
    let ss = g.matmul(ts, vst)?;
    let sl = g.mul(ss, scale)?;
    let d1 = mil_nce_graph(g, sl, b, k)?;
    let slt = g.transpose(sl)?;
    let d2 = mil_nce_graph(g, slt, b, k)?;
    let dua = g.add(d1, d2)?;

    let kt = kl_graph(g, text_mu, text_log_var)?;
    let kv = kl_graph(g, video_mu, video_log_var)?;
    let kl = g.add(kt, kv)?;

    let mut total = dsa;
    if weights.alpha != 0.0 {
        let w = g.scale(dua, weights.alpha);
        total = g.add(total, w)?;
    }
    if weights.beta != 0.0 {
        let w = g.scale(kl, weights.beta);
        total = g.add(total, w)?;
    }
    Ok(ObjectiveVars {
        sim,
        scale,
        dsa,
        dua,
        kl,
        total,
        text_mu,
        text_log_var,
        video_mu,
        video_log_var,
        text_samples: ts,
        video_samples: vs,
    })
}

impl ObjectiveVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            dsa: g.scalar_value(self.dsa)?.as_f64(),
            dua: g.scalar_value(self.dua)?.as_f64(),
            kl: g.scalar_value(self.kl)?.as_f64(),
            total: g.scalar_value(self.total)?.as_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::SimilarityMatrix;
    use crate::uncertainty::samples_from_noise;
    use proptest::prelude::*;

    fn sm(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn info_nce_cases() {
        let id = sm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((info_nce(&id, 1.0, Direction::T2V).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);

        let flat = sm(&vec![vec![0.3; 5]; 5]);
        assert!((info_nce(&flat, 7.0, Direction::V2T).unwrap() - 5f64.ln()).abs() < 1e-12);

        let dom = sm(&[vec![0.9, 0.1, 0.2], vec![0.0, 0.8, 0.3], vec![0.1, 0.2, 0.7]]);
        let l: Vec<f64> = [1.0, 10.0, 100.0].iter().map(|&s| info_nce(&dom, s, Direction::T2V).unwrap()).collect();
        assert!(l[0] > l[1] && l[1] > l[2] && l[2] < 1e-10);

        let one = sm(&[vec![0.4]]);
        assert_eq!(info_nce(&one, 100.0, Direction::T2V).unwrap(), 0.0);
        let rect = SimilarityMatrix::new(vec![0.0; 6], 2, 3).unwrap();
        assert!(info_nce(&rect, 1.0, Direction::T2V).is_err());
    }

    #[test]
    fn symmetric_is_sum_of_directions() {
        let m = sm(&[vec![0.9, 0.1, 0.2], vec![0.4, 0.8, 0.3], vec![0.2, 0.7, 0.6]]);
        let s = symmetric_info_nce(&m, 3.0).unwrap();
        let parts = info_nce(&m, 3.0, Direction::T2V).unwrap() + info_nce(&m, 3.0, Direction::V2T).unwrap();
        assert_eq!(s, parts);
    }

    fn bundle_with_samples(text: Vec<Vec<Vec<f64>>>, video: Vec<Vec<Vec<f64>>>) -> BatchBundle {
        let d = text[0][0].len();
        let set = |s: Vec<Vec<f64>>| SampleSet { source_noise: s.clone(), samples: s };
        let dist = GaussianEmbedding::new(vec![0.0; d], vec![0.0; d]).unwrap();
        let b = text.len();
        let tok = EmbeddingMatrix::dense(&[vec![1.0; 1]]).unwrap();
        BatchBundle {
            texts: vec![tok.clone(); b],
            videos: vec![tok; b],
            text_dists: vec![dist.clone(); b],
            video_dists: vec![dist; b],
            text_samples: text.into_iter().map(set).collect(),
            video_samples: video.into_iter().map(set).collect(),
        }
    }

    #[test]
    fn dua_uniform_gives_log_b_per_direction() {
        let b = 8;
        let s = vec![vec![vec![0.5, 0.5]; 3]; b];
        let bundle = bundle_with_samples(s.clone(), s);
        let (a, v) = dua_loss_directions(&bundle, 10.0).unwrap();
        assert!((a - 8f64.ln()).abs() < 1e-12);
        assert!((v - 8f64.ln()).abs() < 1e-12);
        assert!((a + v - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn dua_with_one_sample_is_info_nce() {
        let t = vec![vec![vec![0.3, 0.1]], vec![vec![-0.2, 0.9]], vec![vec![0.5, -0.4]]];
        let v = vec![vec![vec![0.1, 0.7]], vec![vec![0.6, 0.2]], vec![vec![-0.3, -0.3]]];
        let bundle = bundle_with_samples(t.clone(), v.clone());
        let rows: Vec<Vec<f64>> = t.iter().map(|a| v.iter().map(|c| dot(&a[0], &c[0])).collect()).collect();
        let sim = sm(&rows);
        let (a, b) = dua_loss_directions(&bundle, 4.0).unwrap();
        assert!((a - info_nce(&sim, 4.0, Direction::T2V).unwrap()).abs() <= 1e-12);
        assert!((b - info_nce(&sim, 4.0, Direction::V2T).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn dua_matches_enumeration() {
        let t = vec![vec![vec![1.0, 0.0], vec![0.5, 0.5]], vec![vec![0.0, 1.0], vec![-0.5, 0.2]]];
        let v = vec![vec![vec![0.9, 0.1], vec![0.3, -0.2]], vec![vec![0.1, 0.8], vec![0.0, 0.4]]];
        let bundle = bundle_with_samples(t.clone(), v.clone());
        let scale = 2.0;
        // Exhaustive: every anchor against the 4 candidates.
        let mut want = 0.0;
        for (anchors, cands) in [(&t, &v), (&v, &t)] {
            let mut dir = 0.0;
            for (i, group) in anchors.iter().enumerate() {
                for a in group {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (j, c) in cands.iter().enumerate() {
                        for x in c {
                            let e = (scale * (a[0] * x[0] + a[1] * x[1])).exp();
                            den += e;
                            if j == i {
                                num += e;
                            }
                        }
                    }
                    dir += -(num / den).ln() / 2.0;
                }
            }
            want += dir / 2.0;
        }
        let got = dua_loss(&bundle, scale).unwrap();
        assert!((got - want).abs() / want < 1e-12);

        let mut bad = bundle.clone();
        bad.video_samples[1].samples.pop();
        assert!(dua_loss(&bad, scale).is_err());
    }

    #[test]
    fn kl_loss_cases() {
        let unit = |v: Vec<f64>| GaussianEmbedding::new(v, vec![0.0; 2]).unwrap();
        let mut bundle = bundle_with_samples(vec![vec![vec![0.0; 2]]; 2], vec![vec![vec![0.0; 2]]; 2]);
        bundle.text_dists = vec![unit(vec![1.0, 0.0]), unit(vec![0.6, 0.8])];
        bundle.video_dists = vec![unit(vec![0.0, 1.0]), unit(vec![-0.8, 0.6])];
        assert!((kl_loss(&bundle) - 1.0).abs() < 1e-12);

        let base = kl_loss(&bundle);
        for d in bundle.text_dists.iter_mut().chain(bundle.video_dists.iter_mut()) {
            d.log_var.iter_mut().for_each(|lv| *lv += 0.5);
        }
        assert!(kl_loss(&bundle) > base);
    }

    #[test]
    fn total_reductions() {
        let t = vec![vec![vec![0.3, 0.1]], vec![vec![-0.2, 0.9]]];
        let mut bundle = bundle_with_samples(t.clone(), t);
        bundle.texts = vec![
            EmbeddingMatrix::dense(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap(),
            EmbeddingMatrix::dense(&[vec![0.0, 1.0]]).unwrap(),
        ];
        bundle.videos = bundle.texts.clone();
        bundle.text_dists[0].log_var = vec![0.3, -0.2];
        let zero = total_loss(&bundle, LossWeights::new(0.0, 0.0).unwrap(), 5.0).unwrap();
        assert_eq!(zero.total, dsa_loss(&bundle, 5.0).unwrap());
        let w = LossWeights::default();
        let full = total_loss(&bundle, w, 5.0).unwrap();
        let diff = full.total - zero.total;
        let want = w.alpha * full.dua + w.beta * full.kl;
        assert!((diff - want).abs() <= 1e-12 * want.abs().max(1e-300) + 1e-15);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn samples_reconstruct_from_noise() {
        let g = GaussianEmbedding::new(vec![0.6, 0.8], vec![0.2, -0.4]).unwrap();
        let s = samples_from_noise(&g, vec![vec![0.1, -1.0], vec![2.0, 0.3]]).unwrap();
        assert_eq!(samples_from_noise(&g, s.source_noise.clone()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn scale_keeps_row_argmax(vals in prop::collection::vec(-1.0f64..1.0, 16)) {
            let argmax = |s: f64| {
                vals.iter()
                    .map(|v| v * s)
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
                    .0
            };
            prop_assert_eq!(argmax(0.5), argmax(1.0));
            prop_assert_eq!(argmax(1.0), argmax(100.0));
        }

        #[test]
        fn dua_directions_nonnegative(
            t in prop::collection::vec(-2.0f64..2.0, 12),
            v in prop::collection::vec(-2.0f64..2.0, 12),
        ) {
            let pack = |x: &[f64]| -> Vec<Vec<Vec<f64>>> {
                x.chunks(4).map(|c| c.chunks(2).map(<[f64]>::to_vec).collect()).collect()
            };
            let bundle = bundle_with_samples(pack(&t), pack(&v));
            let (a, b) = dua_loss_directions(&bundle, 3.0).unwrap();
            prop_assert!(a >= 0.0 && b >= 0.0);
        }
    }
}
