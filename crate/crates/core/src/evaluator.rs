//! Retrieval evaluation: rank rule, R@K / MdR / MnR, and the test-split
//! scorer that reports uncertainty levels alongside the metrics.

use std::fmt;

use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::encoders::{encode_tower, EmbeddingMatrix, PaddedBatch, TokenSequence};
use crate::error::{Error, Result};
use crate::matching::{batch_similarity, dsa_similarity, SimilarityMatrix};
use crate::model::{Modality, ModelConfig, ModelParams};
use crate::objectives::{Direction, LossBreakdown};
use crate::synthcorpus::{Corpus, Split};
use crate::tensor::Scalar;
use crate::uncertainty::{
    mu_head_graph, samples_from_noise, sigma_head_graph, uncertainty_level, GaussianEmbedding, NoiseStream,
};

/// Items encoded per graph during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// `1 + #{j : s_j > s_gt} + #{j < gt : s_j == s_gt}`.
pub fn rank_of_ground_truth(scores: &[f64], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < gt)).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub direction: Direction,
}

pub fn compute_metrics(ranks: &[usize], direction: Direction) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank vector"));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median_rank =
        if sorted.len() % 2 == 1 { sorted[mid] as f64 } else { (sorted[mid - 1] + sorted[mid]) as f64 / 2.0 };
    Ok(RetrievalMetrics {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        median_rank,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        direction,
    })
}

/// Ranks over a caption × video matrix. For t2v each caption is a query
/// whose target is `caption_video[c]`; for v2t each video is a query and
/// its rank is that of its best-ranked caption.
pub fn ranks(sim: &SimilarityMatrix, caption_video: &[usize], direction: Direction) -> Result<Vec<usize>> {
    if caption_video.len() != sim.rows() {
        return Err(Error::DimMismatch { expected: sim.rows(), actual: caption_video.len() });
    }
    if let Some(&v) = caption_video.iter().find(|&&v| v >= sim.cols()) {
        return Err(Error::DimMismatch { expected: sim.cols(), actual: v + 1 });
    }
    match direction {
        Direction::T2V => {
            Ok(caption_video.iter().enumerate().map(|(c, &v)| rank_of_ground_truth(sim.row(c), v)).collect())
        }
        Direction::V2T => (0..sim.cols())
            .map(|v| {
                let col = sim.column(v);
                caption_video
                    .iter()
                    .enumerate()
                    .filter(|&(_, &cv)| cv == v)
                    .map(|(c, _)| rank_of_ground_truth(&col, c))
                    .min()
                    .ok_or(Error::Empty("video without captions"))
            })
            .collect(),
    }
}

/// Encoded split items: matching matrices and Gaussian parameters.
#[derive(Clone, Debug)]
pub struct EncodedItems {
    pub matrices: Vec<EmbeddingMatrix>,
    pub gaussians: Vec<GaussianEmbedding>,
}

/// Runs the tower and both heads over `seqs` in chunks of `EVAL_CHUNK`.
pub fn encode_with_heads<T: Scalar>(
    seqs: &[&TokenSequence],
    kind: Modality,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<EncodedItems> {
    let parts: Vec<EncodedItems> = seqs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = PaddedBatch::new(chunk, cfg, kind)?;
            let mut g = Graph::new();
            let pv = params.declare(&mut g, false)?;
            let tower = encode_tower(&mut g, &pv, cfg, kind, &batch)?;
            let mu = mu_head_graph(&mut g, &pv, kind, tower.pooled)?;
            let lv = sigma_head_graph(&mut g, &pv, kind, tower.pooled)?;
            g.forward(&params.tensors)?;
            let tokens = g.value(tower.tokens)?;
            let per = tower.rows * cfg.dim;
            let mut matrices = Vec::with_capacity(chunk.len());
            for (i, rows) in tokens.data().chunks_exact(per).enumerate() {
                let mask = tower.match_mask[i * tower.rows..(i + 1) * tower.rows].to_vec();
                matrices.push(EmbeddingMatrix::new(rows.iter().map(|v| v.as_f64()).collect(), cfg.dim, mask)?);
            }
            let to_rows = |t: &crate::tensor::Tensor<T>| -> Vec<Vec<f64>> {
                t.rows().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
            };
            let gaussians = to_rows(g.value(mu)?)
                .into_iter()
                .zip(to_rows(g.value(lv)?))
                .map(|(m, l)| GaussianEmbedding::new(m, l))
                .collect::<Result<_>>()?;
            Ok(EncodedItems { matrices, gaussians })
        })
        .collect::<Result<_>>()?;
    let mut out = EncodedItems { matrices: Vec::with_capacity(seqs.len()), gaussians: Vec::with_capacity(seqs.len()) };
    for p in parts {
        out.matrices.extend(p.matrices);
        out.gaussians.extend(p.gaussians);
    }
    Ok(out)
}

/// How test pairs are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Token-wise score over enlarged token sets.
    Deterministic,
    /// Diagnostic: token-wise score plus the mean dot product over `k`
    /// sample pairs drawn from both Gaussians.
    Fused { k: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: RetrievalMetrics,
    pub text_uncertainty: f64,
    pub video_uncertainty: f64,
    /// `(query, ground truth, rank)`, with corpus indices.
    pub ranks: Vec<(usize, usize, usize)>,
    pub similarity: SimilarityMatrix,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    corpus: &Corpus,
    direction: Direction,
    mode: ScoreMode,
) -> Result<EvalReport> {
    let videos = corpus.video_indices(Split::Test);
    let captions = corpus.caption_indices(Split::Test);
    if videos.is_empty() || captions.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let column_of = |v: usize| videos.binary_search(&v).expect("test caption of a test video");
    let caption_video: Vec<usize> = captions.iter().map(|&c| column_of(corpus.captions[c].video)).collect();

    let text_seqs: Vec<&TokenSequence> = captions.iter().map(|&c| &corpus.captions[c].text).collect();
    let video_seqs: Vec<&TokenSequence> = videos.iter().map(|&v| &corpus.videos[v]).collect();
    let text = encode_with_heads(&text_seqs, Modality::Text, params, cfg)?;
    let video = encode_with_heads(&video_seqs, Modality::Video, params, cfg)?;

    let similarity = match mode {
        ScoreMode::Deterministic => batch_similarity(&text.matrices, &video.matrices, dsa_similarity)?,
        ScoreMode::Fused { k, seed } => {
            let noise = NoiseStream::new(seed);
            let draw = |items: &[GaussianEmbedding], tag: u64| -> Result<Vec<Vec<Vec<f64>>>> {
                items
                    .iter()
                    .enumerate()
                    .map(|(i, gs)| {
                        let eps = (0..k).map(|s| noise.draw(tag, 0, i as u64, s as u64, gs.dim())).collect();
                        Ok(samples_from_noise(gs, eps)?.samples)
                    })
                    .collect()
            };
            let ts = draw(&text.gaussians, 0)?;
            let vs = draw(&video.gaussians, 1)?;
            let tt: Vec<_> = text.matrices.iter().zip(&ts).collect();
            let vv: Vec<_> = video.matrices.iter().zip(&vs).collect();
            batch_similarity(&tt, &vv, |(ta, tz), (va, vz)| {
                let det = dsa_similarity(ta, va)?;
                let prob = mean(
                    tz.iter().flat_map(|a| vz.iter().map(move |b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())),
                );
                Ok(det + prob)
            })?
        }
    };

    let r = ranks(&similarity, &caption_video, direction)?;
    let metrics = compute_metrics(&r, direction)?;
    let ranks = match direction {
        Direction::T2V => {
            r.iter().enumerate().map(|(q, &rank)| (captions[q], videos[caption_video[q]], rank)).collect()
        }
        Direction::V2T => r.iter().enumerate().map(|(q, &rank)| (videos[q], videos[q], rank)).collect(),
    };
    Ok(EvalReport {
        metrics,
        text_uncertainty: mean(text.gaussians.iter().map(uncertainty_level)),
        video_uncertainty: mean(video.gaussians.iter().map(uncertainty_level)),
        ranks,
        similarity,
    })
}

/// One tab-separated metrics line: epoch, L_DSA, L_DUA, L_KL, total,
/// textUnc, videoUnc, R@1, R@5, R@10, MdR, MnR. Evaluation-only lines print
/// `-` for the epoch and `nan` for the losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsLine {
    pub epoch: Option<usize>,
    pub losses: Option<LossBreakdown>,
    pub text_uncertainty: f64,
    pub video_uncertainty: f64,
    pub metrics: RetrievalMetrics,
}

pub const METRICS_HEADER: &str = "epoch\tL_DSA\tL_DUA\tL_KL\ttotal\ttextUnc\tvideoUnc\tR@1\tR@5\tR@10\tMdR\tMnR";

impl fmt::Display for MetricsLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.epoch {
            Some(e) => write!(f, "{e}")?,
            None => f.write_str("-")?,
        }
        let l = self.losses.unwrap_or(LossBreakdown { dsa: f64::NAN, dua: f64::NAN, kl: f64::NAN, total: f64::NAN });
        let m = &self.metrics;
        for x in [
            l.dsa,
            l.dua,
            l.kl,
            l.total,
            self.text_uncertainty,
            self.video_uncertainty,
            m.r1,
            m.r5,
            m.r10,
            m.median_rank,
            m.mean_rank,
        ] {
            write!(f, "\t{x:?}")?;
        }
        Ok(())
    }
}

impl MetricsLine {
    pub fn parse(line: &str, direction: Direction) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if cols.len() != 12 {
            return Err(Error::Config(format!("metrics line has {} columns, expected 12", cols.len())));
        }
        let epoch = match cols[0] {
            "-" => None,
            s => Some(s.parse().map_err(|_| Error::Config(format!("bad epoch `{s}`")))?),
        };
        let x = cols[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let losses = (!x[..4].iter().all(|v| v.is_nan())).then_some(LossBreakdown {
            dsa: x[0],
            dua: x[1],
            kl: x[2],
            total: x[3],
        });
        Ok(MetricsLine {
            epoch,
            losses,
            text_uncertainty: x[4],
            video_uncertainty: x[5],
            metrics: RetrievalMetrics { r1: x[6], r5: x[7], r10: x[8], median_rank: x[9], mean_rank: x[10], direction },
        })
    }
}
