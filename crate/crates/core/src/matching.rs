//! Similarity functions: global inner product, token-wise max-mean matching
//! over plain or enlarged token sets, batch matrices and per-token
//! attribution.

use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::encoders::{EmbeddingMatrix, TowerVars};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Allowed deviation of an unmasked row norm from 1 in the token-wise scorer.
pub const NORM_TOLERANCE: f64 = 1e-4;

const MASK_BIAS: f64 = -1e9;

/// Row-major score matrix; rows are texts, columns videos.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    pub row_entities: Vec<usize>,
    pub col_entities: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimMismatch { expected: rows * cols, actual: values.len() });
        }
        Ok(SimilarityMatrix {
            values,
            rows,
            cols,
            row_entities: (0..rows).collect(),
            col_entities: (0..cols).collect(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimMismatch { expected: cols, actual: r.len() });
        }
        SimilarityMatrix::new(rows.concat(), rows.len(), cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.cols {
            values.extend((0..self.rows).map(|i| self.get(i, j)));
        }
        SimilarityMatrix {
            values,
            rows: self.cols,
            cols: self.rows,
            row_entities: self.col_entities.clone(),
            col_entities: self.row_entities.clone(),
        }
    }

    pub fn scaled(&self, c: f64) -> SimilarityMatrix {
        SimilarityMatrix { values: self.values.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over unmasked frame rows.
pub fn mean_pool_video(frames: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let n = frames.valid_count();
    if n == 0 {
        return Err(Error::Empty("all frames masked"));
    }
    let mut acc = vec![0.0; frames.dim()];
    for (_, r) in frames.valid_rows() {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// The leading [CLS] row.
pub fn cls_text(words: &EmbeddingMatrix) -> Vec<f64> {
    words.row(0).to_vec()
}

pub fn global_similarity(t: &[f64], v: &[f64]) -> Result<f64> {
    if t.len() != v.len() {
        return Err(Error::DimMismatch { expected: t.len(), actual: v.len() });
    }
    Ok(dot(t, v))
}

fn check_normalized(x: &EmbeddingMatrix) -> Result<()> {
    if x.valid_count() == 0 {
        return Err(Error::Empty("no unmasked token"));
    }
    for (row, r) in x.valid_rows() {
        let norm = dot(r, r).sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Unmasked dot products, `words × frames`, with the original row indices.
fn dot_table(words: &EmbeddingMatrix, frames: &EmbeddingMatrix) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let wi: Vec<usize> = words.valid_rows().map(|(i, _)| i).collect();
    let fi: Vec<usize> = frames.valid_rows().map(|(i, _)| i).collect();
    let mut table = Vec::with_capacity(wi.len() * fi.len());
    for &w in &wi {
        for &f in &fi {
            table.push(dot(words.row(w), frames.row(f)));
        }
    }
    (wi, fi, table)
}

/// `½·[mean_n max_m ⟨w_n,f_m⟩ + mean_m max_n ⟨w_n,f_m⟩]` over unmasked rows.
///
/// Rows must be unit-normalized. Drop [CLS] from `words` through its mask.
pub fn token_wise_similarity(words: &EmbeddingMatrix, frames: &EmbeddingMatrix) -> Result<f64> {
    if words.dim() != frames.dim() {
        return Err(Error::DimMismatch { expected: words.dim(), actual: frames.dim() });
    }
    check_normalized(words)?;
    check_normalized(frames)?;
    let (wi, fi, table) = dot_table(words, frames);
    let (n, m) = (wi.len(), fi.len());

    let mut word_term = 0.0;
    for row in table.chunks_exact(m) {
        word_term += row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mut frame_term = 0.0;
    for j in 0..m {
        frame_term += (0..n).map(|i| table[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(0.5 * (word_term / n as f64 + frame_term / m as f64))
}

/// Token-wise similarity over sets enlarged with extra tokens. Extra rows are
/// ordinary set members, so this is the same computation.
pub fn dsa_similarity(words: &EmbeddingMatrix, frames: &EmbeddingMatrix) -> Result<f64> {
    token_wise_similarity(words, frames)
}

/// `values[i][j] = scorer(texts[i], videos[j])`, rows computed in parallel.
pub fn batch_similarity<A, B, F>(texts: &[A], videos: &[B], scorer: F) -> Result<SimilarityMatrix>
where
    A: Sync,
    B: Sync,
    F: Fn(&A, &B) -> Result<f64> + Sync,
{
    let rows: Vec<Vec<f64>> = texts
        .par_iter()
        .map(|t| videos.iter().map(|v| scorer(t, v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut m = SimilarityMatrix::new(rows.concat(), texts.len(), videos.len())?;
    m.row_entities = (0..texts.len()).collect();
    m.col_entities = (0..videos.len()).collect();
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPair {
    pub word: usize,
    pub frame: usize,
    pub score: f64,
}

/// Which rows drive the token-wise score.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    /// One weight per frame row (masked rows get 0); sums to 1.
    pub frame_weights: Vec<f64>,
    /// One weight per word row; sums to 1.
    pub word_weights: Vec<f64>,
    /// Best frame for every unmasked word, then best word for every
    /// unmasked frame.
    pub matched_pairs: Vec<MatchedPair>,
}

fn shifted_weights(len: usize, entries: &[(usize, f64)]) -> Vec<f64> {
    let mut w = vec![0.0; len];
    for &(i, s) in entries {
        w[i] = (s + 1.0).max(0.0);
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        let n = entries.len() as f64;
        for &(i, _) in entries {
            w[i] = 1.0 / n;
        }
    }
    w
}

/// Per-row weights proportional to `max ⟨w,f⟩ + 1`, the best score shifted
/// onto `[0, 2]`.
pub fn match_attribution(words: &EmbeddingMatrix, frames: &EmbeddingMatrix) -> Result<Attribution> {
    token_wise_similarity(words, frames)?;
    let (wi, fi, table) = dot_table(words, frames);
    let m = fi.len();
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
    };

    let mut pairs = Vec::new();
    let mut word_best = Vec::new();
    for (a, &w) in wi.iter().enumerate() {
        let (b, s) = argmax(&mut (0..m).map(|b| (b, table[a * m + b])));
        pairs.push(MatchedPair { word: w, frame: fi[b], score: s });
        word_best.push((w, s));
    }
    let mut frame_best = Vec::new();
    for (b, &f) in fi.iter().enumerate() {
        let (a, s) = argmax(&mut (0..wi.len()).map(|a| (a, table[a * m + b])));
        pairs.push(MatchedPair { word: wi[a], frame: f, score: s });
        frame_best.push((f, s));
    }
    Ok(Attribution {
        frame_weights: shifted_weights(frames.len(), &frame_best),
        word_weights: shifted_weights(words.len(), &word_best),
        matched_pairs: pairs,
    })
}

// ------------------------------------------------------------------- graph

fn bias_tensor<T: Scalar>(mask: &[bool], b: usize, r: usize) -> Tensor<T> {
    let data = mask.iter().map(|&m| if m { T::zero() } else { T::c(MASK_BIAS) }).collect();
    Tensor::new(vec![b, r], data).expect("bias dims")
}

/// `(B_a, B_a·R_a)` averaging matrix over each item's unmasked rows.
fn averaging_tensor<T: Scalar>(mask: &[bool], b: usize, r: usize) -> Result<Tensor<T>> {
    let mut a = Tensor::<T>::zeros(&[b, b * r]);
    for (i, row) in mask.chunks_exact(r).enumerate() {
        let n = row.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Empty("no unmasked token"));
        }
        for (j, &m) in row.iter().enumerate() {
            if m {
                a.data_mut()[i * b * r + i * r + j] = T::c(1.0 / n as f64);
            }
        }
    }
    Ok(a)
}

/// `(B_a, B_b)` matrix of `mean over a-rows of max over b-rows`.
fn one_sided<T: Scalar>(g: &mut Graph<T>, a: &TowerVars, b: &TowerVars, dim: usize) -> Result<Var> {
    let af = g.reshape(a.tokens, &[a.batch * a.rows, dim])?;
    let bf = g.reshape(b.tokens, &[b.batch * b.rows, dim])?;
    let bt = g.transpose(bf)?;
    let s = g.matmul(af, bt)?;
    let s = g.reshape(s, &[a.batch * a.rows, b.batch, b.rows])?;
    let bias = g.constant(bias_tensor(&b.match_mask, b.batch, b.rows));
    let s = g.add(s, bias)?;
    let best = g.max_last(s);
    let best = g.reshape(best, &[a.batch * a.rows, b.batch])?;
    let avg = g.constant(averaging_tensor(&a.match_mask, a.batch, a.rows)?);
    Ok(g.matmul(avg, best)?)
}

/// Differentiable `(B_t, B_v)` token-wise similarity over enlarged sets.
pub fn dsa_similarity_graph<T: Scalar>(
    g: &mut Graph<T>,
    text: &TowerVars,
    video: &TowerVars,
    dim: usize,
) -> Result<Var> {
    let t1 = one_sided(g, text, video, dim)?;
    let t2 = one_sided(g, video, text, dim)?;
    let t2 = g.transpose(t2)?;
    let s = g.add(t1, t2)?;
    Ok(g.scale(s, 0.5))
}
