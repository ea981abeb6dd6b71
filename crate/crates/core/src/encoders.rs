//! Token-sequence encoders and the sequential transformer that mixes content
//! tokens with the extra learnable tokens.
//!
//! The graph builders work on padded batches shaped `(B, L, D)`. The plain
//! wrappers at the bottom run the same graphs for a single sequence and hand
//! back an [`EmbeddingMatrix`].

use crate::autodiff::{Graph, GraphError, Var};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig, ModelParams, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// Additive attention bias for padded keys.
const KEY_MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;

/// Token ids with a validity mask. Text sequences start with the [CLS] id 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
    kind: Modality,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>, kind: Modality) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Sequence(format!("{} ids but {} mask entries", ids.len(), mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Sequence("no unmasked token".into()));
        }
        if kind == Modality::Text && (ids[0] != 0 || !mask[0]) {
            return Err(Error::Sequence("text must begin with an unmasked [CLS] (id 0)".into()));
        }
        Ok(TokenSequence { ids, mask, kind })
    }

    /// All positions valid.
    pub fn dense(ids: Vec<u32>, kind: Modality) -> Result<Self> {
        let mask = vec![true; ids.len()];
        TokenSequence::new(ids, mask, kind)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn kind(&self) -> Modality {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn check_bounds(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(Error::TooLong { len: self.len(), max: max_len });
        }
        match self.ids.iter().position(|&id| id as usize >= vocab) {
            Some(position) => Err(Error::OutOfVocab { id: self.ids[position], position, vocab }),
            None => Ok(()),
        }
    }
}

/// `L×D` rows with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    dim: usize,
    mask: Vec<bool>,
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f64>, dim: usize, mask: Vec<bool>) -> Result<Self> {
        if dim == 0 || data.len() != dim * mask.len() {
            return Err(Error::DimMismatch { expected: dim * mask.len(), actual: data.len() });
        }
        Ok(EmbeddingMatrix { data, dim, mask })
    }

    pub fn from_rows(rows: &[Vec<f64>], mask: Vec<bool>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch { expected: dim, actual: r.len() });
        }
        EmbeddingMatrix::new(rows.concat(), dim, mask)
    }

    /// Every row valid.
    pub fn dense(rows: &[Vec<f64>]) -> Result<Self> {
        EmbeddingMatrix::from_rows(rows, vec![true; rows.len()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `(index, row)` for unmasked rows only.
    pub fn valid_rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.data.chunks_exact(self.dim).enumerate().filter(|(i, _)| self.mask[*i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same rows with a different mask; used to drop [CLS] from matching.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        EmbeddingMatrix::new(self.data.clone(), self.dim, mask)
    }
}

/// Each unmasked row divided by `max(‖row‖₂, 1e-12)`; masked rows become zero.
pub fn normalize_rows(x: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut data = x.data.clone();
    for (row, &m) in data.chunks_exact_mut(x.dim).zip(&x.mask) {
        if !m {
            row.fill(0.0);
            continue;
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    EmbeddingMatrix { data, dim: x.dim, mask: x.mask.clone() }
}

/// Prepends `extra` rows (C×D, all valid) to `x`.
pub fn append_extra_tokens(x: &EmbeddingMatrix, extra: &[Vec<f64>]) -> Result<EmbeddingMatrix> {
    if extra.is_empty() {
        return Ok(x.clone());
    }
    if let Some(r) = extra.iter().find(|r| r.len() != x.dim) {
        return Err(Error::DimMismatch { expected: x.dim, actual: r.len() });
    }
    let mut data = extra.concat();
    data.extend_from_slice(&x.data);
    let mut mask = vec![true; extra.len()];
    mask.extend_from_slice(&x.mask);
    EmbeddingMatrix::new(data, x.dim, mask)
}

// ------------------------------------------------------------------ graphs

/// Sequences right-padded to a common length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[&TokenSequence], cfg: &ModelConfig, kind: Modality) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.kind() != kind {
                return Err(Error::Sequence(format!("expected {kind:?} sequence")));
            }
            s.check_bounds(cfg.vocab(kind), cfg.max_len(kind))?;
            ids.extend_from_slice(s.ids());
            mask.extend_from_slice(s.mask());
            ids.resize(ids.len() + len - s.len(), 0);
            mask.resize(mask.len() + len - s.len(), false);
        }
        Ok(PaddedBatch { ids, mask, batch: seqs.len(), len })
    }
}

fn mask_tensor<T: Scalar>(mask: &[bool], dims: &[usize]) -> Tensor<T> {
    let data = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    Tensor::new(dims.to_vec(), data).expect("mask dims")
}

fn key_bias<T: Scalar>(mask: &[bool], b: usize, l: usize) -> Tensor<T> {
    let data = mask.iter().map(|&m| if m { T::zero() } else { T::c(KEY_MASK_BIAS) }).collect();
    Tensor::new(vec![b, 1, l], data).expect("bias dims")
}

/// `(B, L, D) · (D, E)`.
fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var, GraphError> {
    let d = g.dims(x).to_vec();
    let e = *g.dims(w).last().unwrap();
    let flat = g.reshape(x, &[d[0] * d[1], d[2]])?;
    let y = g.matmul(flat, w)?;
    g.reshape(y, &[d[0], d[1], e])
}

/// One pre-LayerNorm transformer layer with masked multi-head attention.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    key_bias: Var,
    heads: usize,
) -> Result<Var, GraphError> {
    let p = |s: &str| pv.get(&format!("{prefix}.{s}"));
    let d = g.dims(x)[2];
    let dh = d / heads;

    let h = g.layer_norm(x, p("ln1.g")?, p("ln1.b")?, LAYER_NORM_EPS)?;
    let q = project(g, h, p("attn.wq")?)?;
    let k = project(g, h, p("attn.wk")?)?;
    let v = project(g, h, p("attn.wv")?)?;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qh = g.slice(q, 2, lo, hi)?;
        let kh = g.slice(k, 2, lo, hi)?;
        let vh = g.slice(v, 2, lo, hi)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let s = g.add(s, key_bias)?;
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
    let attn = project(g, cat, p("attn.wo")?)?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, p("ln2.g")?, p("ln2.b")?, LAYER_NORM_EPS)?;
    let h = project(g, h, p("mlp.w1")?)?;
    let h = g.add(h, p("mlp.b1")?)?;
    let h = g.gelu(h);
    let h = project(g, h, p("mlp.w2")?)?;
    let h = g.add(h, p("mlp.b2")?)?;
    g.add(x, h)
}

/// Backbone: `blocks(tokenTable[ids] + posTable[0..L])`, masked rows zeroed.
/// Returns `(B, L, D)`.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    kind: Modality,
    batch: &PaddedBatch,
) -> Result<Var> {
    let (b, l, d) = (batch.batch, batch.len, cfg.dim);
    let vocab = cfg.vocab(kind);
    let pre = kind.prefix();
    let mut onehot = Tensor::<T>::zeros(&[b * l, vocab]);
    for (r, &id) in batch.ids.iter().enumerate() {
        onehot.data_mut()[r * vocab + id as usize] = T::one();
    }
    let onehot = g.constant(onehot);
    let emb = g.matmul(onehot, pv.get(&format!("{pre}.enc.token"))?)?;
    let emb = g.reshape(emb, &[b, l, d])?;
    let pos = g.slice(pv.get(&format!("{pre}.enc.pos"))?, 0, 0, l)?;
    let mut x = g.add(emb, pos)?;

    let bias = g.constant(key_bias(&batch.mask, b, l));
    for i in 0..cfg.encoder_layers {
        x = transformer_block(g, pv, &format!("{pre}.enc.l{i}"), x, bias, cfg.heads)?;
    }
    let m = g.constant(mask_tensor(&batch.mask, &[b, l, 1]));
    Ok(g.mul(x, m)?)
}

/// Prepends the modality's extra tokens to `(B, L, D)` content. Returns the
/// enlarged tensor and mask; with `C = 0` the input is returned unchanged.
pub fn prepend_extra_tokens<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    kind: Modality,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let c = cfg.extra(kind);
    let dims = g.dims(x).to_vec();
    let (b, l, d) = (dims[0], dims[1], dims[2]);
    if c == 0 {
        return Ok((x, mask.to_vec()));
    }
    let extra = pv.get(&format!("{}.seq.extra", kind.prefix()))?;
    if g.dims(extra) != [c, d] {
        return Err(Error::DimMismatch { expected: d, actual: *g.dims(extra).last().unwrap() });
    }
    let zeros = g.constant(Tensor::zeros(&[b, c, d]));
    let tiled = g.add(zeros, extra)?;
    let out = g.concat(&[tiled, x], 1)?;
    let mut m = Vec::with_capacity(b * (c + l));
    for row in mask.chunks_exact(l) {
        m.extend(std::iter::repeat_n(true, c));
        m.extend_from_slice(row);
    }
    Ok((out, m))
}

/// Residual sequential transformer over an enlarged `(B, C+L, D)` input whose
/// first `C` rows are extra tokens: `x + (blocks(x + pos) − (x + pos))`,
/// masked rows zeroed. Not normalized.
pub fn seq_transf_batch<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    kind: Modality,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let dims = g.dims(x).to_vec();
    let (b, rows) = (dims[0], dims[1]);
    let c = cfg.extra(kind);
    let pre = kind.prefix();
    if rows < c || rows - c > cfg.max_len(kind) {
        return Err(Error::TooLong { len: rows, max: cfg.max_len(kind) + c });
    }
    let l = rows - c;
    let content_pos = if l > 0 { Some(g.slice(pv.get(&format!("{pre}.seq.pos"))?, 0, 0, l)?) } else { None };
    let pos = match (c > 0, content_pos) {
        (true, Some(cp)) => g.concat(&[pv.get(&format!("{pre}.seq.extra_pos"))?, cp], 0)?,
        (true, None) => pv.get(&format!("{pre}.seq.extra_pos"))?,
        (false, Some(cp)) => cp,
        (false, None) => return Err(Error::Empty("seqTransf input")),
    };
    let h0 = g.add(x, pos)?;
    let bias = g.constant(key_bias(mask, b, rows));
    let mut h = h0;
    for i in 0..cfg.seq_layers {
        h = transformer_block(g, pv, &format!("{pre}.seq.l{i}"), h, bias, cfg.heads)?;
    }
    let delta = g.sub(h, h0)?;
    let out = g.add(x, delta)?;
    let m = g.constant(mask_tensor(mask, &[b, rows, 1]));
    Ok(g.mul(out, m)?)
}

/// Graph handles for one encoded modality of a batch.
#[derive(Clone, Debug)]
pub struct TowerVars {
    /// `(B, C+L, D)` seqTransf output, row-normalized.
    pub tokens: Var,
    /// `(B, D)` pooled representation feeding the probabilistic heads.
    pub pooled: Var,
    /// Which rows of `tokens` take part in token-wise matching.
    pub match_mask: Vec<bool>,
    pub batch: usize,
    pub rows: usize,
}

/// Backbone, extra tokens, seqTransf, normalization and pooling: text pools
/// the [CLS] row, video takes the masked mean of its frame rows.
pub fn encode_tower<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    kind: Modality,
    batch: &PaddedBatch,
) -> Result<TowerVars> {
    let (b, l, d) = (batch.batch, batch.len, cfg.dim);
    let c = cfg.extra(kind);
    let enc = encode_batch(g, pv, cfg, kind, batch)?;
    let (x, mask) = prepend_extra_tokens(g, pv, cfg, kind, enc, &batch.mask)?;
    let st = seq_transf_batch(g, pv, cfg, kind, x, &mask)?;
    let tokens = g.l2_normalize(st, NORM_EPS);
    let rows = c + l;

    let pooled = match kind {
        Modality::Text => {
            let cls = g.slice(st, 1, c, c + 1)?;
            g.reshape(cls, &[b, d])?
        }
        Modality::Video => {
            let mut w = Tensor::<T>::zeros(&[b, rows, 1]);
            for (i, row) in batch.mask.chunks_exact(l).enumerate() {
                let n = row.iter().filter(|&&m| m).count();
                if n == 0 {
                    return Err(Error::Empty("video with no valid frame"));
                }
                for (j, &m) in row.iter().enumerate() {
                    if m {
                        w.data_mut()[i * rows + c + j] = T::c(1.0 / n as f64);
                    }
                }
            }
            let w = g.constant(w);
            let weighted = g.mul(st, w)?;
            let t = g.transpose(weighted)?;
            let s = g.sum_last(t);
            g.reshape(s, &[b, d])?
        }
    };

    let mut match_mask = mask;
    if kind == Modality::Text && !cfg.include_cls_in_matching {
        for i in 0..b {
            match_mask[i * rows + c] = false;
        }
    }
    Ok(TowerVars { tokens, pooled, match_mask, batch: b, rows })
}

// ----------------------------------------------------------- plain wrappers

fn single_graph<T: Scalar>(params: &ModelParams<T>) -> Result<(Graph<T>, ParamVars)> {
    let mut g = Graph::new();
    let pv = params.declare(&mut g, false)?;
    Ok((g, pv))
}

fn run_to_matrix<T: Scalar>(
    mut g: Graph<T>,
    params: &ModelParams<T>,
    out: Var,
    mask: Vec<bool>,
) -> Result<EmbeddingMatrix> {
    g.forward(&params.tensors)?;
    let t = g.value(out)?;
    let data = t.data().iter().map(|v| v.as_f64()).collect();
    EmbeddingMatrix::new(data, t.last_dim(), mask)
}

/// Backbone output for one sequence, not normalized.
pub fn encode_sequence<T: Scalar>(
    seq: &TokenSequence,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<EmbeddingMatrix> {
    let batch = PaddedBatch::new(&[seq], cfg, seq.kind())?;
    let (mut g, pv) = single_graph(params)?;
    let out = encode_batch(&mut g, &pv, cfg, seq.kind(), &batch)?;
    let out = g.reshape(out, &[batch.len, cfg.dim])?;
    run_to_matrix(g, params, out, batch.mask)
}

/// seqTransf on one enlarged matrix whose first `C` rows are extra tokens.
pub fn seq_transf<T: Scalar>(
    x: &EmbeddingMatrix,
    kind: Modality,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<EmbeddingMatrix> {
    if x.dim() != cfg.dim {
        return Err(Error::DimMismatch { expected: cfg.dim, actual: x.dim() });
    }
    let (mut g, pv) = single_graph(params)?;
    let data = x.data().iter().map(|&v| T::c(v)).collect();
    let input = g.constant(Tensor::new(vec![1, x.len(), x.dim()], data)?);
    let out = seq_transf_batch(&mut g, &pv, cfg, kind, input, x.mask())?;
    let out = g.reshape(out, &[x.len(), x.dim()])?;
    run_to_matrix(g, params, out, x.mask().to_vec())
}

/// Full tower on a batch of sequences, one normalized enlarged matrix and
/// one pooled vector per item. The matrices carry the matching mask.
pub fn encode_items<T: Scalar>(
    seqs: &[&TokenSequence],
    kind: Modality,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Vec<EmbeddingMatrix>, Vec<Vec<f64>>)> {
    let batch = PaddedBatch::new(seqs, cfg, kind)?;
    let (mut g, pv) = single_graph(params)?;
    let tower = encode_tower(&mut g, &pv, cfg, kind, &batch)?;
    g.forward(&params.tensors)?;
    let tokens = g.value(tower.tokens)?;
    let per = tower.rows * cfg.dim;
    let mut mats = Vec::with_capacity(seqs.len());
    for (i, chunk) in tokens.data().chunks_exact(per).enumerate() {
        let mask = tower.match_mask[i * tower.rows..(i + 1) * tower.rows].to_vec();
        let data = chunk.iter().map(|v| v.as_f64()).collect();
        mats.push(EmbeddingMatrix::new(data, cfg.dim, mask)?);
    }
    let pooled = g.value(tower.pooled)?.rows().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    Ok((mats, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 32,
            heads: 4,
            text_vocab: 40,
            video_vocab: 40,
            max_text_len: 34,
            max_video_len: 32,
            ..ModelConfig::default()
        }
    }

    fn video(ids: &[u32], mask: &[bool]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), mask.to_vec(), Modality::Video).unwrap()
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenSequence::new(vec![1, 2], vec![true], Modality::Video).is_err());
        assert!(TokenSequence::new(vec![1, 2], vec![false, false], Modality::Video).is_err());
        assert!(TokenSequence::dense(vec![3, 4], Modality::Text).is_err());
        let t = TokenSequence::dense(vec![0, 4], Modality::Text).unwrap();
        assert!(matches!(t.check_bounds(4, 10), Err(Error::OutOfVocab { id: 4, position: 1, vocab: 4 })));
        assert!(matches!(t.check_bounds(10, 1), Err(Error::TooLong { len: 2, max: 1 })));
    }

    #[test]
    fn encode_shape_and_mask_contract() {
        let cfg = cfg();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let s = video(&[1, 2, 3, 4, 5], &[true, true, true, false, false]);
        let out = encode_sequence(&s, &p, &cfg).unwrap();
        assert_eq!((out.len(), out.dim()), (5, 32));
        assert!(out.row(3).iter().chain(out.row(4)).all(|&v| v == 0.0));
        assert!(out.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_layers_is_table_lookup_plus_position() {
        let cfg = ModelConfig { encoder_layers: 0, ..cfg() };
        let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let s = video(&[7, 3, 9], &[true; 3]);
        let out = encode_sequence(&s, &p, &cfg).unwrap();
        let tok = p.get("video.enc.token").unwrap();
        let pos = p.get("video.enc.pos").unwrap();
        for (i, &id) in s.ids().iter().enumerate() {
            for j in 0..cfg.dim {
                let want = tok.data()[id as usize * cfg.dim + j] + pos.data()[i * cfg.dim + j];
                assert_eq!(out.row(i)[j], want);
            }
        }
    }

    #[test]
    fn swapping_tokens_changes_rows() {
        let cfg = cfg();
        let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let a = encode_sequence(&video(&[1, 2, 3], &[true; 3]), &p, &cfg).unwrap();
        let b = encode_sequence(&video(&[2, 1, 3], &[true; 3]), &p, &cfg).unwrap();
        assert_ne!(a.row(0), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn masked_ids_never_leak() {
        let cfg = cfg();
        let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let mask = [true, false, true, false];
        let a = encode_sequence(&video(&[1, 2, 3, 4], &mask), &p, &cfg).unwrap();
        let b = encode_sequence(&video(&[1, 30, 3, 17], &mask), &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extra_tokens_prepend() {
        let x = EmbeddingMatrix::dense(&vec![vec![1.0; 4]; 12]).unwrap();
        let y = append_extra_tokens(&x, &vec![vec![0.5; 4]; 3]).unwrap();
        assert_eq!(y.len(), 15);
        assert_eq!(y.row(0), &[0.5; 4]);
        assert_eq!(y.row(3), &[1.0; 4]);
        assert!(y.mask().iter().all(|&m| m));

        let words = EmbeddingMatrix::dense(&vec![vec![1.0; 4]; 32]).unwrap();
        assert_eq!(append_extra_tokens(&words, &vec![vec![0.0; 4]; 2]).unwrap().len(), 34);

        assert_eq!(append_extra_tokens(&x, &[]).unwrap(), x);
        let bad = vec![vec![0.0; 3]];
        assert!(matches!(append_extra_tokens(&x, &bad), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_extra_tokens_is_identity_in_graph() {
        let cfg = ModelConfig { extra_video: 0, ..cfg() };
        let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let pv = p.declare(&mut g, false).unwrap();
        let x = g.constant(Tensor::zeros(&[2, 3, 32]));
        let (y, m) = prepend_extra_tokens(&mut g, &pv, &cfg, Modality::Video, x, &[true; 6]).unwrap();
        assert_eq!(y, x);
        assert_eq!(m, vec![true; 6]);
    }

    #[test]
    fn zero_block_weights_make_seq_transf_identity() {
        let cfg = cfg();
        let mut p = ModelParams::<f64>::init(&cfg, 6).unwrap();
        for (name, t) in p.tensors.iter_mut() {
            if name.starts_with("video.seq.l") {
                t.data_mut().fill(0.0);
            }
        }
        let rows: Vec<Vec<f64>> =
            (0..15).map(|i| (0..32).map(|j| ((i * 32 + j) as f64 * 0.37).sin()).collect()).collect();
        let x = EmbeddingMatrix::dense(&rows).unwrap();
        let y = seq_transf(&x, Modality::Video, &p, &cfg).unwrap();
        assert_eq!((y.len(), y.dim()), (15, 32));
        assert_eq!(y, x);
    }

    #[test]
    fn fresh_seq_transf_is_identity() {
        let cfg = cfg();
        let p = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 - 2.0; 32]).collect();
        let x = EmbeddingMatrix::dense(&rows).unwrap();
        assert_eq!(seq_transf(&x, Modality::Video, &p, &cfg).unwrap(), x);
    }

    #[test]
    fn normalize_rows_cases() {
        let x = EmbeddingMatrix::from_rows(
            &[vec![3.0, 4.0], vec![0.6, 0.8], vec![0.0, 0.0], vec![5.0, 5.0]],
            vec![true, true, true, false],
        )
        .unwrap();
        let y = normalize_rows(&x);
        assert_eq!(y.row(0), &[0.6, 0.8]);
        assert_eq!(y.row(1), &[0.6, 0.8]);
        assert_eq!(y.row(2), &[0.0, 0.0]);
        assert_eq!(y.row(3), &[0.0, 0.0]);
    }

    #[test]
    fn tower_rows_are_unit_and_cls_excluded() {
        let cfg = cfg();
        let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let t = TokenSequence::new(vec![0, 5, 6, 0], vec![true, true, true, false], Modality::Text).unwrap();
        let (mats, pooled) = encode_items(&[&t], Modality::Text, &p, &cfg).unwrap();
        let m = &mats[0];
        assert_eq!(m.len(), cfg.extra_text + 4);
        assert_eq!(m.mask(), &[true, true, false, true, true, false]);
        for (_, r) in m.valid_rows() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(pooled[0].len(), cfg.dim);
    }

    #[test]
    fn cls_joins_the_word_set_when_enabled() {
        let cfg = ModelConfig { include_cls_in_matching: true, ..cfg() };
        let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let t = TokenSequence::new(vec![0, 5, 6, 0], vec![true, true, true, false], Modality::Text).unwrap();
        let (mats, _) = encode_items(&[&t], Modality::Text, &p, &cfg).unwrap();
        assert_eq!(mats[0].mask(), &[true, true, true, true, true, false]);
        // Video has no [CLS]; the flag leaves it alone.
        let v = TokenSequence::dense(vec![1, 2], Modality::Video).unwrap();
        let (mats, _) = encode_items(&[&v], Modality::Video, &p, &cfg).unwrap();
        assert!(mats[0].mask().iter().all(|&m| m));
    }
}
