use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uatvr_core::autodiff::Stencil;
use uatvr_core::encoders::{encode_items, TokenSequence};
use uatvr_core::evaluator::{encode_with_heads, evaluate, MetricsLine, ScoreMode, METRICS_HEADER};
use uatvr_core::matching::{batch_similarity, dsa_similarity, match_attribution};
use uatvr_core::objectives::{Direction, LossWeights};
use uatvr_core::synthcorpus::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusConfig, Split};
use uatvr_core::tensorfile::{TensorData, TensorFile};
use uatvr_core::trainer::{format_log, train_run_with, Checkpoint, TrainConfig};
use uatvr_core::verify::{objective_gradcheck, primitive_suite, CheckSetup};
use uatvr_core::{Error, Modality};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const GRADCHECK_BOUND: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "uatvr", version, about = "Uncertainty-adaptive text-video retrieval on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    GenData(GenData),
    /// Train a model and write a checkpoint; prints one metrics line per epoch.
    Train(Train),
    /// Evaluate a checkpoint on the test split.
    Eval(Eval),
    /// Export test-split embeddings and Gaussian parameters.
    Embed(Embed),
    /// Rank all corpus videos for a token-id query.
    Query(Query),
    /// Check analytic gradients against finite differences.
    Gradcheck(Gradcheck),
    /// Show which words and frames drive one caption-video score.
    Explain(Explain),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Total videos, train plus test.
    #[arg(long, default_value_t = 250)]
    videos: usize,
    #[arg(long, default_value_t = 50)]
    test_videos: usize,
    #[arg(long, default_value_t = 5)]
    captions_per_video: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    words: usize,
    #[arg(long, default_value_t = 16)]
    topics: usize,
    #[arg(long, default_value_t = 3)]
    segments: usize,
    #[arg(long, default_value_t = 10)]
    tokens_per_topic: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    cv: usize,
    #[arg(long, default_value_t = 2)]
    ct: usize,
    #[arg(long, default_value_t = 1e-2)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    beta: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-epoch log to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "t2v")]
    direction: Direction,
    /// Diagnostic: add the mean sampled-embedding score using this many samples.
    #[arg(long)]
    fused_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `query, ground truth, rank` rows to this file.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Args)]
struct Embed {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Query {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated text token ids; a leading [CLS] (0) is added if absent.
    #[arg(long)]
    tokens: String,
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Explain {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Caption index and video index, as `i,j`.
    #[arg(long)]
    pair: String,
}

/// Gradient check above the bound.
#[derive(Debug)]
struct NumericalFailure(String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn load(data: &Path, ckpt: &Path) -> Result<(Corpus, Checkpoint)> {
    let corpus = read_corpus(data).with_context(|| format!("reading corpus {}", data.display()))?;
    let ck = Checkpoint::load(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    if ck.corpus_sha256 != corpus.fingerprint() {
        eprintln!("warning: checkpoint was trained on a different corpus");
    }
    Ok((corpus, ck))
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = CorpusConfig {
        video_count: a.videos,
        test_videos: a.test_videos,
        captions_per_video: a.captions_per_video,
        frames: a.frames,
        words: a.words,
        topics: a.topics,
        segments: a.segments,
        tokens_per_topic: a.tokens_per_topic,
        video_vocab: a.topics * a.tokens_per_topic,
        text_vocab: a.topics * a.tokens_per_topic + 1,
        noise: a.noise,
        seed: a.seed,
    };
    let corpus = generate_corpus(&cfg)?;
    write_corpus(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    outln!("videos\tcaptions\ttrain\ttest");
    outln!(
        "{}\t{}\t{}\t{}",
        corpus.videos.len(),
        corpus.captions.len(),
        corpus.video_indices(Split::Train).len(),
        corpus.video_indices(Split::Test).len()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let corpus = read_corpus(&a.data).with_context(|| format!("reading corpus {}", a.data.display()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        base_lr: a.lr,
        weights: LossWeights::new(a.alpha, a.beta)?,
        k: a.k,
        extra_video: a.cv,
        extra_text: a.ct,
        dim: a.dim,
        seed: a.seed,
        ..TrainConfig::default()
    };
    outln!("{METRICS_HEADER}");
    let out = train_run_with(&corpus, &cfg, |line| {
        let mut o = std::io::stdout().lock();
        let _ = writeln!(o, "{line}").and_then(|_| o.flush());
    })?;
    out.checkpoint.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = a.log {
        std::fs::write(&p, format_log(&out.log)).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("wrote {} after {} steps", a.out.display(), out.checkpoint.adam.step);
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let (corpus, ck) = load(&a.data, &a.ckpt)?;
    let mode = match a.fused_samples {
        Some(k) if k > 0 => ScoreMode::Fused { k, seed: a.seed },
        Some(_) => bail!(Error::Config("--fused-samples must be positive".into())),
        None => ScoreMode::Deterministic,
    };
    let report = evaluate(&ck.params, &ck.model, &corpus, a.direction, mode)?;
    let line = MetricsLine {
        epoch: None,
        losses: None,
        text_uncertainty: report.text_uncertainty,
        video_uncertainty: report.video_uncertainty,
        metrics: report.metrics,
    };
    outln!("{METRICS_HEADER}");
    outln!("{line}");
    if let Some(p) = a.ranks {
        let body: String = report.ranks.iter().map(|(q, g, r)| format!("{q}\t{g}\t{r}\n")).collect();
        std::fs::write(&p, format!("query\tgt\trank\n{body}")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn embed(a: Embed) -> Result<()> {
    let (corpus, ck) = load(&a.data, &a.ckpt)?;
    let mut f = TensorFile::new(*b"UATE");
    let d = ck.model.dim;
    let videos = corpus.video_indices(Split::Test);
    let captions = corpus.caption_indices(Split::Test);
    let sets: [(Modality, Vec<usize>, Vec<&TokenSequence>); 2] = [
        (Modality::Text, captions.clone(), captions.iter().map(|&c| &corpus.captions[c].text).collect()),
        (Modality::Video, videos.clone(), videos.iter().map(|&v| &corpus.videos[v]).collect()),
    ];
    for (kind, ids, seqs) in sets {
        let p = kind.prefix();
        let enc = encode_with_heads(&seqs, kind, &ck.params, &ck.model)?;
        let n = seqs.len();
        let rows = enc.matrices.iter().map(|m| m.len()).max().unwrap_or(0);
        let mut tokens = vec![0f32; n * rows * d];
        let mut mask = vec![0u8; n * rows];
        for (i, m) in enc.matrices.iter().enumerate() {
            for r in 0..m.len() {
                for (k, &x) in m.row(r).iter().enumerate() {
                    tokens[(i * rows + r) * d + k] = x as f32;
                }
                mask[i * rows + r] = m.mask()[r] as u8;
            }
        }
        let flat = |get: fn(&uatvr_core::uncertainty::GaussianEmbedding) -> &Vec<f64>| -> Vec<f32> {
            enc.gaussians.iter().flat_map(|g| get(g).iter().map(|&x| x as f32)).collect()
        };
        f.insert(&format!("{p}.index"), vec![n], TensorData::U64(ids.iter().map(|&i| i as u64).collect()))?;
        f.insert(&format!("{p}.tokens"), vec![n, rows, d], TensorData::F32(tokens))?;
        f.insert(&format!("{p}.mask"), vec![n, rows], TensorData::U8(mask))?;
        f.insert(&format!("{p}.mu"), vec![n, d], TensorData::F32(flat(|g| &g.mu)))?;
        f.insert(&format!("{p}.log_var"), vec![n, d], TensorData::F32(flat(|g| &g.log_var)))?;
    }
    f.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    outln!("texts\tvideos");
    outln!("{}\t{}", captions.len(), videos.len());
    Ok(())
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| Error::Sequence(format!("bad token id `{t}`")).into()))
        .collect()
}

fn query(a: Query) -> Result<()> {
    let (corpus, ck) = load(&a.data, &a.ckpt)?;
    let mut ids = parse_ids(&a.tokens)?;
    if ids.first() != Some(&0) {
        ids.insert(0, 0);
    }
    let q = TokenSequence::dense(ids, Modality::Text)?;
    let (qm, _) = encode_items(&[&q], Modality::Text, &ck.params, &ck.model)?;
    let seqs: Vec<&TokenSequence> = corpus.videos.iter().collect();
    let vm = encode_with_heads(&seqs, Modality::Video, &ck.params, &ck.model)?.matrices;
    let sim = batch_similarity(&qm, &vm, dsa_similarity)?;
    let mut order: Vec<usize> = (0..vm.len()).collect();
    order.sort_by(|&x, &y| sim.get(0, y).total_cmp(&sim.get(0, x)));
    outln!("rank\tvideo\tscore\tsplit");
    for (r, &v) in order.iter().take(a.topk).enumerate() {
        let split = match corpus.splits[v] {
            Split::Train => "train",
            Split::Test => "test",
        };
        outln!("{}\t{v}\t{:?}\t{split}", r + 1, sim.get(0, v));
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let suite = primitive_suite(a.trials, a.eps, a.seed, Stencil::FourPoint)?;
    let objective = objective_gradcheck(&CheckSetup::default(), a.seed, a.eps)?;
    outln!("check\tmaxRelErr\tchecked\ttieAdjacent");
    let mut worst = 0.0f64;
    for (name, r) in suite.iter().map(|e| (e.name, &e.report)).chain([("objective", &objective)]) {
        outln!("{name}\t{:e}\t{}\t{}", r.max_rel_error, r.checked, r.tie_adjacent.len());
        worst = worst.max(r.max_rel_error);
    }
    outln!("maxRelErr\t{worst:e}");
    if worst > GRADCHECK_BOUND {
        return Err(NumericalFailure(format!("max relative error {worst:e} exceeds {GRADCHECK_BOUND:e}")).into());
    }
    Ok(())
}

fn explain(a: Explain) -> Result<()> {
    let (corpus, ck) = load(&a.data, &a.ckpt)?;
    let pair = parse_ids(&a.pair)?;
    let [c, v] = pair[..] else {
        bail!(Error::Config(format!("--pair expects `i,j`, got `{}`", a.pair)));
    };
    let (c, v) = (c as usize, v as usize);
    let caption = corpus
        .captions
        .get(c)
        .ok_or_else(|| Error::Config(format!("caption {c} out of range ({})", corpus.captions.len())))?;
    let video = corpus
        .videos
        .get(v)
        .ok_or_else(|| Error::Config(format!("video {v} out of range ({})", corpus.videos.len())))?;
    let (tm, _) = encode_items(&[&caption.text], Modality::Text, &ck.params, &ck.model)?;
    let (vm, _) = encode_items(&[video], Modality::Video, &ck.params, &ck.model)?;
    let score = dsa_similarity(&tm[0], &vm[0])?;
    let att = match_attribution(&tm[0], &vm[0])?;
    let (ct, cv) = (ck.model.extra_text, ck.model.extra_video);
    let label = |i: usize, c: usize, ids: &[u32]| {
        if i < c {
            format!("extra{i}")
        } else {
            format!("tok{}", ids[i - c])
        }
    };
    outln!("score\t{score:?}\tsourceVideo\t{}", caption.video);
    outln!("kind\trow\ttoken\tweight");
    for (i, w) in att.word_weights.iter().enumerate() {
        outln!("word\t{i}\t{}\t{w:.6}", label(i, ct, caption.text.ids()));
    }
    for (j, w) in att.frame_weights.iter().enumerate() {
        outln!("frame\t{j}\t{}\t{w:.6}", label(j, cv, video.ids()));
    }
    outln!("pair\tword\tframe\tscore");
    for p in &att.matched_pairs {
        outln!("match\t{}\t{}\t{:.6}", p.word, p.frame, p.score);
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericalFailure>().is_some() {
        return EXIT_NUMERICAL;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NonFiniteGradient(_)) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("UATVR_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed(a),
        Command::Query(a) => query(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Explain(a) => explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
