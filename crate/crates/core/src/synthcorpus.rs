//! Synthetic one-to-many corpus: videos built from topic segments, each
//! described by several captions of varying granularity.
//!
//! Token layout, with `P = tokens_per_topic`:
//! - video token `id` belongs to topic `id / P`;
//! - text id 0 is [CLS]; text token `id ≥ 1` belongs to topic `(id − 1) / P`.
//!
//! # File format
//!
//! Little-endian throughout.
//!
//! ```text
//! magic "UATC", u32 version (1)
//! config:   u32 video_count, u32 test_videos, u32 captions_per_video,
//!           u32 frames, u32 words, u32 topics, u32 segments,
//!           u32 tokens_per_topic, u32 video_vocab, u32 text_vocab,
//!           f64 noise, u64 seed
//! videos:   u32 count, then per video:
//!           u32 len, len × u32 id, len × u8 mask, u8 split (0 train, 1 test)
//! captions: u32 count, then per caption:
//!           u32 video index, u32 len, len × u32 id, len × u8 mask
//! ```

use std::collections::HashSet;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TokenSequence;
use crate::error::{Error, FormatError, Result};
use crate::model::Modality;

pub const CORPUS_MAGIC: [u8; 4] = *b"UATC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Total videos, train plus test.
    pub video_count: usize,
    /// The last `test_videos` videos form the test split.
    pub test_videos: usize,
    pub captions_per_video: usize,
    pub frames: usize,
    /// Longest caption, excluding [CLS].
    pub words: usize,
    pub topics: usize,
    pub segments: usize,
    pub tokens_per_topic: usize,
    pub video_vocab: usize,
    pub text_vocab: usize,
    /// Chance that a caption word is replaced by a random word.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            video_count: 250,
            test_videos: 50,
            captions_per_video: 5,
            frames: 12,
            words: 16,
            topics: 16,
            segments: 3,
            tokens_per_topic: 10,
            video_vocab: 160,
            text_vocab: 161,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let pool = self.topics * self.tokens_per_topic;
        if self.video_count == 0 {
            return bad("video_count must be at least 1".into());
        }
        if self.test_videos >= self.video_count {
            return bad(format!("test_videos ({}) must be below video_count ({})", self.test_videos, self.video_count));
        }
        if self.captions_per_video == 0 {
            return bad("captions_per_video must be at least 1".into());
        }
        if self.segments == 0 || self.segments > self.frames {
            return bad(format!("segments ({}) must be in 1..=frames ({})", self.segments, self.frames));
        }
        if self.segments > self.topics {
            return bad(format!("segments ({}) must not exceed topics ({})", self.segments, self.topics));
        }
        if self.words < 3 {
            return bad(format!("words ({}) must be at least 3", self.words));
        }
        if self.tokens_per_topic < 3 {
            return bad(format!("tokens_per_topic ({}) must be at least 3", self.tokens_per_topic));
        }
        if self.video_vocab < pool {
            return bad(format!(
                "video_vocab ({}) must be at least topics × tokens_per_topic ({pool})",
                self.video_vocab
            ));
        }
        if self.text_vocab < pool + 1 {
            return bad(format!(
                "text_vocab ({}) must be at least topics × tokens_per_topic + 1 ({})",
                self.text_vocab,
                pool + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise ({}) must lie in [0, 1]", self.noise));
        }
        Ok(())
    }

    pub fn video_topic(&self, id: u32) -> Option<usize> {
        let t = id as usize / self.tokens_per_topic;
        (t < self.topics).then_some(t)
    }

    pub fn text_topic(&self, id: u32) -> Option<usize> {
        if id == 0 {
            return None;
        }
        let t = (id as usize - 1) / self.tokens_per_topic;
        (t < self.topics).then_some(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Global,
    Segment,
    Entity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub text: TokenSequence,
    pub video: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub videos: Vec<TokenSequence>,
    pub splits: Vec<Split>,
    pub captions: Vec<Caption>,
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// Distinct topics and contiguous segment lengths (each ≥ 1).
    fn layout(&mut self) -> (Vec<usize>, Vec<usize>) {
        let cfg = self.cfg;
        let topics = sample(&mut self.rng, cfg.topics, cfg.segments).into_vec();
        let mut cuts = sample(&mut self.rng, cfg.frames - 1, cfg.segments - 1).into_vec();
        cuts.sort_unstable();
        let mut lens = Vec::with_capacity(cfg.segments);
        let mut prev = 0;
        for c in cuts.into_iter().map(|c| c + 1).chain([cfg.frames]) {
            lens.push(c - prev);
            prev = c;
        }
        (topics, lens)
    }

    fn video(&mut self, topics: &[usize], lens: &[usize]) -> Vec<u32> {
        let p = self.cfg.tokens_per_topic;
        let mut ids = Vec::with_capacity(self.cfg.frames);
        for (&t, &n) in topics.iter().zip(lens) {
            for _ in 0..n {
                ids.push((t * p + self.rng.random_range(0..p)) as u32);
            }
        }
        ids
    }

    /// Caption words name the frame tokens they describe: video token `f`
    /// is described by text token `f + 1`.
    fn caption(&mut self, frames: &[u32], lens: &[usize]) -> Vec<u32> {
        let cfg = self.cfg;
        let starts: Vec<usize> = lens
            .iter()
            .scan(0, |acc, &n| {
                let s = *acc;
                *acc += n;
                Some(s)
            })
            .collect();
        let kind = match self.rng.random_range(0..3) {
            0 => Granularity::Global,
            1 => Granularity::Segment,
            _ => Granularity::Entity,
        };
        let (lo, hi, n) = match kind {
            Granularity::Global => (0, cfg.frames, cfg.words),
            Granularity::Segment | Granularity::Entity => {
                let s = self.rng.random_range(0..lens.len());
                let n = if kind == Granularity::Segment {
                    self.rng.random_range((cfg.words / 2).max(2)..=cfg.words)
                } else {
                    self.rng.random_range(2..=3)
                };
                (starts[s], starts[s] + lens[s], n)
            }
        };
        let mut words: Vec<u32> = (0..n)
            .map(|i| match kind {
                // Global captions walk the video in order.
                Granularity::Global => frames[lo + i * (hi - lo) / n] + 1,
                _ => frames[self.rng.random_range(lo..hi)] + 1,
            })
            .collect();
        for w in words.iter_mut() {
            if self.rng.random_bool(cfg.noise) {
                *w = self.rng.random_range(1..cfg.text_vocab as u32);
            }
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(0);
        ids.extend(words);
        ids
    }
}

/// Generates a corpus fully determined by `cfg` (including its seed).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut gen = Generator { cfg, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let train_count = cfg.video_count - cfg.test_videos;
    let mut layouts = Vec::with_capacity(cfg.video_count);
    let mut videos = Vec::with_capacity(cfg.video_count);
    let mut splits = Vec::with_capacity(cfg.video_count);
    let mut seen_video: HashSet<Vec<u32>> = HashSet::new();
    for v in 0..cfg.video_count {
        let split = if v < train_count { Split::Train } else { Split::Test };
        let (topics, lens) = gen.layout();
        let mut ids = gen.video(&topics, &lens);
        // Split hygiene: a test video never repeats a train video.
        while split == Split::Test && seen_video.contains(&ids) {
            ids = gen.video(&topics, &lens);
        }
        if split == Split::Train {
            seen_video.insert(ids.clone());
        }
        videos.push(TokenSequence::dense(ids.clone(), Modality::Video)?);
        splits.push(split);
        layouts.push((ids, lens));
    }

    let mut captions = Vec::with_capacity(cfg.video_count * cfg.captions_per_video);
    let mut seen_text: HashSet<Vec<u32>> = HashSet::new();
    for (v, (frames, lens)) in layouts.iter().enumerate() {
        for _ in 0..cfg.captions_per_video {
            let mut ids = gen.caption(frames, lens);
            let mut tries = 0;
            while splits[v] == Split::Test && seen_text.contains(&ids) {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Config("cannot draw a test caption distinct from all train captions".into()));
                }
                ids = gen.caption(frames, lens);
            }
            if splits[v] == Split::Train {
                seen_text.insert(ids.clone());
            }
            captions.push(Caption { text: TokenSequence::dense(ids, Modality::Text)?, video: v });
        }
    }
    Ok(Corpus { config: cfg.clone(), videos, splits, captions })
}

impl Corpus {
    pub fn video_indices(&self, split: Split) -> Vec<usize> {
        (0..self.videos.len()).filter(|&v| self.splits[v] == split).collect()
    }

    pub fn caption_indices(&self, split: Split) -> Vec<usize> {
        (0..self.captions.len()).filter(|&c| self.splits[self.captions[c].video] == split).collect()
    }

    pub fn captions_of(&self, video: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.captions.len()).filter(move |&c| self.captions[c].video == video)
    }

    /// Topics present in a video.
    pub fn video_topics(&self, video: usize) -> HashSet<usize> {
        self.videos[video].ids().iter().filter_map(|&id| self.config.video_topic(id)).collect()
    }

    /// Caption words that name a frame token present in `video`.
    pub fn shared_tokens(&self, caption: usize, video: usize) -> usize {
        let frames: HashSet<u32> = self.videos[video].ids().iter().copied().collect();
        self.captions[caption].text.ids()[1..].iter().filter(|&&w| frames.contains(&(w - 1))).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&CORPUS_MAGIC);
        let mut w = |x: usize| out.write_u32::<LE>(x as u32).expect("vec write");
        w(CORPUS_VERSION as usize);
        for x in [
            c.video_count,
            c.test_videos,
            c.captions_per_video,
            c.frames,
            c.words,
            c.topics,
            c.segments,
            c.tokens_per_topic,
            c.video_vocab,
            c.text_vocab,
        ] {
            w(x);
        }
        out.write_f64::<LE>(c.noise).expect("vec write");
        out.write_u64::<LE>(c.seed).expect("vec write");

        out.write_u32::<LE>(self.videos.len() as u32).expect("vec write");
        for (v, split) in self.videos.iter().zip(&self.splits) {
            write_seq(&mut out, v);
            out.push(match split {
                Split::Train => 0,
                Split::Test => 1,
            });
        }
        out.write_u32::<LE>(self.captions.len() as u32).expect("vec write");
        for cap in &self.captions {
            out.write_u32::<LE>(cap.video as u32).expect("vec write");
            write_seq(&mut out, &cap.text);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| FormatError::Truncated("magic"))?;
        if magic != CORPUS_MAGIC {
            return Err(FormatError::BadMagic { expected: CORPUS_MAGIC, found: magic }.into());
        }
        let version = read_u32(&mut r, "version")?;
        if version != CORPUS_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: CORPUS_VERSION }.into());
        }
        let mut u = |what| read_u32(&mut r, what).map(|x| x as usize);
        let mut config = CorpusConfig {
            video_count: u("config")?,
            test_videos: u("config")?,
            captions_per_video: u("config")?,
            frames: u("config")?,
            words: u("config")?,
            topics: u("config")?,
            segments: u("config")?,
            tokens_per_topic: u("config")?,
            video_vocab: u("config")?,
            text_vocab: u("config")?,
            ..CorpusConfig::default()
        };
        config.noise = r.read_f64::<LE>().map_err(|_| FormatError::Truncated("config"))?;
        config.seed = r.read_u64::<LE>().map_err(|_| FormatError::Truncated("config"))?;

        let n = read_u32(&mut r, "video count")? as usize;
        let mut videos = Vec::with_capacity(n.min(1 << 20));
        let mut splits = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            videos.push(read_seq(&mut r, Modality::Video, "video")?);
            splits.push(match r.read_u8().map_err(|_| FormatError::Truncated("split"))? {
                0 => Split::Train,
                1 => Split::Test,
                x => return Err(FormatError::Corrupt(format!("split tag {x}")).into()),
            });
        }
        let n = read_u32(&mut r, "caption count")? as usize;
        let mut captions = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let video = read_u32(&mut r, "caption")? as usize;
            if video >= videos.len() {
                return Err(FormatError::Corrupt(format!("caption refers to video {video}")).into());
            }
            let text = read_seq(&mut r, Modality::Text, "caption")?;
            captions.push(Caption { text, video });
        }
        let rest = bytes.len() - r.position() as usize;
        if rest != 0 {
            return Err(FormatError::TrailingBytes(rest).into());
        }
        Ok(Corpus { config, videos, splits, captions })
    }

    /// SHA-256 of the serialized corpus.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

fn write_seq(out: &mut Vec<u8>, s: &TokenSequence) {
    out.write_u32::<LE>(s.len() as u32).expect("vec write");
    for &id in s.ids() {
        out.write_u32::<LE>(id).expect("vec write");
    }
    out.extend(s.mask().iter().map(|&m| m as u8));
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &'static str) -> Result<u32> {
    Ok(r.read_u32::<LE>().map_err(|_| FormatError::Truncated(what))?)
}

fn read_seq(r: &mut Cursor<&[u8]>, kind: Modality, what: &'static str) -> Result<TokenSequence> {
    let len = read_u32(r, what)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len.saturating_mul(5) > remaining {
        return Err(FormatError::Truncated(what).into());
    }
    let mut ids = vec![0u32; len];
    r.read_u32_into::<LE>(&mut ids).map_err(|_| FormatError::Truncated(what))?;
    let mut mask = vec![0u8; len];
    r.read_exact(&mut mask).map_err(|_| FormatError::Truncated(what))?;
    let mask = mask
        .into_iter()
        .map(|m| match m {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(FormatError::Corrupt(format!("mask byte {x}"))),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    TokenSequence::new(ids, mask, kind).map_err(|e| FormatError::Corrupt(format!("{what}: {e}")).into())
}

pub fn write_corpus(c: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_bytes())?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { video_count: 4, test_videos: 1, ..CorpusConfig::default() }
    }

    #[test]
    fn counts() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.videos.len(), 4);
        assert_eq!(c.captions.len(), 20);
        for v in 0..4 {
            assert_eq!(c.captions_of(v).count(), 5);
        }
        assert_eq!(c.video_indices(Split::Test), vec![3]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_corpus(&CorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.videos, c.videos);
    }

    #[test]
    fn infeasible_configs_name_the_bound() {
        let cases = [
            (CorpusConfig { captions_per_video: 0, ..small() }, "captions_per_video"),
            (CorpusConfig { segments: 13, ..small() }, "segments"),
            (CorpusConfig { video_vocab: 100, ..small() }, "video_vocab"),
            (CorpusConfig { text_vocab: 160, ..small() }, "text_vocab"),
            (CorpusConfig { noise: 1.5, ..small() }, "noise"),
            (CorpusConfig { test_videos: 4, ..small() }, "test_videos"),
        ];
        for (cfg, field) in cases {
            match generate_corpus(&cfg) {
                Err(Error::Config(m)) => assert!(m.contains(field), "{m}"),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn shapes_and_vocab() {
        let cfg = CorpusConfig::default();
        let c = generate_corpus(&cfg).unwrap();
        for v in &c.videos {
            assert_eq!(v.len(), cfg.frames);
            v.check_bounds(cfg.video_vocab, cfg.frames).unwrap();
        }
        for cap in &c.captions {
            assert!(cap.text.len() >= 3 && cap.text.len() <= cfg.words + 1);
            cap.text.check_bounds(cfg.text_vocab, cfg.words + 1).unwrap();
        }
    }

    #[test]
    fn split_hygiene() {
        let c = generate_corpus(&CorpusConfig::default()).unwrap();
        let train: HashSet<&[u32]> =
            c.caption_indices(Split::Train).into_iter().map(|i| c.captions[i].text.ids()).collect();
        for i in c.caption_indices(Split::Test) {
            assert_eq!(c.splits[c.captions[i].video], Split::Test);
            assert!(!train.contains(c.captions[i].text.ids()));
        }
        let train_v: HashSet<&[u32]> = c.video_indices(Split::Train).into_iter().map(|v| c.videos[v].ids()).collect();
        for v in c.video_indices(Split::Test) {
            assert!(!train_v.contains(c.videos[v].ids()));
        }
    }

    #[test]
    fn one_to_many_fidelity() {
        for noise in [0.0, 0.1, 0.2] {
            let c = generate_corpus(&CorpusConfig { noise, ..CorpusConfig::default() }).unwrap();
            let n = c.videos.len();
            let (mut own, mut rival) = (0.0, 0.0);
            for (i, cap) in c.captions.iter().enumerate() {
                own += c.shared_tokens(i, cap.video) as f64;
                rival += (0..n).filter(|&u| u != cap.video).map(|u| c.shared_tokens(i, u)).max().unwrap() as f64;
            }
            let m = c.captions.len() as f64;
            assert!(own / m > rival / m, "noise {noise}: {} vs {}", own / m, rival / m);
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let c = generate_corpus(&small()).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), c);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Corpus::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Corpus::from_bytes(&v2),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 2, supported: 1 }))
        ));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Corpus::from_bytes(&bytes[..cut]), Err(Error::Format(FormatError::Truncated(_)))));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Corpus::from_bytes(&long), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }
}
