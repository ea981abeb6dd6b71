use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use uatvr_core::evaluator::MetricsLine;
use uatvr_core::objectives::Direction;
use uatvr_core::synthcorpus::{read_corpus, Split};
use uatvr_core::tensorfile::TensorFile;

fn uatvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uatvr")).args(args).env("UATVR_THREADS", "2").output().expect("spawn uatvr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    train_stdout: String,
}

/// One corpus and one short training run shared by the tests below.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("corpus.uatc");
        let ckpt = dir.path().join("model.uatv");
        let o = uatvr(&["gen-data", "--out", p(&data), "--seed", "4"]);
        assert!(o.status.success(), "{o:?}");
        let o = uatvr(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&ckpt),
            "--epochs",
            "3",
            "--batch",
            "32",
            "--lr",
            "5e-4",
            "--seed",
            "4",
        ]);
        assert!(o.status.success(), "{o:?}");
        Trained { train_stdout: stdout(&o), _dir: dir, data, ckpt }
    })
}

#[test]
fn help_exits_zero_everywhere() {
    for cmd in ["gen-data", "train", "eval", "embed", "query", "gradcheck", "explain"] {
        let o = uatvr(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
    }
    assert_eq!(uatvr(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(uatvr(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(uatvr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(uatvr(&["eval", "--data", "x"]).status.code(), Some(1));
    assert_eq!(uatvr(&["eval", "--data", "x", "--ckpt", "y", "--direction", "up"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.uatc");
    let o = uatvr(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.uatc"));

    let junk = dir.path().join("junk.uatc");
    std::fs::write(&junk, b"UATCxx").unwrap();
    let o = uatvr(&["train", "--data", p(&junk), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(2));

    let bad = uatvr(&["gen-data", "--out", p(&dir.path().join("c")), "--captions-per-video", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("captions_per_video"));
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.uatc");
    let b = dir.path().join("b.uatc");
    let c = dir.path().join("c.uatc");
    for (f, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let o = uatvr(&["gen-data", "--out", p(f), "--videos", "30", "--test-videos", "5", "--seed", seed]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).lines().nth(1), Some("30\t150\t25\t5"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn train_then_eval_prints_parseable_metrics() {
    let t = trained();
    let lines: Vec<&str> = t.train_stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let m = MetricsLine::parse(l, Direction::T2V).unwrap();
        assert_eq!(m.epoch, Some(i + 1));
        assert!(m.losses.unwrap().total.is_finite());
    }
    for dir in ["t2v", "v2t"] {
        let o = uatvr(&["eval", "--data", p(&t.data), "--ckpt", p(&t.ckpt), "--direction", dir]);
        assert!(o.status.success(), "{o:?}");
        let out = stdout(&o);
        let line = out.lines().nth(1).unwrap();
        let d: Direction = dir.parse().unwrap();
        let m = MetricsLine::parse(line, d).unwrap();
        assert_eq!(m.to_string(), line);
        assert!(m.metrics.r1 <= m.metrics.r5 && m.metrics.r5 <= m.metrics.r10);
        if d == Direction::T2V {
            let last = MetricsLine::parse(lines[3], d).unwrap();
            assert_eq!(m.metrics, last.metrics);
        }
    }
}

#[test]
fn training_twice_gives_identical_bytes() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.uatv");
    let o = uatvr(&[
        "train",
        "--data",
        p(&t.data),
        "--out",
        p(&again),
        "--epochs",
        "3",
        "--batch",
        "32",
        "--lr",
        "5e-4",
        "--seed",
        "4",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), t.train_stdout);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&t.ckpt).unwrap());
}

#[test]
fn query_finds_the_source_of_a_training_caption() {
    let t = trained();
    let corpus = read_corpus(&t.data).unwrap();
    let longest =
        corpus.caption_indices(Split::Train).into_iter().max_by_key(|&c| corpus.captions[c].text.len()).unwrap();
    let cap = &corpus.captions[longest];
    let tokens: Vec<String> = cap.text.ids().iter().map(u32::to_string).collect();
    let o =
        uatvr(&["query", "--ckpt", p(&t.ckpt), "--data", p(&t.data), "--tokens", &tokens.join(","), "--topk", "10"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let hits: Vec<usize> = out.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(hits.len(), 10);
    assert!(hits.contains(&cap.video), "video {} not in {hits:?}", cap.video);
}

#[test]
fn explain_weights_sum_to_one() {
    let t = trained();
    let o = uatvr(&["explain", "--ckpt", p(&t.ckpt), "--data", p(&t.data), "--pair", "3,0"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    for kind in ["word", "frame"] {
        let total: f64 = out
            .lines()
            .filter(|l| l.starts_with(&format!("{kind}\t")))
            .map(|l| l.split('\t').nth(3).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{kind}: {total}");
    }
    assert!(out.lines().next().unwrap().starts_with("score\t"));
    let o = uatvr(&["explain", "--ckpt", p(&t.ckpt), "--data", p(&t.data), "--pair", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn embed_writes_a_tensor_file() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("emb.uate");
    let o = uatvr(&["embed", "--data", p(&t.data), "--ckpt", p(&t.ckpt), "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let f = TensorFile::read(&out, *b"UATE").unwrap();
    assert_eq!(f.entries["video.mu"].dims, vec![50, 32]);
    assert_eq!(f.entries["text.log_var"].dims, vec![250, 32]);
    assert_eq!(f.entries["video.tokens"].dims, vec![50, 15, 32]);
    assert_eq!(f.u64s("video.index").unwrap()[0], 200);
}

#[test]
fn gradcheck_passes_on_a_fresh_install() {
    let o = uatvr(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let (label, value) = last.split_once('\t').unwrap();
    assert_eq!(label, "maxRelErr");
    assert!(value.parse::<f64>().unwrap() <= 1e-5, "{last}");
}

#[test]
fn gradcheck_with_a_coarse_step_fails_numerically() {
    let o = uatvr(&["gradcheck", "--eps", "0.3", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(3));
}
