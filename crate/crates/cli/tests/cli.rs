use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kwsnet_core::pronlex::{read_word_list, Lexicon};

const SMALL: [&str; 9] = [
    "vocab.train_keywords=20",
    "vocab.val_keywords=4",
    "vocab.test_short=4",
    "corpus.pretrain_clips=8",
    "corpus.val_clips=6",
    "corpus.test_clips=12",
    "corpus.probe_pairs=2",
    "model.channel_scale=0.125",
    "train.batch_clips=8",
];

fn kwsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kwsnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = kwsnet(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kwsnet(args).status.code().expect("exit code")
}

fn with_small<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in SMALL {
        args.extend(["--set", s]);
    }
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    ok(&with_small(vec!["gen", "--out", s(&out), "--seed", "3", "--test-vocab", "6", "--min-np", "6", "--clips", "30"]));
    out
}

fn data_lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count()
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["dump-config", "--set", "train.epochs=7", "--set", "vocab.short_np=[3,5]"]);
    assert!(first.contains("train.epochs=7\n") && first.contains("model.shortcut=true\n"));
    let f = dir.path().join("run.kv");
    std::fs::write(&f, &first).unwrap();
    assert_eq!(ok(&["dump-config", "--config", s(&f)]), first);
    assert_eq!(code(&["dump-config", "--set", "train.bogus=1"]), 2);
    assert_eq!(code(&["dump-config", "--set", "train.epochs"]), 2);
    assert_eq!(code(&["dump-config", "--config", s(&dir.path().join("absent.kv"))]), 3);
}

#[test]
fn gen_summary_matches_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let text = ok(&with_small(vec!["gen", "--out", s(&out), "--seed", "3", "--test-vocab", "6", "--min-np", "6", "--clips", "30"]));
    for (split, want) in [("pretrain", 8), ("train", 30), ("val", 6), ("test", 12)] {
        let row = text.lines().find(|l| l.starts_with(split)).unwrap();
        let n: usize = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert_eq!(n, want);
        assert_eq!(data_lines(&out.join(format!("{split}.tsv"))), n);
    }
    assert!(text.contains("6 test"), "{text}");
    let lex = Lexicon::bundled().unwrap();
    let test = read_word_list(&std::fs::read_to_string(out.join("vocab/test_keywords.txt")).unwrap());
    assert_eq!(test.len(), 6);
    assert!(test.iter().all(|w| lex.lookup(w).unwrap().min_np() >= 6));

    // same arguments, same bytes
    let again = dir.path().join("again");
    ok(&with_small(vec!["gen", "--out", s(&again), "--seed", "3", "--test-vocab", "6", "--min-np", "6", "--clips", "30"]));
    for f in ["test.tsv", "vocab/test_keywords.txt", "corpus.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    assert_eq!(code(&["gen", "--out", s(&out), "--clips", "0"]), 2);
    let bad = dir.path().join("bad.dict");
    std::fs::write(&bad, "HAPPY\n;;; nothing else\n").unwrap();
    let o = kwsnet(&["gen", "--out", s(&out), "--lexicon", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed"));
    assert_eq!(code(&["gen", "--out", s(&out), "--lexicon", s(&dir.path().join("none.dict"))]), 3);
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep"), "x").unwrap();
    assert_eq!(code(&with_small(vec!["gen", "--out", s(&out)])), 2);
    assert!(!out.join("test.tsv").exists());
}

#[test]
fn train_eval_spot_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_small(dir.path());
    let v = dir.path().join("v");
    let a = dir.path().join("a");
    let train = |out: &Path, m: &str| {
        let args = with_small(vec!["train", "--corpus", s(&corpus), "--out", s(out), "--modality", m, "--seed", "5", "--set", "train.epochs=2", "--set", "train.patience=10"]);
        ok(&args)
    };
    assert!(train(&v, "v").contains("2 epoch(s)"));
    train(&a, "a");
    assert_eq!(data_lines(&v.join("loss.csv")), 3);
    assert!(v.join("ckpt_001.kwt").exists() && v.join("ckpt_001.kwt.json").exists());

    // resuming a finished run trains nothing more
    let resumed = ok(&with_small(vec!["train", "--corpus", s(&corpus), "--out", s(&v), "--resume", "--seed", "5", "--set", "train.epochs=2", "--set", "train.patience=10"]));
    assert!(resumed.contains("2 epoch(s)"), "{resumed}");

    // eval is reproducible and writes the report layout
    let r1 = dir.path().join("r1.csv");
    let r2 = dir.path().join("r2.csv");
    let scores = dir.path().join("scores.tsv");
    ok(&["eval", "--corpus", s(&corpus), "--visual", s(&v), "--out", s(&r1), "--scores", s(&scores)]);
    ok(&["eval", "--corpus", s(&corpus), "--visual", s(&v), "--out", s(&r2)]);
    let report = std::fs::read_to_string(&r1).unwrap();
    assert_eq!(report, std::fs::read_to_string(&r2).unwrap());
    assert!(report.starts_with("metric,keyword,checkpoint,value\n"));
    assert!(report.contains("mAP,__ALL__,mean,") && report.contains("EER,__ALL__,std,"));
    let loose = ok(&["eval", "--corpus", s(&corpus), "--visual", s(&v), "--no-localization"]);
    assert!(loose.starts_with("metric,keyword,checkpoint,value\n"));

    // missing second model for fusion
    assert_eq!(code(&["eval", "--corpus", s(&corpus), "--visual", s(&v), "--modality", "av"]), 3);
    assert_eq!(code(&["eval", "--corpus", s(&corpus), "--visual", s(&dir.path().join("nothing"))]), 3);

    // spot agrees with the score dump for the same pair
    let dump = std::fs::read_to_string(&scores).unwrap();
    let row: Vec<&str> = dump.lines().next().unwrap().split('\t').collect();
    let (kw, clip, score) = (row[0], row[1], row[2].parse::<f64>().unwrap());
    let trace = dir.path().join("trace.csv");
    let map = dir.path().join("map.csv");
    let out = ok(&["spot", "--corpus", s(&corpus), "--visual", s(&v), "--keyword", kw, "--clip", clip, "--trace-csv", s(&trace), "--map-csv", s(&map)]);
    let f: Vec<&str> = out.split_whitespace().collect();
    assert_eq!(f.len(), 3);
    assert_eq!(f[0], (score >= 0.5).to_string());
    assert!((f[1].parse::<f64>().unwrap() - score).abs() < 1e-6);
    assert_eq!(f[2], row[3]);
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("frame,probability\n"));
    let grid = std::fs::read_to_string(&map).unwrap();
    let cells: Vec<f64> = grid.lines().skip(1).flat_map(|l| l.split(',').skip(1).map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect();
    assert!(!cells.is_empty() && cells.iter().all(|x| (0.0..=1.0).contains(x)));

    // sweeps: grid arithmetic and agreement with single-point evaluation
    let snr = ok(&["sweep", "--corpus", s(&corpus), "--audio", s(&a), "--modality", "a", "--snr", "-10:20:5"]);
    assert_eq!(snr.lines().filter(|l| l.contains(",mAP,")).count(), 7);
    let fusion = ok(&["sweep", "--corpus", s(&corpus), "--visual", s(&v), "--audio", s(&a), "--modality", "av", "--fusion", "0:1:0.1"]);
    assert_eq!(fusion.lines().filter(|l| l.contains(",EER,")).count(), 11);
    let single = ok(&["eval", "--corpus", s(&corpus), "--visual", s(&v), "--audio", s(&a), "--modality", "av", "--fusion-weight", "0.3"]);
    let from_eval = single.lines().find(|l| l.starts_with("mAP,__ALL__,mean,")).unwrap().rsplit(',').next().unwrap();
    let from_sweep = fusion.lines().find(|l| l.starts_with("fusion,0.3,mAP,")).unwrap().rsplit(',').next().unwrap();
    assert_eq!(from_eval, from_sweep);
    assert_eq!(code(&["sweep", "--corpus", s(&corpus), "--audio", s(&a), "--modality", "a", "--snr", "5:0:1"]), 2);
}
