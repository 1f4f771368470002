use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use micse::checkpoint::Checkpoint;
use micse::eval::{pair_cosines, StsDataset, StsPair};

const SMALL: &[&str] = &[
    "layers=2",
    "heads=2",
    "width=16",
    "ffn_width=32",
    "embed_dim=16",
    "max_len=24",
    "samples_per_tile=30",
    "steps=8",
    "batch_size=4",
];

fn micse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micse")).args(args).env_remove("MICSE_SEED").output().expect("spawn micse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic corpus and STS file plus a config pointing at them.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let o = micse(&["synth", "--out", root.to_str().unwrap(), "--sentences", "64", "--pairs", "60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg = String::from("# desk-scale test run\ncorpus = corpus.txt\neval_set = sts.tsv\n");
    for kv in SMALL {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(root.join("run.cfg"), cfg).unwrap();
    (dir, root)
}

fn train(root: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = root.join("run.cfg");
    let out = format!("output_dir={}", root.join(out).display());
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--set", &out];
    for e in extra {
        args.push("--set");
        args.push(e);
    }
    micse(&args)
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let (_d, root) = workspace();
    for out in ["a", "b"] {
        let o = train(&root, out, &["seed=7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(root.join("a/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(root.join("b/model.ckpt")).unwrap());
    let strip = |p: &str| {
        fs::read_to_string(root.join(p)).unwrap().lines().filter(|l| !l.starts_with("# output_dir")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip("a/metrics.tsv"), strip("b/metrics.tsv"));

    let metrics = fs::read_to_string(root.join("a/metrics.tsv")).unwrap();
    let rows: Vec<&str> = metrics.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("step\ttotal\tinfonce\tami"));
    assert_eq!(rows.len(), 1 + 8);
    assert!(metrics.contains("# seed = 7"));
    assert!(fs::read_to_string(root.join("a/config.echo")).unwrap().contains("lambda = 0.0025"));
}

#[test]
fn lambda_zero_run_has_no_ami_term() {
    let (_d, root) = workspace();
    let o = train(&root, "simcse", &["lambda=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(root.join("simcse/metrics.tsv")).unwrap();
    for row in metrics.lines().filter(|l| !l.starts_with('#')).skip(1) {
        assert_eq!(row.split('\t').nth(3), Some("0"), "{row}");
    }
}

#[test]
fn seed_env_below_set() {
    let (_d, root) = workspace();
    let cfg = root.join("run.cfg");
    let run = |env: &str, set: Option<&str>| {
        let out = root.join(format!("env{env}{}", set.unwrap_or("")));
        let mut c = Command::new(env!("CARGO_BIN_EXE_micse"));
        c.args(["train", "--config", cfg.to_str().unwrap(), "--set", &format!("output_dir={}", out.display())]);
        c.args(["--set", "steps=1"]);
        if let Some(s) = set {
            c.args(["--set", s]);
        }
        assert!(c.env("MICSE_SEED", env).output().unwrap().status.success());
        fs::read_to_string(out.join("config.echo")).unwrap()
    };
    assert!(run("11", None).contains("seed = 11\n"));
    assert!(run("11", Some("seed=3")).contains("seed = 3\n"));
}

#[test]
fn missing_corpus_is_a_config_error() {
    let o = micse(&["train", "--set", "corpus=/no/such/corpus.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/corpus.txt"));
    let o = micse(&["train", "--set", "bogus_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"));
}

#[test]
fn eval_prints_rho_and_writes_scatter() {
    let (_d, root) = workspace();
    assert!(train(&root, "m", &[]).status.success());
    let ck = root.join("m/model.ckpt");
    let sts = root.join("sts.tsv");
    let scatter = root.join("scatter.tsv");
    let o = micse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--sts", sts.to_str().unwrap(), "--scatter", scatter.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let rho: f64 = line.trim().parse().unwrap();
    assert!((-1.0..=1.0).contains(&rho));
    assert_eq!(line.trim().split('.').nth(1).map(str::len), Some(4));
    let rows = fs::read_to_string(&scatter).unwrap();
    assert_eq!(rows.lines().count(), 61);
    assert_eq!(rows.lines().next(), Some("gold\tcosine"));

    let o = micse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--sts", sts.to_str().unwrap(), "--sts", sts.to_str().unwrap()]);
    assert!(stdout(&o).lines().last().unwrap().starts_with("mean\t"));
}

#[test]
fn eval_self_consistency_fixture_prints_one() {
    let (_d, root) = workspace();
    assert!(train(&root, "m", &[]).status.success());
    let ck_path = root.join("m/model.ckpt");
    let ck = Checkpoint::load(&ck_path).unwrap();
    let enc = ck.to_encoder(false).unwrap();
    let data = StsDataset::load(&root.join("sts.tsv")).unwrap();
    let cos = pair_cosines(&enc, &ck.vocab, &data).unwrap();
    // gold = cosine exactly; any rescaling can merge cosines an ulp apart into ties
    assert!(cos.iter().all(|&c| c >= 0.0));
    let fixture: Vec<StsPair> = data.pairs().iter().zip(&cos).map(|(p, &c)| StsPair { gold: c, ..p.clone() }).collect();
    let path = root.join("fixture.tsv");
    fs::write(&path, StsDataset::new(fixture).unwrap().to_tsv()).unwrap();
    let o = micse(&["eval", "--checkpoint", ck_path.to_str().unwrap(), "--sts", path.to_str().unwrap()]);
    assert_eq!(stdout(&o).trim(), "1.0000");
}

#[test]
fn eval_malformed_tsv_names_line() {
    let (_d, root) = workspace();
    assert!(train(&root, "m", &["steps=1"]).status.success());
    let bad = root.join("bad.tsv");
    fs::write(&bad, "a dog\ta cat\t3\nmissing columns\t2\n").unwrap();
    let ck = root.join("m/model.ckpt");
    let o = micse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--sts", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.tsv:2"), "{}", stderr(&o));
}

#[test]
fn benchmark_single_cell_and_resume() {
    let (_d, root) = workspace();
    let cfg = root.join("run.cfg");
    let out = format!("output_dir={}", root.join("bench").display());
    let args = ["benchmark", "--config", cfg.to_str().unwrap(), "--set", &out, "--fractions", "0.5", "--seeds", "1", "--variants", "micse"];
    let o = micse(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(root.join("bench/benchmark.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant\tfraction\tmean_rho\tstd_rho\tn_seeds");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("micse\t0.5\t") && lines[1].ends_with("\t-\t1"));

    let again = micse(&args);
    assert!(stderr(&again).contains("0 cells to train, 1 cached"));
    assert_eq!(fs::read_to_string(root.join("bench/benchmark.tsv")).unwrap(), table);
}

#[test]
fn benchmark_parallel_matches_serial() {
    let (_d, root) = workspace();
    let cfg = root.join("run.cfg");
    let run = |dir: &str, jobs: &str| {
        let out = format!("output_dir={}", root.join(dir).display());
        let o = micse(&[
            "benchmark", "--config", cfg.to_str().unwrap(), "--set", &out, "--set", "steps=3",
            "--fractions", "0.5,1", "--seeds", "1,2", "--variants", "micse,positive-only", "--jobs", jobs,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(root.join(dir).join("benchmark.tsv")).unwrap()
    };
    let serial = run("s", "1");
    assert_eq!(serial, run("p", "3"));
    assert_eq!(serial.lines().count(), 5);
}

#[test]
fn benchmark_rejects_unknown_variant() {
    let (_d, root) = workspace();
    let cfg = root.join("run.cfg");
    let o = micse(&["benchmark", "--config", cfg.to_str().unwrap(), "--variants", "simcse"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_writes_one_histogram_per_tile() {
    let (_d, root) = workspace();
    assert!(train(&root, "m", &["steps=2"]).status.success());
    let ck = root.join("m/model.ckpt");
    let out = root.join("an");
    let o = micse(&["analyze", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // two layers, two heads, upper half with head pairs: one tile
    let hists: Vec<_> = fs::read_dir(&out).unwrap().filter_map(|e| {
        let n = e.unwrap().file_name().into_string().unwrap();
        n.ends_with(".hist.tsv").then_some(n)
    }).collect();
    assert_eq!(hists, vec!["tile_00.hist.tsv".to_string()]);
    let table = fs::read_to_string(out.join("mi.tsv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    let eval_out = root.join("an_eval");
    let o = micse(&["analyze", "--checkpoint", ck.to_str().unwrap(), "--out", eval_out.to_str().unwrap(), "--eval-mode"]);
    assert!(o.status.success());
    let row = fs::read_to_string(eval_out.join("mi.tsv")).unwrap().lines().nth(1).unwrap().to_string();
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(cols[3], "1.000000");
    assert_eq!(cols[6], "1.0000");
}

#[test]
fn analyze_missing_checkpoint() {
    let o = micse(&["analyze", "--checkpoint", "/no/model.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn micheck_passes_and_catches_mutation() {
    let o = micse(&["micheck", "--n", "20000"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 4);

    let o = micse(&["micheck", "--n", "20000", "--coefficient", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));

    let o = micse(&["micheck", "--n", "5000"]);
    assert!(stderr(&o).contains("widened"));
}

#[test]
fn subsets_written() {
    let (_d, root) = workspace();
    let corpus = root.join("corpus.txt");
    let out = root.join("subsets");
    let o = micse(&["subsets", "--corpus", corpus.to_str().unwrap(), "--fractions", "0.5,1", "--seeds", "1,2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 4);
    assert_eq!(fs::read_to_string(out.join("subset_f0.5_s1.txt")).unwrap().lines().count(), 32);
}

#[test]
fn help_documents_flags_and_unknown_flags_fail() {
    let cases: &[(&str, &[&str])] = &[
        ("train", &["--config", "--set"]),
        ("eval", &["--checkpoint", "--sts", "--scatter"]),
        ("benchmark", &["--fractions", "--seeds", "--variants", "--cache", "--jobs"]),
        ("analyze", &["--checkpoint", "--sentence", "--eval-mode", "--bins"]),
        ("micheck", &["--n", "--coefficient"]),
        ("synth", &["--out", "--sentences", "--pairs"]),
        ("subsets", &["--corpus", "--fractions", "--seeds"]),
    ];
    for (cmd, flags) in cases {
        let o = micse(&[cmd, "--help"]);
        assert!(o.status.success());
        let help = stdout(&o);
        for f in *flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
        let o = micse(&[cmd, "--no-such-flag"]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
    }
}
