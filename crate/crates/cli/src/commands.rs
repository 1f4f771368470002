use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use micse::checkpoint::Checkpoint;
use micse::config::{RunConfig, SEED_ENV};
use micse::encoder::Mode;
use micse::eval::{
    cosine_scatter, fewshot_benchmark, run_cell, scatter_tsv, sts_eval, CellCache, CellKey, DirCache, StsDataset,
    Variant,
};
use micse::losses::{ami_tile_mi, slice_attention, MiForm, SliceSpec};
use micse::mistats::{joint_histogram, mi_estimate_knn, oracle_suite, BivariateSample, DEFAULT_K, ORACLE_RHOS};
use micse::numerics::{stream_id, DiffTensor, RngStream};
use micse::textio::{few_shot_subsets, read_corpus, synth, TokenBatch, Vocab};
use micse::trainer::{metrics_tsv, train_with_checkpoints, CheckpointPlan, TrainConfig};

use crate::ConfigArgs;

pub const DEMO_SENTENCE: &str = "the best thing you can do is to know your stuff.";
const ANALYZE_STREAM: u16 = 0xa0;

/// Exit 1 for bad input or configuration, 2 once work has started.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn config(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), env.as_deref(), &args.set).map_err(config)
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<String>, Vocab), CliError> {
    let path = cfg.corpus.as_deref().expect("checked by check_inputs");
    let corpus = read_corpus(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let vocab = Vocab::build(corpus.iter().map(String::as_str), cfg.min_freq).map_err(config)?;
    Ok((corpus, vocab))
}

pub fn train(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    cfg.check_inputs(true, false).map_err(config)?;
    let (corpus, vocab) = load_corpus(&cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_file(&out.join("config.echo"), &cfg.echo())?;

    let metrics_path = out.join("metrics.tsv");
    let mut log = fs::File::create(&metrics_path).map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    log.write_all(metrics_tsv(&cfg.echo_lines(), &[]).as_bytes()).map_err(runtime)?;
    let plan = CheckpointPlan { path: out.join("model.ckpt"), meta: cfg.train.to_meta() };
    let sentences: Vec<&str> = corpus.iter().map(String::as_str).collect();
    let run = train_with_checkpoints(&sentences, &vocab, &cfg.train, Some(&plan), &mut |m| {
        writeln!(log, "{}", m.tsv_row()).map_err(|e| micse::Error::Io { path: metrics_path.clone(), source: e })
    })
    .map_err(runtime)?;
    let last = run.metrics.last().expect("at least one step");
    println!(
        "trained {} steps: total {:.4} infonce {:.4} ami {:.6} mean_mi {:.4}",
        last.step, last.total, last.infonce, last.ami, last.mean_mi
    );
    println!("checkpoint {}", plan.path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, micse::encoder::Encoder), CliError> {
    let ck = Checkpoint::load(path).map_err(config)?;
    let enc = ck.to_encoder(false).map_err(config)?;
    Ok((ck, enc))
}

pub fn eval(checkpoint: &Path, sts: &[PathBuf], scatter: Option<&Path>) -> Result<(), CliError> {
    if scatter.is_some() && sts.len() != 1 {
        return Err(config("--scatter needs exactly one --sts file"));
    }
    let (ck, enc) = load_checkpoint(checkpoint)?;
    let sets = sts.iter().map(|p| StsDataset::load(p).map_err(config)).collect::<Result<Vec<_>, _>>()?;
    let mut rhos = Vec::with_capacity(sets.len());
    for (path, set) in sts.iter().zip(&sets) {
        let rho = sts_eval(&enc, &ck.vocab, set).map_err(runtime)?;
        if sets.len() > 1 {
            println!("{}\t{rho:.4}", path.display());
        }
        rhos.push(rho);
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    if sets.len() > 1 {
        println!("mean\t{mean:.4}");
    } else {
        println!("{mean:.4}");
    }
    if let Some(path) = scatter {
        let rows = cosine_scatter(&enc, &ck.vocab, &sets[0]).map_err(runtime)?;
        write_file(path, &scatter_tsv(&rows))?;
    }
    Ok(())
}

pub fn benchmark(
    args: &ConfigArgs,
    fractions: &[f64],
    seeds: &[u64],
    variants: &[String],
    out: Option<PathBuf>,
    cache: Option<PathBuf>,
    jobs: usize,
) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    cfg.check_inputs(true, true).map_err(config)?;
    let variants = variants.iter().map(|v| Variant::parse(v).map_err(config)).collect::<Result<Vec<_>, _>>()?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(config(format!("fraction {f} outside (0, 1]")));
    }
    let (corpus, vocab) = load_corpus(&cfg)?;
    let sets = cfg.eval_sets.iter().map(|p| StsDataset::load(p).map_err(config)).collect::<Result<Vec<_>, _>>()?;
    create_dir(&cfg.output_dir)?;
    let cache_dir = cache.unwrap_or_else(|| cfg.output_dir.join("cells"));
    let mut cells = DirCache::new(&cache_dir).map_err(runtime)?;

    let mut pending = Vec::new();
    for &variant in &variants {
        for &fraction in fractions {
            for &seed in seeds {
                let key = CellKey { variant, fraction, seed };
                if cells.get(&key).is_none() {
                    pending.push(key);
                }
            }
        }
    }
    eprintln!("{} cells to train, {} cached", pending.len(), variants.len() * fractions.len() * seeds.len() - pending.len());
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(pending.len().max(1)) {
            scope.spawn(|| {
                let mut local = DirCache::new(&cache_dir).expect("cache directory exists");
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pending.len() || failure.lock().expect("lock").is_some() {
                        break;
                    }
                    let key = &pending[i];
                    match run_cell(&corpus, &vocab, &sets, key, &cfg.train).and_then(|rho| {
                        local.put(key, rho)?;
                        Ok(rho)
                    }) {
                        Ok(rho) => eprintln!("{}: rho {rho:.4}", key.file_stem()),
                        Err(e) => {
                            *failure.lock().expect("lock") = Some(format!("{}: {e}", key.file_stem()));
                        }
                    }
                }
            });
        }
    });
    if let Some(msg) = failure.into_inner().expect("lock") {
        return Err(runtime(msg));
    }
    let table =
        fewshot_benchmark(&corpus, &vocab, &sets, fractions, seeds, &variants, &cfg.train, &mut cells).map_err(runtime)?;
    let tsv = table.to_tsv();
    let path = out.unwrap_or_else(|| cfg.output_dir.join("benchmark.tsv"));
    write_file(&path, &tsv)?;
    print!("{tsv}");
    Ok(())
}

pub fn analyze(
    checkpoint: &Path,
    sentence: &str,
    eval_mode: bool,
    seed: u64,
    bins: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (ck, enc) = load_checkpoint(checkpoint)?;
    if bins < 2 {
        return Err(config("--bins must be at least 2"));
    }
    let batch = TokenBatch::tokenize(&[sentence], &ck.vocab, enc.config().max_len).map_err(config)?.trimmed();
    let slice = TrainConfig::from_meta(&ck.meta)
        .map(|t| t.slice)
        .unwrap_or_else(|| SliceSpec::upper_half(enc.config().layers));
    let mode = |k: u64| if eval_mode { Mode::Eval } else { Mode::Train(RngStream::new(seed, stream_id(ANALYZE_STREAM, k))) };
    let v1 = enc.encode(&batch, mode(1)).map_err(runtime)?;
    let v2 = enc.encode(&batch, mode(2)).map_err(runtime)?;
    let t1 = slice_attention(&v1.attention, 0, &slice).map_err(config)?;
    let t2 = slice_attention(&v2.attention, 0, &slice).map_err(config)?;
    let (n, s) = (batch.max_len(), batch.lengths()[0]);
    let block: Vec<usize> = (0..s).flat_map(|q| (0..s).map(move |k| q * n + k)).collect();
    let groups = enc.config().heads / slice.head_group;

    create_dir(out)?;
    let mut table = String::from("tile\tlayer\theads\trho\tmi\tmi_knn\tdiagonal_fraction\n");
    for (r, (a, b)) in t1.iter().zip(&t2).enumerate() {
        let x: Vec<f64> = block.iter().map(|&i| a.value()[i]).collect();
        let y: Vec<f64> = block.iter().map(|&i| b.value()[i]).collect();
        let tx = DiffTensor::constant(&[x.len()], x.clone()).map_err(runtime)?;
        let ty = DiffTensor::constant(&[y.len()], y.clone()).map_err(runtime)?;
        let mi = ami_tile_mi(&tx, &ty, MiForm::Log).map_err(runtime)?;
        let knn = if x.len() >= 10 * DEFAULT_K {
            let logs = |v: &[f64]| v.iter().map(|w| w.max(1e-12).ln()).collect::<Vec<_>>();
            let sample = BivariateSample::new(logs(&x), logs(&y)).map_err(runtime)?;
            format!("{:.6}", mi_estimate_knn(&sample, DEFAULT_K).map_err(runtime)?.nats)
        } else {
            "NA".into()
        };
        let hist = joint_histogram(&x, &y, bins).map_err(runtime)?;
        write_file(&out.join(format!("tile_{r:02}.hist.tsv")), &hist.to_tsv())?;
        let layer = slice.first_layer + r / groups;
        let h0 = (r % groups) * slice.head_group;
        table.push_str(&format!(
            "{r}\t{layer}\t{h0}-{}\t{:.6}\t{:.6}\t{knn}\t{:.4}\n",
            h0 + slice.head_group - 1,
            mi.rho,
            mi.value.item(),
            hist.diagonal_fraction(0)
        ));
    }
    write_file(&out.join("mi.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn micheck(n: usize, seed: u64, coefficient: f64) -> Result<(), CliError> {
    if n < 50 {
        return Err(config(format!("--n {n} too small for k-NN estimation")));
    }
    let closed = move |rho: f64| -> micse::Result<f64> {
        if !(rho.abs() < 1.0) {
            return Err(micse::Error::InvalidArgument(format!("|rho| = {} must be < 1", rho.abs())));
        }
        // + 0.0 turns the -0.0 at rho = 0 into 0
        Ok(coefficient * (1.0 - rho * rho).ln() + 0.0)
    };
    let report = oracle_suite(n, seed, &ORACLE_RHOS, &closed).map_err(runtime)?;
    if let Some(w) = report.widened {
        eprintln!("warning: n = {n} < 10000; tolerances widened by x{w:.2}");
    }
    println!("rho\tclosed\tknn\tbinned\tknn_tol\tbinned_tol\tresult");
    for r in &report.rows {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            r.rho,
            r.closed,
            r.knn,
            r.binned,
            r.knn_tolerance,
            r.binned_tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if report.pass() {
        Ok(())
    } else {
        Err(runtime("closed-form MI disagrees with the estimators"))
    }
}

pub fn synth(out: &Path, sentences: usize, pairs: usize, seed: u64) -> Result<(), CliError> {
    if sentences == 0 || pairs < 2 {
        return Err(config("need at least 1 sentence and 2 pairs"));
    }
    create_dir(out)?;
    let mut corpus = synth::corpus(sentences, seed).join("\n");
    corpus.push('\n');
    write_file(&out.join("corpus.txt"), &corpus)?;
    let data = StsDataset::from_triples(synth::sts_pairs(pairs, seed)).map_err(runtime)?;
    write_file(&out.join("sts.tsv"), &data.to_tsv())?;
    println!("{}\n{}", out.join("corpus.txt").display(), out.join("sts.tsv").display());
    Ok(())
}

pub fn subsets(corpus: &Path, fractions: &[f64], seeds: &[u64], out: &Path) -> Result<(), CliError> {
    let lines = read_corpus(corpus).map_err(config)?;
    let subsets = few_shot_subsets(lines.len(), fractions, seeds).map_err(config)?;
    create_dir(out)?;
    for s in subsets {
        let path = out.join(format!("subset_f{}_s{}.txt", s.fraction, s.seed));
        let body: String = s.indices.iter().map(|i| format!("{i}\n")).collect();
        write_file(&path, &body)?;
        println!("{}\t{}", path.display(), s.len());
    }
    Ok(())
}
