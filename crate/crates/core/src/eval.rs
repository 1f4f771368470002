//! STS-style evaluation: cosine similarity of pair embeddings against gold scores,
//! Spearman rank correlation, and the few-shot benchmark grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::textio::{split_tokens, CorpusSubset, TokenBatch, Vocab};
use crate::trainer::{train, TrainConfig};

const EVAL_BATCH: usize = 64;

/// Fractional ranks, 1-based; ties share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!("spearman needs two equal-length series of >= 2, got {} and {}", x.len(), y.len())));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i % x.len(), context: "spearman input".into() });
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or(Error::ZeroVariance("spearman ranks"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StsPair {
    pub first: String,
    pub second: String,
    pub gold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StsDataset {
    pairs: Vec<StsPair>,
}

impl StsDataset {
    pub fn new(pairs: Vec<StsPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if split_tokens(&p.first).is_empty() || split_tokens(&p.second).is_empty() {
                return Err(Error::EmptySentence { line: i + 1 });
            }
            if !p.gold.is_finite() || !(0.0..=5.0).contains(&p.gold) {
                return Err(Error::invalid(format!("pair {}: gold score {} outside [0, 5]", i + 1, p.gold)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_triples(triples: Vec<(String, String, f64)>) -> Result<Self> {
        Self::new(triples.into_iter().map(|(first, second, gold)| StsPair { first, second, gold }).collect())
    }

    /// Tab-separated `first TAB second TAB score` lines; blank lines and `#` comments skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.display().to_string(), line: i + 1, msg };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
            }
            let gold: f64 = cols[2].trim().parse().map_err(|_| err(format!("bad score {:?}", cols[2])))?;
            if !gold.is_finite() || !(0.0..=5.0).contains(&gold) {
                return Err(err(format!("score {gold} outside [0, 5]")));
            }
            if split_tokens(cols[0]).is_empty() || split_tokens(cols[1]).is_empty() {
                return Err(err("empty sentence".into()));
            }
            pairs.push(StsPair { first: cols[0].trim().into(), second: cols[1].trim().into(), gold });
        }
        if pairs.is_empty() {
            return Err(Error::Parse { path: origin.display().to_string(), line: 0, msg: "no sentence pairs".into() });
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{}", p.first, p.second, p.gold);
        }
        s
    }

    pub fn pairs(&self) -> &[StsPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gold(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.gold).collect()
    }
}

/// Eval-mode embeddings of `sentences`, row-major `[N, U]`.
pub fn embed(encoder: &Encoder, vocab: &Vocab, sentences: &[&str]) -> Result<Vec<Vec<f64>>> {
    if encoder.config().vocab_size != vocab.len() {
        return Err(Error::invalid(format!(
            "vocabulary of {} tokens does not match encoder's {}",
            vocab.len(),
            encoder.config().vocab_size
        )));
    }
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EVAL_BATCH) {
        let batch = TokenBatch::tokenize(chunk, vocab, encoder.config().max_len)?.trimmed();
        let e = encoder.encode(&batch, Mode::Eval)?.embeddings;
        let width = e.shape()[1];
        out.extend(e.value().chunks(width).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of each pair's two embeddings, in dataset order.
pub fn pair_cosines(encoder: &Encoder, vocab: &Vocab, data: &StsDataset) -> Result<Vec<f64>> {
    let firsts: Vec<&str> = data.pairs.iter().map(|p| p.first.as_str()).collect();
    let seconds: Vec<&str> = data.pairs.iter().map(|p| p.second.as_str()).collect();
    let a = embed(encoder, vocab, &firsts)?;
    let b = embed(encoder, vocab, &seconds)?;
    Ok(a.iter().zip(&b).map(|(x, y)| cosine(x, y)).collect())
}

/// Spearman ρ between pair cosines and gold scores.
pub fn sts_eval(encoder: &Encoder, vocab: &Vocab, data: &StsDataset) -> Result<f64> {
    spearman(&pair_cosines(encoder, vocab, data)?, &data.gold())
}

/// Unweighted mean of per-file ρ.
pub fn sts_eval_many(encoder: &Encoder, vocab: &Vocab, sets: &[StsDataset]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("no evaluation sets"));
    }
    let mut sum = 0.0;
    for s in sets {
        sum += sts_eval(encoder, vocab, s)?;
    }
    Ok(sum / sets.len() as f64)
}

/// `(gold, cosine)` per pair, stably sorted by gold score.
pub fn cosine_scatter(encoder: &Encoder, vocab: &Vocab, data: &StsDataset) -> Result<Vec<(f64, f64)>> {
    let mut rows: Vec<(f64, f64)> = data.gold().into_iter().zip(pair_cosines(encoder, vocab, data)?).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rows)
}

pub fn scatter_tsv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("gold\tcosine\n");
    for (g, c) in rows {
        let _ = writeln!(s, "{g}\t{c}");
    }
    s
}

/// Ablation rows of the few-shot grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// AMI + InfoNCE + momentum queue.
    MiCse,
    /// InfoNCE with in-batch negatives only.
    AmiOff,
    /// AMI + InfoNCE, no momentum queue.
    MocoOff,
    AmiOffMocoOff,
    /// No negatives, no AMI.
    PositiveOnly,
    PositiveOnlyAmi,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::MiCse,
        Variant::AmiOff,
        Variant::MocoOff,
        Variant::AmiOffMocoOff,
        Variant::PositiveOnly,
        Variant::PositiveOnlyAmi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MiCse => "micse",
            Variant::AmiOff => "ami-off",
            Variant::MocoOff => "moco-off",
            Variant::AmiOffMocoOff => "ami-off-moco-off",
            Variant::PositiveOnly => "positive-only",
            Variant::PositiveOnlyAmi => "positive-only-ami",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let (ami, moco, positive_only) = match self {
            Variant::MiCse => (true, true, false),
            Variant::AmiOff => (false, true, false),
            Variant::MocoOff => (true, false, false),
            Variant::AmiOffMocoOff => (false, false, false),
            Variant::PositiveOnly => (false, false, true),
            Variant::PositiveOnlyAmi => (true, false, true),
        };
        c.ami = ami;
        c.moco = moco;
        c.variant.positive_only = positive_only;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub variant: String,
    pub fraction: f64,
    pub rhos: Vec<f64>,
}

impl BenchmarkRow {
    pub fn mean(&self) -> f64 {
        self.rhos.iter().sum::<f64>() / self.rhos.len() as f64
    }

    /// Sample standard deviation; `None` below two seeds.
    pub fn std(&self) -> Option<f64> {
        let n = self.rhos.len();
        if n < 2 {
            return None;
        }
        let m = self.mean();
        Some((self.rhos.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tfraction\tmean_rho\tstd_rho\tn_seeds\n");
        for r in &self.rows {
            let std = r.std().map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{}\t{}", r.variant, r.fraction, r.mean(), std, r.rhos.len());
        }
        s
    }

    pub fn row(&self, variant: &str, fraction: f64) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.variant == variant && r.fraction == fraction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellKey {
    pub variant: Variant,
    pub fraction: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn file_stem(&self) -> String {
        format!("{}_f{}_s{}", self.variant.name(), self.fraction, self.seed)
    }
}

/// Store for finished cells so an interrupted grid can resume.
pub trait CellCache {
    fn get(&self, key: &CellKey) -> Option<f64>;
    fn put(&mut self, key: &CellKey, rho: f64) -> Result<()>;
}

pub struct NoCache;

impl CellCache for NoCache {
    fn get(&self, _: &CellKey) -> Option<f64> {
        None
    }

    fn put(&mut self, _: &CellKey, _: f64) -> Result<()> {
        Ok(())
    }
}

/// One `<key>.rho` file per finished cell holding the exact value.
pub struct DirCache {
    dir: PathBuf,
}

impl DirCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &CellKey) -> PathBuf {
        self.dir.join(format!("{}.rho", key.file_stem()))
    }
}

impl CellCache for DirCache {
    fn get(&self, key: &CellKey) -> Option<f64> {
        fs::read_to_string(self.path(key)).ok()?.trim().parse().ok()
    }

    fn put(&mut self, key: &CellKey, rho: f64) -> Result<()> {
        let path = self.path(key);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, format!("{rho:?}\n")).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Train and score one `(variant, fraction, seed)` cell; the step count is fixed by `base`.
pub fn run_cell(
    corpus: &[String],
    vocab: &Vocab,
    eval_sets: &[StsDataset],
    key: &CellKey,
    base: &TrainConfig,
) -> Result<f64> {
    let subset = CorpusSubset::draw(corpus.len(), key.fraction, key.seed)?;
    let mut cfg = key.variant.apply(base);
    cfg.seed = key.seed;
    let run = train(&subset.select(corpus), vocab, &cfg, &mut |_| Ok(()))?;
    sts_eval_many(&run.encoder, vocab, eval_sets)
}

/// Full grid, variants outer, fractions inner, one row per `(variant, fraction)`.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_benchmark(
    corpus: &[String],
    vocab: &Vocab,
    eval_sets: &[StsDataset],
    fractions: &[f64],
    seeds: &[u64],
    variants: &[Variant],
    base: &TrainConfig,
    cache: &mut dyn CellCache,
) -> Result<BenchmarkTable> {
    if fractions.is_empty() || seeds.is_empty() || variants.is_empty() {
        return Err(Error::invalid("benchmark grid is empty"));
    }
    let mut table = BenchmarkTable::default();
    for &variant in variants {
        for &fraction in fractions {
            let mut rhos = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let key = CellKey { variant, fraction, seed };
                let rho = match cache.get(&key) {
                    Some(r) => r,
                    None => {
                        let r = run_cell(corpus, vocab, eval_sets, &key, base)?;
                        cache.put(&key, r)?;
                        r
                    }
                };
                rhos.push(rho);
            }
            table.rows.push(BenchmarkRow { variant: variant.name().into(), fraction, rhos });
        }
    }
    Ok(table)
}
