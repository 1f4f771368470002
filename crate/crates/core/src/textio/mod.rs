//! Corpus ingestion, vocabulary, tokenization, padded batching and few-shot subsets.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream_id, RngStream};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

const SUBSET_STREAM: u16 = 0x5b;

/// Lowercase, split on whitespace, and split every non-alphanumeric character into its own token.
pub fn split_tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in line.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Every token seen at least `min_freq` times, sorted, after the reserved ids.
    pub fn build<'a, I>(lines: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for tok in split_tokens(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut tokens = vec![PAD.to_string(), UNK.to_string(), CLS.to_string()];
        tokens.extend(counts.into_iter().filter(|(_, c)| *c >= min_freq).map(|(t, _)| t));
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        split_tokens(sentence).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping [CLS] and [PAD].
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS_ID && i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Padded id matrix, `rows × max_len`, with position 0 of every row holding [CLS].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl TokenBatch {
    pub fn tokenize(sentences: &[&str], vocab: &Vocab, max_len: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::invalid("tokenize_batch needs at least one sentence"));
        }
        if max_len < 2 {
            return Err(Error::invalid(format!("max_len {max_len} < 2")));
        }
        let mut ids = Vec::with_capacity(sentences.len() * max_len);
        let mut lengths = Vec::with_capacity(sentences.len());
        for (line, s) in sentences.iter().enumerate() {
            let toks = vocab.encode(s);
            if toks.is_empty() {
                return Err(Error::EmptySentence { line });
            }
            let keep = toks.len().min(max_len - 1);
            ids.push(CLS_ID);
            ids.extend_from_slice(&toks[..keep]);
            ids.extend(std::iter::repeat_n(PAD_ID, max_len - 1 - keep));
            lengths.push(keep + 1);
        }
        Ok(Self { ids, lengths, max_len })
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }

    /// True token count per row, [CLS] included.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// `true` at real tokens, `false` at padding; row-major `rows × max_len`.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&s| (0..self.max_len).map(move |j| j < s))
            .collect()
    }

    /// Same batch narrowed to its longest row; the dropped columns are all padding.
    pub fn trimmed(&self) -> TokenBatch {
        let width = self.lengths.iter().copied().max().unwrap_or(self.max_len).max(2);
        if width == self.max_len {
            return self.clone();
        }
        let ids = (0..self.rows()).flat_map(|i| self.row(i)[..width].to_vec()).collect();
        TokenBatch { ids, lengths: self.lengths.clone(), max_len: width }
    }

    /// Rows `idx` of this batch, in that order.
    pub fn select(&self, idx: &[usize]) -> TokenBatch {
        let mut ids = Vec::with_capacity(idx.len() * self.max_len);
        for &i in idx {
            ids.extend_from_slice(self.row(i));
        }
        TokenBatch { ids, lengths: idx.iter().map(|&i| self.lengths[i]).collect(), max_len: self.max_len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSubset {
    pub fraction: f64,
    pub seed: u64,
    pub indices: Vec<usize>,
}

impl CorpusSubset {
    pub fn draw(corpus_len: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let count = (fraction * corpus_len as f64).round() as usize;
        if count < 1 {
            return Err(Error::invalid(format!(
                "fraction {fraction} of {corpus_len} lines selects no sentences"
            )));
        }
        let indices = if count >= corpus_len {
            (0..corpus_len).collect()
        } else {
            let mut rng = RngStream::new(seed, stream_id(SUBSET_STREAM, 0));
            let mut v = index::sample(rng.as_rng(), corpus_len, count).into_vec();
            v.sort_unstable();
            v
        };
        Ok(Self { fraction, seed, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn select<'a>(&self, corpus: &'a [String]) -> Vec<&'a str> {
        self.indices.iter().map(|&i| corpus[i].as_str()).collect()
    }
}

/// One subset per `(fraction, seed)`, fractions outer.
pub fn few_shot_subsets(corpus_len: usize, fractions: &[f64], seeds: &[u64]) -> Result<Vec<CorpusSubset>> {
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(Error::invalid(format!("duplicate seed {s}")));
        }
    }
    let mut out = Vec::with_capacity(fractions.len() * seeds.len());
    for &f in fractions {
        for &s in seeds {
            out.push(CorpusSubset::draw(corpus_len, f, s)?);
        }
    }
    Ok(out)
}

/// Non-blank lines of a UTF-8 corpus file, trimmed.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trimmed_drops_only_padding() {
        let v = Vocab::build(["a b c d", "e"], 1).unwrap();
        let b = TokenBatch::tokenize(&["a b c", "e"], &v, 10).unwrap();
        let t = b.trimmed();
        assert_eq!(t.max_len(), 4);
        assert_eq!(t.lengths(), b.lengths());
        for i in 0..2 {
            assert_eq!(t.row(i), &b.row(i)[..4]);
            assert!(b.row(i)[4..].iter().all(|&id| id == PAD_ID));
        }
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(split_tokens("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(split_tokens("  the best thing.  "), vec!["the", "best", "thing", "."]);
        assert!(split_tokens("   ").is_empty());
    }

    #[test]
    fn vocab_min_freq() {
        let v = Vocab::build(["a b", "a c"], 1).unwrap();
        assert_eq!(v.len(), 6);
        for t in ["a", "b", "c", PAD, UNK, CLS] {
            assert!(v.contains(t), "{t}");
        }
        assert_eq!((v.id(PAD), v.id(UNK), v.id(CLS)), (PAD_ID, UNK_ID, CLS_ID));

        let v = Vocab::build(["a b", "a c"], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), UNK_ID);
        assert_eq!(v.id("c"), UNK_ID);
        assert_ne!(v.id("a"), UNK_ID);
    }

    #[test]
    fn vocab_rejects_blank_corpus() {
        assert!(matches!(Vocab::build(["", "   ", "\t"], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn batch_padding_and_lengths() {
        let v = Vocab::build(["a b c d"], 1).unwrap();
        let b = TokenBatch::tokenize(&["a b", "a b c d"], &v, 5).unwrap();
        assert_eq!(b.lengths(), &[3, 5]);
        assert_eq!(&b.row(0)[3..], &[PAD_ID, PAD_ID]);
        assert!(b.row(1).iter().all(|&i| i != PAD_ID));
        assert_eq!(b.row(0)[0], CLS_ID);
        assert_eq!(b.pad_mask(), vec![true, true, true, false, false, true, true, true, true, true]);
    }

    #[test]
    fn batch_truncates() {
        let v = Vocab::build(["a b c d e f g h i j"], 1).unwrap();
        let b = TokenBatch::tokenize(&["a b c d e f g h i j"], &v, 4).unwrap();
        assert_eq!(b.lengths(), &[4]);
    }

    #[test]
    fn batch_rejects_empty_sentence() {
        let v = Vocab::build(["a"], 1).unwrap();
        match TokenBatch::tokenize(&["a", ""], &v, 4) {
            Err(Error::EmptySentence { line }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(TokenBatch::tokenize(&["a"], &v, 1).is_err());
    }

    #[test]
    fn subset_size_and_reproducibility() {
        let a = CorpusSubset::draw(1000, 0.1, 7).unwrap();
        let b = CorpusSubset::draw(1000, 0.1, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn full_fraction_ignores_seed() {
        let a = CorpusSubset::draw(50, 1.0, 1).unwrap();
        let b = CorpusSubset::draw(50, 1.0, 2).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn standard_fraction_grid() {
        let subsets = few_shot_subsets(10_000, &[0.001, 0.01, 0.1, 1.0], &[1, 2]).unwrap();
        let sizes: Vec<usize> = subsets.iter().map(CorpusSubset::len).collect();
        assert_eq!(sizes, vec![10, 10, 100, 100, 1000, 1000, 10_000, 10_000]);
    }

    #[test]
    fn distinct_seeds_give_distinct_subsets() {
        let subsets = few_shot_subsets(1000, &[0.1], &[1, 2, 3, 4, 5]).unwrap();
        for i in 0..subsets.len() {
            for j in i + 1..subsets.len() {
                assert_ne!(subsets[i].indices, subsets[j].indices);
            }
        }
    }

    #[test]
    fn subset_errors() {
        assert!(CorpusSubset::draw(100, 0.001, 1).is_err());
        assert!(CorpusSubset::draw(100, 0.0, 1).is_err());
        assert!(CorpusSubset::draw(100, 1.5, 1).is_err());
        assert!(few_shot_subsets(100, &[0.5], &[3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn known_vocab_roundtrip(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
            let line = words.join(" ");
            let v = Vocab::build([line.as_str()], 1).unwrap();
            let ids = v.encode(&line);
            prop_assert_eq!(v.encode(&v.decode(&ids)), ids);
        }
    }
}
