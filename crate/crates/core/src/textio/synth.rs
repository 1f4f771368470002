//! Desk-scale synthetic text: a topical toy corpus and an STS-style pair set
//! whose gold score is `5 × Jaccard(token sets)`.

use std::collections::BTreeSet;

use crate::numerics::{stream_id, RngStream};
use crate::textio::split_tokens;

const CORPUS_STREAM: u16 = 0x5c;
const STS_STREAM: u16 = 0x5d;

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "one", "no"];
const PREPOSITIONS: &[&str] = &["near", "under", "with", "behind", "over", "inside", "beside", "after"];
const CONNECTIVES: &[&str] = &["and", "while", "because", "so", "but"];

const TOPICS: &[(&[&str], &[&str], &[&str])] = &[
    (
        &["dog", "cat", "horse", "bird", "fox", "rabbit", "cow", "sheep"],
        &["runs", "sleeps", "eats", "jumps", "hides", "barks", "watches", "chases"],
        &["small", "brown", "wild", "lazy", "quick", "furry", "young", "old"],
    ),
    (
        &["car", "train", "bus", "truck", "bike", "plane", "ship", "taxi"],
        &["drives", "stops", "arrives", "leaves", "turns", "crashes", "waits", "speeds"],
        &["red", "fast", "loud", "empty", "heavy", "new", "broken", "electric"],
    ),
    (
        &["chef", "soup", "bread", "cake", "kitchen", "oven", "pasta", "salad"],
        &["cooks", "bakes", "serves", "tastes", "burns", "mixes", "slices", "boils"],
        &["hot", "fresh", "sweet", "salty", "warm", "spicy", "crisp", "cold"],
    ),
    (
        &["player", "team", "ball", "coach", "goal", "match", "crowd", "field"],
        &["wins", "loses", "kicks", "scores", "trains", "cheers", "throws", "passes"],
        &["strong", "tired", "happy", "angry", "proud", "skilled", "final", "local"],
    ),
    (
        &["child", "teacher", "book", "school", "student", "lesson", "class", "desk"],
        &["reads", "writes", "learns", "teaches", "draws", "studies", "listens", "asks"],
        &["bright", "quiet", "curious", "long", "short", "easy", "hard", "open"],
    ),
    (
        &["river", "tree", "mountain", "sky", "rain", "forest", "lake", "storm"],
        &["flows", "grows", "falls", "shines", "rises", "freezes", "moves", "darkens"],
        &["tall", "green", "deep", "clear", "dark", "calm", "blue", "wet"],
    ),
];

fn pick<'a>(rng: &mut RngStream, words: &[&'a str]) -> &'a str {
    words[rng.below(words.len())]
}

fn clause(rng: &mut RngStream, topic: usize, out: &mut Vec<&'static str>) {
    let (nouns, verbs, adjs) = TOPICS[topic];
    out.push(pick(rng, DETERMINERS));
    if rng.uniform() < 0.6 {
        out.push(pick(rng, adjs));
    }
    out.push(pick(rng, nouns));
    out.push(pick(rng, verbs));
    if rng.uniform() < 0.7 {
        out.push(pick(rng, PREPOSITIONS));
        out.push(pick(rng, DETERMINERS));
        if rng.uniform() < 0.4 {
            out.push(pick(rng, adjs));
        }
        out.push(pick(rng, nouns));
    }
}

fn sentence_words(rng: &mut RngStream) -> Vec<&'static str> {
    let topic = rng.below(TOPICS.len());
    let mut words = Vec::with_capacity(16);
    clause(rng, topic, &mut words);
    if rng.uniform() < 0.35 {
        words.push(pick(rng, CONNECTIVES));
        let second = if rng.uniform() < 0.7 { topic } else { rng.below(TOPICS.len()) };
        clause(rng, second, &mut words);
    }
    words.push(".");
    words
}

fn render(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if s.ends_with(" .") {
        s.truncate(s.len() - 2);
        s.push('.');
    }
    s
}

/// `n` topical sentences, deterministic in `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = RngStream::new(seed, stream_id(CORPUS_STREAM, 0));
    (0..n).map(|_| render(&sentence_words(&mut rng))).collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = split_tokens(a).into_iter().collect();
    let sb: BTreeSet<String> = split_tokens(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// `n` sentence pairs with gold score `5 × Jaccard`.
///
/// Second sentences are edits of the first (word substitution at a random rate,
/// reordering) or unrelated draws, so gold scores cover the whole `[0, 5]` range.
pub fn sts_pairs(n: usize, seed: u64) -> Vec<(String, String, f64)> {
    let mut rng = RngStream::new(seed, stream_id(STS_STREAM, 0));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let first = sentence_words(&mut rng);
        let mode = rng.uniform();
        let second: Vec<&str> = if mode < 0.2 {
            sentence_words(&mut rng)
        } else {
            let rate = rng.uniform() * 0.8;
            let mut w: Vec<&str> = first
                .iter()
                .map(|&t| {
                    if t != "." && rng.uniform() < rate {
                        let (nouns, verbs, adjs) = TOPICS[rng.below(TOPICS.len())];
                        match rng.below(3) {
                            0 => pick(&mut rng, nouns),
                            1 => pick(&mut rng, verbs),
                            _ => pick(&mut rng, adjs),
                        }
                    } else {
                        t
                    }
                })
                .collect();
            if mode > 0.85 && w.len() > 3 {
                let body = w.len() - 1;
                w[..body].rotate_left(1 + rng.below(body - 1));
            }
            w
        };
        let (a, b) = (render(&first), render(&second));
        let score = 5.0 * jaccard(&a, &b);
        out.push((a, b, score));
    }
    out
}
