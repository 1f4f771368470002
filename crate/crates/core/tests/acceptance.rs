//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria run concurrently (each builds its own models); lines print in order.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use micse::checkpoint::Checkpoint;
use micse::encoder::{Encoder, EncoderConfig, Mode};
use micse::eval::{average_ranks, fewshot_benchmark, spearman, NoCache, StsDataset, Variant};
use micse::losses::{joint_loss, sample_indices, InfoNceVariant, LossConfig, MiForm, SliceSpec, StepStreams};
use micse::mistats::{gaussian_mi_closed, oracle_suite, ORACLE_RHOS};
use micse::momentum::{ema_update, MomentumEncoder, NegativeQueue};
use micse::numerics::{gradcheck, stream_id, DiffTensor, RngStream, MASKED};
use micse::textio::{synth, CorpusSubset, TokenBatch, Vocab};
use micse::trainer::{train, StepMetrics, TrainConfig, TrainRun};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Outcome;

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

fn mi_oracles() -> Outcome {
    let t = Instant::now();
    let report = match oracle_suite(100_000, 0, &ORACLE_RHOS, &gaussian_mi_closed) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let elapsed = t.elapsed();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("rho {}: closed {:.4} knn {:.4} binned {:.4}", r.rho, r.closed, r.knn, r.binned))
        .collect();
    let ok = report.pass() && within(elapsed, 30);
    Outcome::new(ok, format!("{}; {:.1}s", rows.join("; "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn weighted_sum_check(name: &str, x: &DiffTensor, op: &dyn Fn(&DiffTensor) -> micse::Result<DiffTensor>) -> (String, f64) {
    // random weights make every output entry matter to the scalar
    let shape = op(x).expect("primitive evaluates").shape().to_vec();
    let mut rng = RngStream::new(99, 0);
    let n: usize = shape.iter().product::<usize>().max(1);
    let w = DiffTensor::constant(&shape, (0..n).map(|_| rng.normal()).collect()).unwrap();
    let err = gradcheck(|t| Ok(op(t)?.mul(&w)?.sum()), x, 1e-6).unwrap_or(f64::INFINITY);
    (name.to_string(), err)
}

fn rand_param(shape: &[usize], seed: u64) -> DiffTensor {
    let mut rng = RngStream::new(seed, 1);
    let n: usize = shape.iter().product();
    DiffTensor::param(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn positive_param(shape: &[usize], seed: u64) -> DiffTensor {
    let mut rng = RngStream::new(seed, 2);
    let n: usize = shape.iter().product();
    DiffTensor::param(shape, (0..n).map(|_| 0.2 + rng.uniform()).collect()).unwrap()
}

fn primitive_errors() -> Vec<(String, f64)> {
    let a = rand_param(&[3, 4], 1);
    let b = rand_param(&[4, 5], 2);
    let bb = rand_param(&[2, 4, 3], 3);
    let batched = rand_param(&[2, 3, 4], 4);
    let row = rand_param(&[4], 5);
    let pos = positive_param(&[3, 4], 6);
    let gamma = rand_param(&[4], 7);
    let beta = rand_param(&[4], 8);
    let table = rand_param(&[6, 3], 9);
    let mask: Vec<f64> = (0..12).map(|i| if i % 4 == 3 { MASKED } else { 0.0 }).collect();
    let mut out = vec![
        weighted_sum_check("matmul", &a, &|x| x.matmul(&b)),
        weighted_sum_check("matmul rhs", &b, &|x| a.matmul(x)),
        weighted_sum_check("matmul batched", &batched, &|x| x.matmul(&bb)),
        weighted_sum_check("matmul batched rhs", &bb, &|x| batched.matmul(x)),
        weighted_sum_check("add", &a, &|x| x.add(&pos)),
        weighted_sum_check("add broadcast", &row, &|x| a.add(x)),
        weighted_sum_check("sub", &a, &|x| x.sub(&pos)),
        weighted_sum_check("sub broadcast", &row, &|x| a.sub(x)),
        weighted_sum_check("mul", &a, &|x| x.mul(&pos)),
        weighted_sum_check("mul broadcast", &row, &|x| a.mul(x)),
        weighted_sum_check("scale", &a, &|x| Ok(x.scale(-1.7))),
        weighted_sum_check("neg", &a, &|x| Ok(x.neg())),
        weighted_sum_check("add_scalar", &a, &|x| Ok(x.add_scalar(0.3))),
        weighted_sum_check("softmax", &a, &|x| x.softmax(None)),
        weighted_sum_check("softmax masked", &a, &|x| x.softmax(Some(&mask))),
        weighted_sum_check("layer_norm", &a, &|x| x.layer_norm(&gamma, &beta, 1e-12)),
        weighted_sum_check("layer_norm gamma", &gamma, &|g| a.layer_norm(g, &beta, 1e-12)),
        weighted_sum_check("layer_norm beta", &beta, &|b| a.layer_norm(&gamma, b, 1e-12)),
        weighted_sum_check("gelu", &a, &|x| Ok(x.gelu())),
        weighted_sum_check("tanh", &a, &|x| Ok(x.tanh())),
        weighted_sum_check("exp", &a, &|x| Ok(x.exp())),
        weighted_sum_check("log", &pos, &|x| Ok(x.log())),
        weighted_sum_check("clamp_min", &a, &|x| Ok(x.clamp_min(0.05))),
        weighted_sum_check("embedding", &table, &|t| DiffTensor::embedding(t, &[0, 2, 2, 5], &[2, 2])),
        weighted_sum_check("dropout", &a, &|x| x.dropout(0.3, &mut RngStream::new(4, 4))),
        weighted_sum_check("concat", &a, &|x| DiffTensor::concat(&[x.clone(), pos.clone(), x.clone()])),
        weighted_sum_check("reshape", &a, &|x| x.reshape(&[2, 6])),
        weighted_sum_check("permute", &batched, &|x| x.permute(&[2, 0, 1])),
        weighted_sum_check("transpose", &a, &|x| x.transpose()),
        weighted_sum_check("sum", &a, &|x| Ok(x.sum())),
        weighted_sum_check("mean", &a, &|x| Ok(x.mean())),
        weighted_sum_check("sum_last", &batched, &|x| x.sum_last()),
        weighted_sum_check("cosine", &a, &|x| x.cosine(&pos)),
        weighted_sum_check("cosine rhs", &pos, &|x| a.cosine(x)),
        weighted_sum_check("gather", &a, &|x| x.gather(&[0, 5, 5, 11])),
    ];
    out.sort_by(|x, y| y.1.total_cmp(&x.1));
    out
}

fn joint_loss_errors() -> Vec<(String, f64)> {
    let sentences = ["the small dog runs near the lake.", "a red car stops behind the old bus."];
    let vocab = Vocab::build(sentences, 1).unwrap();
    let enc_cfg = EncoderConfig { layers: 4, heads: 4, width: 8, ffn_width: 16, max_len: 12, embed_dim: 6, ..EncoderConfig::toy(vocab.len()) };
    let enc = Encoder::new(enc_cfg, 5).unwrap();
    let batch = TokenBatch::tokenize(&sentences, &vocab, 12).unwrap().trimmed();
    let cfg = LossConfig {
        tau: 0.05,
        // large enough that the AMI term moves the gradient well above the check's resolution
        lambda: 0.5,
        slice: SliceSpec::upper_half(4),
        samples_per_tile: 40,
        variant: InfoNceVariant::default(),
        mi_form: MiForm::Log,
    };
    let streams = || StepStreams {
        view1: RngStream::new(3, stream_id(1, 1)),
        view2: RngStream::new(3, stream_id(2, 1)),
        momentum: RngStream::new(3, stream_id(3, 1)),
        sampling: RngStream::new(3, stream_id(4, 1)),
    };
    let mom = MomentumEncoder::new(&enc, 0.995, 0.3).unwrap();
    let mut queue = NegativeQueue::new(4, 6);
    let first = joint_loss(&batch, &enc, Some(&mom), Some(&queue), &cfg, streams()).unwrap();
    queue.enqueue(first.momentum_embeddings.as_ref().unwrap()).unwrap();
    enc.params()
        .iter()
        .map(|p| {
            let e = gradcheck(|_| Ok(joint_loss(&batch, &enc, Some(&mom), Some(&queue), &cfg, streams())?.total), &p.tensor, 1e-5)
                .unwrap_or(f64::INFINITY);
            (p.name.clone(), e)
        })
        .collect()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let prim = primitive_errors();
    let joint = joint_loss_errors();
    let elapsed = t.elapsed();
    let worst_prim = &prim[0];
    let worst_joint = joint.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("params");
    let ok = prim.iter().all(|p| p.1 < 1e-6) && joint.iter().all(|p| p.1 < 1e-4) && within(elapsed, 60);
    Outcome::new(
        ok,
        format!(
            "{} primitives, worst {} {:.2e}; joint loss over {} tensors, worst {} {:.2e}; {:.1}s",
            prim.len(),
            worst_prim.0,
            worst_prim.1,
            joint.len(),
            worst_joint.0,
            worst_joint.1,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn sampling() -> Outcome {
    let mut rng = RngStream::new(0, 0);
    let idx = sample_indices(8, 5, 10_000, &mut rng).unwrap();
    let in_pad = idx.iter().filter(|&&i| i / 8 >= 5 || i % 8 >= 5).count();

    let draws = 100_000;
    let mut counts = [0f64; 64];
    for i in sample_indices(8, 8, draws, &mut RngStream::new(0, 1)).unwrap() {
        counts[i] += 1.0;
    }
    let e = draws as f64 / 64.0;
    let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    // upper 1% point of chi-square with 63 degrees of freedom
    let critical = 92.01;
    Outcome::new(
        in_pad == 0 && chi2 < critical,
        format!("{in_pad} of 10000 draws in padding; chi2 {chi2:.2} < {critical} (63 dof, alpha 0.01)"),
    )
}

// ---------------------------------------------------------------- 4

fn param(name: &str, v: Vec<f64>, trainable: bool) -> micse::encoder::Param {
    let tensor = if trainable {
        DiffTensor::param(&[v.len()], v).unwrap()
    } else {
        DiffTensor::constant(&[v.len()], v).unwrap()
    };
    micse::encoder::Param { name: name.into(), tensor }
}

fn momentum_and_queue() -> Outcome {
    let m = 0.995;
    let mut rng = RngStream::new(4, 0);
    let online = vec![param("w", vec![0.0; 5], true), param("pooler.weight", vec![0.0; 3], true)];
    let target = vec![param("w", vec![0.0; 5], false), param("pooler.weight", vec![0.0; 3], false)];
    let mut reference = vec![0.0; 5];
    let mut recurrence_exact = true;
    let mut pooler_exact = true;
    for _ in 0..100 {
        for p in &online {
            p.tensor.value_mut().iter_mut().for_each(|v| *v = rng.normal());
        }
        ema_update(&online, &target, m).unwrap();
        for (r, o) in reference.iter_mut().zip(online[0].tensor.value().iter()) {
            *r = m * *r + (1.0 - m) * o;
        }
        recurrence_exact &= target[0].tensor.to_vec() == reference;
        pooler_exact &= target[1].tensor.to_vec() == online[1].tensor.to_vec();
    }
    // constant online weights: p_t = o + m^t (p_0 - o)
    let fixed = vec![param("w", vec![2.0], true)];
    let slow = vec![param("w", vec![-1.0], false)];
    for _ in 0..100 {
        ema_update(&fixed, &slow, m).unwrap();
    }
    let closed = 2.0 + m.powi(100) * (-1.0 - 2.0);
    let closed_err = (slow[0].tensor.item() - closed).abs();

    let mut fifo_ok = true;
    for trial in 0..1000u64 {
        let mut r = RngStream::new(trial, 7);
        let (cap, width) = (r.below(12), 1 + r.below(4));
        let mut q = NegativeQueue::new(cap, width);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..r.below(40) {
            let rows = 1 + r.below(5);
            let vals: Vec<f64> = (0..rows * width).map(|_| r.normal()).collect();
            q.enqueue(&DiffTensor::constant(&[rows, width], vals.clone()).unwrap()).unwrap();
            for row in vals.chunks(width) {
                if cap == 0 {
                    continue;
                }
                if model.len() == cap {
                    model.pop_front();
                }
                model.push_back(row.to_vec());
            }
            fifo_ok &= q.snapshot() == model.iter().cloned().collect::<Vec<_>>();
        }
    }

    let e = DiffTensor::param(&[2, 3], vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.5]).unwrap();
    let mut q = NegativeQueue::new(4, 3);
    q.enqueue(&e).unwrap();
    let qt = q.as_tensor().unwrap();
    e.cosine(&qt).unwrap().sum().backward().unwrap();
    let detached = !qt.requires_grad() && !qt.has_grad();

    Outcome::new(
        recurrence_exact && pooler_exact && closed_err < 1e-14 && fifo_ok && detached,
        format!(
            "ema bit-exact {recurrence_exact}, pooler copied {pooler_exact}, closed-form error {closed_err:.1e}; \
             fifo matches reference over 1000 sequences {fifo_ok}; queue detached {detached}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn attention() -> Outcome {
    let corpus = synth::corpus(200, 9);
    let vocab = Vocab::build(corpus.iter().map(String::as_str), 1).unwrap();
    let enc = Encoder::new(EncoderConfig::toy(vocab.len()), 2).unwrap();
    let mut rng = RngStream::new(5, 0);
    let mut worst = 0.0f64;
    let mut rows_checked = 0usize;
    for b in 0..10u64 {
        let size = 1 + rng.below(8);
        let picks: Vec<&str> = (0..size).map(|_| corpus[rng.below(corpus.len())].as_str()).collect();
        let batch = TokenBatch::tokenize(&picks, &vocab, 32).unwrap();
        let out = enc.encode(&batch, Mode::Train(RngStream::new(b, 3))).unwrap();
        for layer in &out.attention.layers {
            let n = *layer.shape().last().unwrap();
            for row in layer.value().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows_checked += 1;
            }
        }
    }
    let batch = TokenBatch::tokenize(&[corpus[0].as_str(), corpus[1].as_str()], &vocab, 32).unwrap();
    let a = enc.encode(&batch, Mode::Eval).unwrap();
    let b = enc.encode(&batch, Mode::Eval).unwrap();
    let same_emb = a.embeddings.to_vec() == b.embeddings.to_vec();
    let same_att = a.attention.layers.iter().zip(&b.attention.layers).all(|(x, y)| x.to_vec() == y.to_vec());
    Outcome::new(
        worst < 1e-5 && same_emb && same_att,
        format!("{rows_checked} rows, max |sum - 1| = {worst:.1e}; eval mode bit-identical {}", same_emb && same_att),
    )
}

// ---------------------------------------------------------------- 6

fn toy_corpus() -> (Vec<String>, Vocab) {
    let corpus = synth::corpus(512, 0);
    let vocab = Vocab::build(corpus.iter().map(String::as_str), 1).unwrap();
    (corpus, vocab)
}

fn mean_of(rows: &[StepMetrics], f: fn(&StepMetrics) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn smoke_training() -> Outcome {
    let t = Instant::now();
    let (corpus, vocab) = toy_corpus();
    let sentences: Vec<&str> = corpus.iter().map(String::as_str).collect();
    let cfg = TrainConfig { seed: 11, ..TrainConfig::toy() };
    let run = |c: &TrainConfig| -> TrainRun { train(&sentences, &vocab, c, &mut |_| Ok(())).expect("toy run") };
    let a = run(&cfg);
    let b = run(&cfg);
    let elapsed = t.elapsed();
    let m = &a.metrics;
    let (first, last) = (m[0].total, m[m.len() - 1].total);
    let (mi_head, mi_tail) = (mean_of(&m[..20], |r| r.mean_mi), mean_of(&m[m.len() - 20..], |r| r.mean_mi));
    let bytes = |r: &TrainRun| Checkpoint::from_encoder(&r.encoder, &vocab, cfg.steps, cfg.to_meta()).to_bytes().unwrap();
    let identical = bytes(&a) == bytes(&b);
    let ok = last < first && mi_tail > mi_head && identical && within(elapsed, 300);
    Outcome::new(
        ok,
        format!(
            "(a) total loss {first:.3} -> {last:.3}; (b) mean MI first 20 {mi_head:.4}, last 20 {mi_tail:.4}; \
             (c) checkpoints byte-identical {identical}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn held_out_sts() -> StsDataset {
    StsDataset::from_triples(synth::sts_pairs(500, 77)).unwrap()
}

fn ablation() -> Outcome {
    let (corpus, vocab) = toy_corpus();
    let sts = [held_out_sts()];
    let base = TrainConfig::toy();
    let seeds = [1u64, 2];
    let table =
        match fewshot_benchmark(&corpus, &vocab, &sts, &[0.1], &seeds, &[Variant::MiCse, Variant::AmiOff], &base, &mut NoCache) {
            Ok(t) => t,
            Err(e) => return Outcome::new(false, format!("error: {e}")),
        };
    let on = table.row("micse", 0.1).unwrap();
    let off = table.row("ami-off", 0.1).unwrap();

    // same seed and subset, AMI on vs off: the logged trajectories must split within 10 steps
    let subset = CorpusSubset::draw(corpus.len(), 0.1, 1).unwrap();
    let sentences = subset.select(&corpus);
    let short = TrainConfig { steps: 10, seed: 1, ..base };
    let with = train(&sentences, &vocab, &Variant::MiCse.apply(&short), &mut |_| Ok(())).unwrap();
    let without = train(&sentences, &vocab, &Variant::AmiOff.apply(&short), &mut |_| Ok(())).unwrap();
    let split = with.metrics.iter().zip(&without.metrics).find(|(a, b)| a.param_norm != b.param_norm).map(|(a, _)| a.step);
    let same_start = with.metrics[0].infonce == without.metrics[0].infonce;

    let margin_ok = on.mean() >= off.mean() - 0.02;
    let fmt_std = |s: Option<f64>| s.map_or("-".into(), |v| format!("{v:.4}"));
    Outcome::new(
        margin_ok && split.is_some() && same_start,
        format!(
            "AMI on rho {:.4} (sd {}), AMI off rho {:.4} (sd {}), margin {:+.4} vs -0.02; \
             parameter norms split at step {}, identical step-1 InfoNCE {same_start}",
            on.mean(),
            fmt_std(on.std()),
            off.mean(),
            fmt_std(off.std()),
            on.mean() - off.mean(),
            split.map_or("never".into(), |s| s.to_string())
        ),
    )
}

// ---------------------------------------------------------------- 8

fn positive_only() -> Outcome {
    let (corpus, vocab) = toy_corpus();
    let sts = [held_out_sts()];
    let base = TrainConfig::toy();
    let variants = [Variant::PositiveOnly, Variant::AmiOffMocoOff, Variant::PositiveOnlyAmi, Variant::MocoOff];
    let grid = |v: &[Variant]| fewshot_benchmark(&corpus, &vocab, &sts, &[0.1], &[1, 2], v, &base, &mut NoCache);
    let table = match grid(&variants) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let repeat = match grid(&[Variant::PositiveOnly]) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, format!("repeat error: {e}")),
    };
    let first = table.row("positive-only", 0.1).unwrap();
    let deterministic =
        repeat.rows[0].rhos.iter().zip(&first.rhos).all(|(a, b)| a.to_bits() == b.to_bits());
    let row = |n: &str| table.row(n, 0.1).unwrap().mean();
    let gap = row("ami-off-moco-off") - row("positive-only");
    let gap_ami = row("moco-off") - row("positive-only-ami");
    Outcome::new(
        deterministic && table.rows.len() == 4,
        format!(
            "rows written {}; deterministic {deterministic}; with minus without negatives: {gap:+.4} (AMI off), {gap_ami:+.4} (AMI on)",
            table.rows.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

/// Rank by counting, then textbook Pearson; shares nothing with the library's sort-based ranks.
fn oracle_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn spearman_oracle() -> Outcome {
    let mut rng = RngStream::new(21, 0);
    let (mut compared, mut degenerate, mut tie_free, mut worst) = (0, 0, 0, 0.0f64);
    let mut ok = true;
    for _ in 0..1000 {
        let n = 2 + rng.below(11);
        // small integer range forces frequent ties
        let levels = 2 + rng.below(8);
        let x: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 * 0.5).collect();
        match (spearman(&x, &y), oracle_spearman(&x, &y)) {
            (Ok(r), Some(o)) => {
                compared += 1;
                worst = worst.max((r - o).abs());
                ok &= (r - o).abs() <= 1e-12;
                let no_ties = |v: &[f64]| {
                    let mut s = v.to_vec();
                    s.sort_by(f64::total_cmp);
                    s.windows(2).all(|w| w[0] != w[1])
                };
                if no_ties(&x) && no_ties(&y) {
                    tie_free += 1;
                    let d2: f64 = average_ranks(&x).iter().zip(average_ranks(&y)).map(|(a, b)| (a - b).powi(2)).sum();
                    let nf = n as f64;
                    let classic = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
                    worst = worst.max((r - classic).abs());
                    ok &= (r - classic).abs() <= 1e-12;
                }
            }
            (Err(_), None) => degenerate += 1,
            _ => ok = false,
        }
    }
    Outcome::new(
        ok,
        format!("{compared} vectors compared ({tie_free} tie-free also vs 1 - 6 sum d^2 / n(n^2 - 1)), {degenerate} zero-variance rejected by both; max diff {worst:.1e}"),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("MI oracle equivalence", mi_oracles),
        ("gradient correctness", gradients),
        ("sampling invariants", sampling),
        ("momentum and queue exactness", momentum_and_queue),
        ("attention invariants", attention),
        ("training smoke test", smoke_training),
        ("ablation behavior", ablation),
        ("positive-only mode", positive_only),
        ("spearman correctness", spearman_oracle),
    ];
    let t = Instant::now();
    // the two criteria with runtime limits run alone; the rest share the machine
    let timed = 2;
    let mut handles: Vec<_> = Vec::new();
    for &(_, f) in &criteria[..timed] {
        let h = std::thread::spawn(f);
        while !h.is_finished() {
            std::thread::sleep(Duration::from_millis(20));
        }
        handles.push(h);
    }
    handles.extend(criteria[timed..].iter().map(|&(_, f)| std::thread::spawn(f)));
    let mut failed = 0;
    for (i, ((name, _), h)) in criteria.iter().zip(handles).enumerate() {
        let outcome = h.join().unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !outcome.pass {
            failed += 1;
        }
        println!("criterion {} {}: {} | {}", i + 1, name, if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    }
    println!("acceptance: {} passed, {} failed in {:.1}s", criteria.len() - failed, failed, t.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
