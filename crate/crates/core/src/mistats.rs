//! Mutual-information statistics: the bivariate-normal closed form, two
//! independent nonparametric estimators used as its oracle, joint histograms of
//! paired attention values, and a log-normal goodness-of-fit diagnostic.
//!
//! All quantities are in nats.

use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_KS_THRESHOLD: f64 = 0.05;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Clone, Debug, PartialEq)]
pub struct BivariateSample {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl BivariateSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!("paired lengths differ: {} vs {}", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 points, got {}", x.len())));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i % x.len(), context: "bivariate sample".into() });
        }
        Ok(Self { x, y })
    }

    /// `N` draws from a standard bivariate normal with correlation `rho`.
    pub fn gaussian(n: usize, rho: f64, rng: &mut RngStream) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("correlation {rho} outside [-1, 1]")));
        }
        let c = (1.0 - rho * rho).sqrt();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = (rng.normal(), rng.normal());
            x.push(a);
            y.push(rho * a + c * b);
        }
        Self::new(x, y)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn map_x(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.x.iter().map(|&v| f(v)).collect(), self.y.clone())
    }
}

/// `I = −½·ln(1 − ρ²)` for a bivariate normal with correlation `ρ`.
pub fn gaussian_mi_closed(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::invalid(format!("|rho| = {} must be < 1", rho.abs())));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

/// Digamma at positive integers, `ψ(n) = −γ + Σ_{j<n} 1/j`, for `n` up to `max`.
fn digamma_table(max: usize) -> Vec<f64> {
    let mut t = vec![f64::NAN; max + 1];
    if max >= 1 {
        t[1] = -EULER_GAMMA;
    }
    for n in 2..=max {
        t[n] = t[n - 1] + 1.0 / (n - 1) as f64;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnEstimate {
    pub nats: f64,
    pub k: usize,
    /// Fraction of points whose k-th neighbor sits at distance zero.
    pub zero_distance_fraction: f64,
    pub duplicate_heavy: bool,
    /// Estimate within 10% of its ceiling `ψ(N) − ψ(k)`: one variable determines the other.
    pub saturated: bool,
}

impl KnnEstimate {
    pub fn flagged(&self) -> bool {
        self.duplicate_heavy || self.saturated
    }
}

struct Cand(f64, usize);
impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Kraskov–Stögbauer–Grassberger estimator (first variant, max-norm).
///
/// Neighbors are searched outward along the x-sorted order and pruned once the
/// x-gap alone exceeds the current k-th distance. Ties break by point index.
pub fn mi_estimate_knn(sample: &BivariateSample, k: usize) -> Result<KnnEstimate> {
    let n = sample.len();
    if k == 0 || n < 10 * k {
        return Err(Error::invalid(format!("k-NN estimator needs k >= 1 and N >= 10k (N = {n}, k = {k})")));
    }
    let (xs, ys) = (sample.x(), sample.y());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let sorted_x: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let mut sorted_y = ys.to_vec();
    sorted_y.sort_by(f64::total_cmp);

    let psi = digamma_table(n + 1);
    // Compare on the difference itself so boundary points match `|v - c| < eps` exactly.
    let count_within = |sorted: &[f64], center: f64, eps: f64| -> usize {
        let lo = sorted.partition_point(|&v| v < center && center - v >= eps);
        let hi = sorted.partition_point(|&v| v <= center || v - center < eps);
        hi.saturating_sub(lo)
    };

    let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
    let mut acc = 0.0;
    let mut zero = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        heap.clear();
        let (xi, yi) = (xs[i], ys[i]);
        let consider = |j: usize, heap: &mut BinaryHeap<Cand>| {
            let d = (xs[j] - xi).abs().max((ys[j] - yi).abs());
            let c = Cand(d, j);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        };
        let (mut left, mut right) = (pos, pos + 1);
        loop {
            let bound = if heap.len() == k { heap.peek().unwrap().0 } else { f64::INFINITY };
            let gl = if left > 0 { xi - sorted_x[left - 1] } else { f64::INFINITY };
            let gr = if right < n { sorted_x[right] - xi } else { f64::INFINITY };
            if gl.min(gr) > bound || (gl.is_infinite() && gr.is_infinite()) {
                break;
            }
            if gl <= gr {
                left -= 1;
                consider(order[left], &mut heap);
            } else {
                consider(order[right], &mut heap);
                right += 1;
            }
        }
        let eps = heap.peek().unwrap().0;
        if eps == 0.0 {
            zero += 1;
        }
        // strict inequality; remove the point itself
        let (nx, ny) = if eps == 0.0 {
            (0, 0)
        } else {
            (count_within(&sorted_x, xi, eps) - 1, count_within(&sorted_y, yi, eps) - 1)
        };
        acc += psi[nx + 1] + psi[ny + 1];
    }
    let nats = psi[k] + psi[n] - acc / n as f64;
    let ceiling = psi[n] - psi[k];
    let zero_distance_fraction = zero as f64 / n as f64;
    Ok(KnnEstimate {
        nats,
        k,
        zero_distance_fraction,
        duplicate_heavy: zero_distance_fraction > 0.1,
        saturated: nats >= 0.9 * ceiling,
    })
}

/// `B × B` count grid over two paired variables.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Row-major: `counts[i * bins + j]`, `i` indexes x, `j` indexes y.
    pub counts: Vec<u64>,
    pub x_marginal: Vec<u64>,
    pub y_marginal: Vec<u64>,
}

fn bin_of(v: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

impl JointHistogram {
    pub fn build(x: &[f64], y: &[f64], bins: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if x.len() != y.len() {
            return Err(Error::invalid(format!("paired lengths differ: {} vs {}", x.len(), y.len())));
        }
        let mut counts = vec![0u64; bins * bins];
        let mut x_marginal = vec![0u64; bins];
        let mut y_marginal = vec![0u64; bins];
        for (&a, &b) in x.iter().zip(y) {
            let (i, j) = (bin_of(a, x_range, bins), bin_of(b, y_range, bins));
            counts[i * bins + j] += 1;
            x_marginal[i] += 1;
            y_marginal[j] += 1;
        }
        Ok(Self { bins, x_range, y_range, counts, x_marginal, y_marginal })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.bins + j]
    }

    /// Fraction of mass within `band` bins of the main diagonal.
    pub fn diagonal_fraction(&self, band: usize) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let on: u64 = (0..self.bins)
            .flat_map(|i| (0..self.bins).map(move |j| (i, j)))
            .filter(|&(i, j)| i.abs_diff(j) <= band)
            .map(|(i, j)| self.count(i, j))
            .sum();
        on as f64 / total as f64
    }

    /// Tab-separated grid with a two-line `#` header (axis ranges, bin count).
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# x_range\t{}\t{}\ty_range\t{}\t{}",
            self.x_range.0, self.x_range.1, self.y_range.0, self.y_range.1
        );
        let _ = writeln!(s, "# bins\t{}", self.bins);
        for i in 0..self.bins {
            let row: Vec<String> = (0..self.bins).map(|j| self.count(i, j).to_string()).collect();
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        s
    }

    fn entropy(counts: &[u64], total: f64) -> f64 {
        counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        }).sum()
    }
}

/// Histogram of paired attention values on log scale; both axes share the pooled range.
pub fn joint_histogram(view1: &[f64], view2: &[f64], bins: usize) -> Result<JointHistogram> {
    if view1.is_empty() {
        return Err(Error::invalid("joint histogram of zero values"));
    }
    if view1.len() != view2.len() {
        return Err(Error::invalid(format!("paired lengths differ: {} vs {}", view1.len(), view2.len())));
    }
    if let Some(i) = view1.iter().chain(view2).position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite { index: i % view1.len(), context: "log of non-positive attention".into() });
    }
    let lx: Vec<f64> = view1.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = view2.iter().map(|v| v.ln()).collect();
    let (a, b) = (range(&lx), range(&ly));
    let pooled = (a.0.min(b.0), a.1.max(b.1));
    JointHistogram::build(&lx, &ly, bins, pooled, pooled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedEstimate {
    pub nats: f64,
    pub bins: usize,
    /// One variable's bin determines the other's (`I ≥ 0.99·min(H(X), H(Y))`).
    pub saturated: bool,
}

/// Plug-in MI from a `B × B` histogram over each variable's own `[min, max]`.
pub fn mi_estimate_binned(sample: &BivariateSample, bins: usize) -> Result<BinnedEstimate> {
    let n = sample.len();
    if n < bins * bins {
        return Err(Error::invalid(format!("binned estimator needs N >= B^2 (N = {n}, B = {bins})")));
    }
    let h = JointHistogram::build(sample.x(), sample.y(), bins, range(sample.x()), range(sample.y()))?;
    let total = n as f64;
    let hx = JointHistogram::entropy(&h.x_marginal, total);
    let hy = JointHistogram::entropy(&h.y_marginal, total);
    let hxy = JointHistogram::entropy(&h.counts, total);
    let nats = (hx + hy - hxy).max(0.0);
    let floor = hx.min(hy);
    Ok(BinnedEstimate { nats, bins, saturated: floor > 0.0 && nats >= 0.99 * floor })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LognormalReport {
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    pub skewness: f64,
    pub ks_statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn normal_cdf(z: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc(-(z - mu) / (sigma * std::f64::consts::SQRT_2))
}

/// Fit a normal to `ln(values)` and report skewness and the Kolmogorov–Smirnov distance.
pub fn lognormal_diagnostic(values: &[f64], threshold: f64) -> Result<LognormalReport> {
    if values.len() < 100 {
        return Err(Error::invalid(format!("log-normal diagnostic needs >= 100 values, got {}", values.len())));
    }
    if let Some(i) = values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite { index: i, context: "log-normal diagnostic needs positive values".into() });
    }
    let mut z: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 * mu.abs().max(1.0) {
        return Err(Error::ZeroVariance("log-normal diagnostic"));
    }
    let sigma = var.sqrt();
    let skewness = z.iter().map(|v| ((v - mu) / sigma).powi(3)).sum::<f64>() / n;
    z.sort_by(f64::total_cmp);
    let ks_statistic = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal_cdf(v, mu, sigma);
            (((i + 1) as f64 / n) - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok(LognormalReport { n: values.len(), mu, sigma, skewness, ks_statistic, threshold, pass: ks_statistic < threshold })
}

/// One row of the closed-form vs. estimator agreement check.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub rho: f64,
    pub closed: f64,
    pub knn: f64,
    pub binned: f64,
    pub knn_tolerance: f64,
    pub binned_tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub n: usize,
    pub rows: Vec<OracleRow>,
    /// Set when `n < 10_000`; tolerances are scaled by `sqrt(10_000 / n)`.
    pub widened: Option<f64>,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

pub const ORACLE_RHOS: [f64; 4] = [0.0, 0.3, 0.6, 0.9];

/// Check `closed_form` against the k-NN (k=5) and binned (B=32) estimators on
/// bivariate-normal samples at each `rho`.
///
/// Pass criteria: `|closed − knn| ≤ max(0.02, 5%·closed)`, and the binned
/// estimate within 0.05 of both.
pub fn oracle_suite(
    n: usize,
    seed: u64,
    rhos: &[f64],
    closed_form: &dyn Fn(f64) -> Result<f64>,
) -> Result<OracleReport> {
    let widened = (n < 10_000).then(|| (10_000.0 / n as f64).sqrt());
    let scale = widened.unwrap_or(1.0);
    let mut rows = Vec::with_capacity(rhos.len());
    for (i, &rho) in rhos.iter().enumerate() {
        let mut rng = RngStream::new(seed, i as u64);
        let sample = BivariateSample::gaussian(n, rho, &mut rng)?;
        let closed = closed_form(rho)?;
        let knn = mi_estimate_knn(&sample, DEFAULT_K)?.nats;
        let binned = mi_estimate_binned(&sample, DEFAULT_BINS)?.nats;
        let knn_tolerance = 0.02f64.max(0.05 * closed.abs()) * scale;
        let binned_tolerance = 0.05 * scale;
        let pass = (closed - knn).abs() <= knn_tolerance
            && (binned - closed).abs() <= binned_tolerance
            && (binned - knn).abs() <= binned_tolerance;
        rows.push(OracleRow { rho, closed, knn, binned, knn_tolerance, binned_tolerance, pass });
    }
    Ok(OracleReport { n, rows, widened })
}
