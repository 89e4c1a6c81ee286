//! Word clustering: k-means with k-means++ seeding over tag-distribution
//! vectors (the task-specific zeta/eta/tau maps) and a greedy predictive
//! exchange over class-bigram likelihood (the distributional rho map).

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::features::{write_cluster_entries, ClusterKind};
use crate::stats::TagDistributionTable;

/// Words with their aligned, equal-dimension real vectors.
#[derive(Debug, Clone)]
pub struct PointSet {
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl PointSet {
    pub fn new(words: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if words.len() != vectors.len() {
            return Err(Error::contract("PointSet: words/vectors not aligned"));
        }
        let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::contract("PointSet: inconsistent vector dimensions"));
        }
        Ok(PointSet { words, vectors, dim })
    }

    /// Builds a point set from a distribution table, checking that every
    /// vector is a probability distribution (sums to 1 within 1e-9).
    pub fn from_distributions(table: &TagDistributionTable) -> Result<Self> {
        let mut words = Vec::with_capacity(table.len());
        let mut vectors = Vec::with_capacity(table.len());
        for (word, vec) in table.iter() {
            let sum: f64 = vec.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "distribution vector for `{word}` sums to {sum}, not 1"
                )));
            }
            words.push(word.to_string());
            vectors.push(vec.to_vec());
        }
        PointSet::new(words, vectors)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Number of distinct vectors under exact (bitwise) equality.
    pub fn distinct_vectors(&self) -> usize {
        let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(self.len());
        for v in &self.vectors {
            seen.insert(v.iter().map(|x| x.to_bits()).collect());
        }
        seen.len()
    }
}

/// Euclidean distance between two equal-dimension vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "euclidean_distance: dimension mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(sq_dist(a, b).sqrt())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        // 256 classes, 100 Lloyd iterations.
        KMeansConfig {
            k: 256,
            iterations: 100,
            seed: 0,
        }
    }
}

/// A k-means clustering outcome. `assignment[i]` is the cluster of
/// `words[i]`, every word sits in its nearest center (ties to the lower
/// cluster id), and `distortion` is the sum of squared distances to the
/// assigned centers.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub words: Vec<String>,
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    pub distortion: f64,
    /// Distortion after the initial assignment and after each Lloyd
    /// iteration.
    pub distortion_history: Vec<f64>,
}

impl ClusterResult {
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.words
            .iter()
            .map(String::as_str)
            .zip(self.assignment.iter().copied())
    }
}

/// k-means++ seeding: the first center is uniform over the points, every
/// following center is drawn with probability proportional to the squared
/// distance to its nearest already-chosen center.
pub fn kmeanspp_seed<R: Rng>(points: &PointSet, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::contract("cannot seed centers on an empty point set"));
    }
    let distinct = points.distinct_vectors();
    if k == 0 || k > distinct {
        return Err(Error::contract(format!(
            "k = {k} must be in 1..={distinct} (distinct points)"
        )));
    }
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centers = vec![points.vector(first).to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.vector(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        debug_assert!(total > 0.0, "no distinct point left to seed");
        let draw = rng.random_range(0.0..total);
        let mut cum = 0.0;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            cum += w;
            if draw < cum {
                chosen = Some(i);
                break;
            }
        }
        // Floating-point edge: fall back to the last point with weight.
        let chosen = chosen.unwrap_or_else(|| {
            d2.iter()
                .rposition(|&w| w > 0.0)
                .expect("total weight was positive")
        });
        let center = points.vector(chosen).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(points.vector(i), &center);
            if nd < *d {
                *d = nd;
            }
        }
        centers.push(center);
    }
    Ok(centers)
}

/// Assigns every point to its nearest center (squared Euclidean distance,
/// ties to the lower center id) and records that distance.
fn assign(points: &PointSet, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let results: Vec<(usize, f64)> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let v = points.vector(i);
            let mut best = 0usize;
            let mut best_d = sq_dist(v, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(v, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            (best, best_d)
        })
        .collect();
    results.into_iter().unzip()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Runs at most `config.iterations` iterations (assign to nearest center,
/// recompute centers as means), stopping early once assignments are stable.
/// Empty clusters are reseeded to the point farthest from its assigned
/// center. Distortion never increases across iterations.
pub fn kmeans_cluster(points: &PointSet, config: &KMeansConfig) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::contract("cannot cluster an empty point set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centers = kmeanspp_seed(points, config.k, &mut rng)?;
    let (mut assignment, mut dists) = assign(points, &centers);
    let mut history = vec![dists.iter().sum::<f64>()];

    for _ in 0..config.iterations {
        // Means of the current assignment.
        let dim = points.dim();
        let mut sums = vec![vec![0.0f64; dim]; config.k];
        let mut counts = vec![0usize; config.k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(points.vector(i)) {
                *s += x;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            if *count > 0 {
                for s in sums[c].iter_mut() {
                    *s /= *count as f64;
                }
            }
        }
        // Reseed empty clusters at the farthest point; zero its distance so
        // several empty clusters pick distinct points.
        for c in 0..config.k {
            if counts[c] == 0 {
                let mut far = 0usize;
                for i in 1..points.len() {
                    if dists[i] > dists[far] {
                        far = i;
                    }
                }
                sums[c] = points.vector(far).to_vec();
                dists[far] = 0.0;
            }
        }
        centers = sums;
        let (new_assignment, new_dists) = assign(points, &centers);
        history.push(new_dists.iter().sum::<f64>());
        let stable = new_assignment == assignment;
        assignment = new_assignment;
        dists = new_dists;
        if stable {
            break;
        }
    }

    Ok(ClusterResult {
        words: points.words().to_vec(),
        assignment,
        centers,
        k: config.k,
        distortion: *history.last().expect("history is never empty"),
        distortion_history: history,
    })
}

/// Writes a k-means result in the shared cluster file format.
pub fn write_cluster_map<W: Write>(
    result: &ClusterResult,
    kind: ClusterKind,
    sink: W,
) -> Result<()> {
    write_cluster_entries(kind, result.k, result.entries(), sink)
}

/// Word unigram and word-bigram counts over a raw corpus, restricted to
/// words whose frequency exceeds a threshold. Bigrams are counted between
/// consecutive in-vocabulary tokens within a sentence.
#[derive(Debug, Clone)]
pub struct BigramStats {
    vocab: Vec<String>,
    unigrams: Vec<u64>,
    /// `((left, right), count)` over vocabulary indices, sorted by pair so
    /// every accumulation over bigrams runs in one fixed order.
    pairs: Vec<((usize, usize), u64)>,
    /// Per word: in-neighbors `(v, N(v, w))` excluding `w` itself.
    left_of: Vec<Vec<(usize, u64)>>,
    /// Per word: out-neighbors `(v, N(w, v))` excluding `w` itself.
    right_of: Vec<Vec<(usize, u64)>>,
    /// `N(w, w)`.
    self_counts: Vec<u64>,
}

impl BigramStats {
    /// Two passes: count token frequencies, keep words with count strictly
    /// above `threshold`, then count bigrams over consecutive kept tokens.
    pub fn from_sentences<'a, I>(sentences: I, threshold: u64) -> Self
    where
        I: IntoIterator<Item = &'a Sentence> + Copy,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for sentence in sentences {
            for token in &sentence.tokens {
                *freq.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut vocab: Vec<String> = freq
            .iter()
            .filter(|&(_, &c)| c > threshold)
            .map(|(w, _)| w.to_string())
            .collect();
        vocab.sort_unstable();
        let word_index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let unigrams: Vec<u64> = vocab.iter().map(|w| freq[w.as_str()]).collect();

        let mut pairs: HashMap<(usize, usize), u64> = HashMap::new();
        for sentence in sentences {
            for pair in sentence.tokens.windows(2) {
                if let (Some(&l), Some(&r)) = (
                    word_index.get(pair[0].as_str()),
                    word_index.get(pair[1].as_str()),
                ) {
                    *pairs.entry((l, r)).or_insert(0) += 1;
                }
            }
        }
        Self::from_parts(vocab, unigrams, pairs)
    }

    /// Builds stats directly from word-bigram counts (mainly for tests and
    /// synthetic corpora). The vocabulary is every mentioned word, sorted.
    pub fn from_bigrams(bigrams: &[(&str, &str, u64)]) -> Self {
        let mut vocab: Vec<String> = bigrams
            .iter()
            .flat_map(|(l, r, _)| [l.to_string(), r.to_string()])
            .collect();
        vocab.sort_unstable();
        vocab.dedup();
        let word_index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let mut pairs: HashMap<(usize, usize), u64> = HashMap::new();
        let mut unigrams = vec![0u64; vocab.len()];
        for &(l, r, c) in bigrams {
            let li = word_index[l];
            let ri = word_index[r];
            *pairs.entry((li, ri)).or_insert(0) += c;
            unigrams[li] += c;
        }
        Self::from_parts(vocab, unigrams, pairs)
    }

    /// Builds stats from pre-counted data: a sorted vocabulary, per-word
    /// frequencies and `(left, right) -> count` bigrams over vocabulary
    /// indices.
    pub fn from_counts(
        vocab: Vec<String>,
        unigrams: Vec<u64>,
        pairs: HashMap<(usize, usize), u64>,
    ) -> Self {
        Self::from_parts(vocab, unigrams, pairs)
    }

    fn from_parts(
        vocab: Vec<String>,
        unigrams: Vec<u64>,
        pairs: HashMap<(usize, usize), u64>,
    ) -> Self {
        let mut pairs: Vec<((usize, usize), u64)> = pairs.into_iter().collect();
        pairs.sort_unstable();
        let n = vocab.len();
        let mut left_of: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        let mut right_of: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        let mut self_counts = vec![0u64; n];
        for &((l, r), c) in &pairs {
            if l == r {
                self_counts[l] += c;
            } else {
                left_of[r].push((l, c));
                right_of[l].push((r, c));
            }
        }
        for adj in left_of.iter_mut().chain(right_of.iter_mut()) {
            adj.sort_unstable();
        }
        BigramStats {
            vocab,
            unigrams,
            pairs,
            left_of,
            right_of,
            self_counts,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn unigram(&self, i: usize) -> u64 {
        self.unigrams[i]
    }
}

/// An exchange clustering outcome (assignment only, no centers).
#[derive(Debug, Clone)]
pub struct ExchangeResult {
    pub words: Vec<String>,
    pub assignment: Vec<usize>,
    pub k: usize,
    /// Final class-bigram log-likelihood objective.
    pub objective: f64,
    /// Objective after the initial partition and after each accepted move.
    pub objective_history: Vec<f64>,
}

impl ExchangeResult {
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.words
            .iter()
            .map(String::as_str)
            .zip(self.assignment.iter().copied())
    }
}

#[inline]
fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

struct ClassCounts {
    k: usize,
    m: Vec<f64>, // k x k class-bigram counts
    left: Vec<f64>,
    right: Vec<f64>,
}

impl ClassCounts {
    fn build(stats: &BigramStats, assignment: &[usize], k: usize) -> Self {
        let mut counts = ClassCounts {
            k,
            m: vec![0.0; k * k],
            left: vec![0.0; k],
            right: vec![0.0; k],
        };
        for &((l, r), c) in &stats.pairs {
            let (cl, cr) = (assignment[l], assignment[r]);
            counts.m[cl * k + cr] += c as f64;
            counts.left[cl] += c as f64;
            counts.right[cr] += c as f64;
        }
        counts
    }

    fn objective(&self) -> f64 {
        let m_term: f64 = self.m.iter().map(|&x| phi(x)).sum();
        let l_term: f64 = self.left.iter().map(|&x| phi(x)).sum();
        let r_term: f64 = self.right.iter().map(|&x| phi(x)).sum();
        m_term - l_term - r_term
    }
}

/// The class-bigram log-likelihood objective (up to a clustering-independent
/// constant) of an assignment:
/// `sum phi(N(c1,c2)) - sum phi(N_left(c)) - sum phi(N_right(c))` with
/// `phi(x) = x ln x`.
pub fn exchange_objective(stats: &BigramStats, assignment: &[usize], k: usize) -> Result<f64> {
    if assignment.len() != stats.vocab_len() {
        return Err(Error::contract(
            "exchange_objective: assignment length does not match vocabulary",
        ));
    }
    if let Some(&c) = assignment.iter().find(|&&c| c >= k) {
        return Err(Error::contract(format!("class id {c} outside 0..{k}")));
    }
    Ok(ClassCounts::build(stats, assignment, k).objective())
}

/// Greedy predictive exchange over the class-bigram likelihood.
///
/// Starts from a seeded random K-partition and repeatedly moves each word to
/// the class that maximizes the objective, sweeping the vocabulary until no
/// move helps or `iterations` sweeps have run. The objective never decreases
/// over accepted moves.
pub fn exchange_cluster(
    stats: &BigramStats,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<ExchangeResult> {
    if stats.is_empty() {
        return Err(Error::contract("cannot cluster an empty vocabulary"));
    }
    if k == 0 || k > stats.vocab_len() {
        return Err(Error::contract(format!(
            "k = {k} must be in 1..={} (vocabulary size)",
            stats.vocab_len()
        )));
    }
    let n = stats.vocab_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut counts = ClassCounts::build(stats, &assignment, k);

    // Running phi-sums, resynced from scratch every sweep.
    let mut objective = counts.objective();
    let mut history = vec![objective];

    // Minimum improvement for a move to be accepted; keeps float noise from
    // producing non-monotone wobble or endless sweeps.
    const MIN_GAIN: f64 = 1e-6;

    let mut lc = vec![0.0f64; k];
    let mut rc = vec![0.0f64; k];
    for _sweep in 0..iterations {
        let mut moved = false;
        for w in 0..n {
            let a = assignment[w];
            // Class-context counts of w under the current assignment,
            // excluding w's self-bigram.
            lc.fill(0.0);
            rc.fill(0.0);
            let mut touched: Vec<usize> = Vec::new();
            for &(v, c) in &stats.left_of[w] {
                let cv = assignment[v];
                if lc[cv] == 0.0 && rc[cv] == 0.0 {
                    touched.push(cv);
                }
                lc[cv] += c as f64;
            }
            for &(v, c) in &stats.right_of[w] {
                let cv = assignment[v];
                if lc[cv] == 0.0 && rc[cv] == 0.0 {
                    touched.push(cv);
                }
                rc[cv] += c as f64;
            }
            let s = stats.self_counts[w] as f64;
            let out_total: f64 = rc.iter().sum::<f64>() + s;
            let in_total: f64 = lc.iter().sum::<f64>() + s;
            if out_total == 0.0 && in_total == 0.0 {
                continue; // isolated word, the objective ignores it
            }

            let mut best_gain = 0.0f64;
            let mut best_class = a;
            for b in 0..k {
                if b == a {
                    continue;
                }
                let gain = move_gain(&counts, &lc, &rc, &touched, s, out_total, in_total, a, b);
                if gain > best_gain {
                    best_gain = gain;
                    best_class = b;
                }
            }
            if best_gain > MIN_GAIN {
                apply_move(
                    &mut counts,
                    &lc,
                    &rc,
                    &touched,
                    s,
                    out_total,
                    in_total,
                    a,
                    best_class,
                );
                assignment[w] = best_class;
                objective += best_gain;
                history.push(objective);
                moved = true;
            }
        }
        // Resync the running objective against an exact recount.
        counts = ClassCounts::build(stats, &assignment, k);
        objective = counts.objective();
        if !moved {
            break;
        }
    }

    Ok(ExchangeResult {
        words: stats.vocab().to_vec(),
        assignment,
        k,
        objective,
        objective_history: history,
    })
}

/// Exact objective change from moving a word (with context counts `lc`/`rc`
/// over `touched` classes and self-count `s`) from class `a` to class `b`.
#[allow(clippy::too_many_arguments)]
fn move_gain(
    counts: &ClassCounts,
    lc: &[f64],
    rc: &[f64],
    touched: &[usize],
    s: f64,
    out_total: f64,
    in_total: f64,
    a: usize,
    b: usize,
) -> f64 {
    let k = counts.k;
    // Cell updates: (c,a) -= lc[c], (a,c) -= rc[c], (a,a) -= s, then
    // (c,b) += lc[c], (b,c) += rc[c], (b,b) += s, where c ranges over the
    // classes of w's actual neighbors (with w excluded from its own counts).
    // A BTreeMap keeps the summation order fixed across runs.
    let mut cells: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    {
        let mut upd = |c1: usize, c2: usize, delta: f64| {
            let entry = cells
                .entry((c1, c2))
                .or_insert_with(|| counts.m[c1 * k + c2]);
            *entry += delta;
        };
        for &c in touched {
            if lc[c] != 0.0 {
                upd(c, a, -lc[c]);
                upd(c, b, lc[c]);
            }
            if rc[c] != 0.0 {
                upd(a, c, -rc[c]);
                upd(b, c, rc[c]);
            }
        }
        if s != 0.0 {
            upd(a, a, -s);
            upd(b, b, s);
        }
    }
    let mut gain = 0.0;
    for (&(c1, c2), &new) in &cells {
        gain += phi(new) - phi(counts.m[c1 * k + c2]);
    }
    // Marginal terms enter the objective negatively.
    gain -= phi(counts.left[a] - out_total) - phi(counts.left[a]);
    gain -= phi(counts.left[b] + out_total) - phi(counts.left[b]);
    gain -= phi(counts.right[a] - in_total) - phi(counts.right[a]);
    gain -= phi(counts.right[b] + in_total) - phi(counts.right[b]);
    gain
}

#[allow(clippy::too_many_arguments)]
fn apply_move(
    counts: &mut ClassCounts,
    lc: &[f64],
    rc: &[f64],
    touched: &[usize],
    s: f64,
    out_total: f64,
    in_total: f64,
    a: usize,
    b: usize,
) {
    let k = counts.k;
    for &c in touched {
        if lc[c] != 0.0 {
            counts.m[c * k + a] -= lc[c];
            counts.m[c * k + b] += lc[c];
        }
        if rc[c] != 0.0 {
            counts.m[a * k + c] -= rc[c];
            counts.m[b * k + c] += rc[c];
        }
    }
    if s != 0.0 {
        counts.m[a * k + a] -= s;
        counts.m[b * k + b] += s;
    }
    counts.left[a] -= out_total;
    counts.left[b] += out_total;
    counts.right[a] -= in_total;
    counts.right[b] += in_total;
}
