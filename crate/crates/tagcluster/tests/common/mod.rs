//! Shared test support: a deterministic synthetic language with a
//! first-order tag chain, tiered vocabularies and noun/verb ambiguity, used
//! to generate train/eval/raw corpora for the pipeline tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAGS: [&str; 12] = [
    "DET", "ADJ", "NOUN", "VERB", "ADV", "PREP", "PRON", "CONJ", "NUM", "PROPN", "PART", "PUNCT",
];

const DET: usize = 0;
const ADJ: usize = 1;
const NOUN: usize = 2;
const VERB: usize = 3;
const ADV: usize = 4;
const PREP: usize = 5;
const PRON: usize = 6;
const CONJ: usize = 7;
const NUM: usize = 8;
const PROPN: usize = 9;
const PART: usize = 10;
const PUNCT: usize = 11;

/// Open-class pool sizes: (common, mid, tail). Mid-tier words are the ones
/// frequent enough in a large raw corpus to receive cluster vectors while
/// staying rare in a small training set.
#[derive(Debug, Clone, Copy)]
pub struct PoolSizes {
    pub common: usize,
    pub mid: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LanguageSpec {
    pub seed: u64,
    pub noun: PoolSizes,
    pub verb: PoolSizes,
    pub adj: PoolSizes,
    pub adv: PoolSizes,
    pub propn: PoolSizes,
    /// Fraction of noun words also usable as verbs (and vice versa).
    pub ambiguity: f64,
}

impl LanguageSpec {
    /// A tiny language for fast pipeline smoke tests.
    pub fn small(seed: u64) -> Self {
        LanguageSpec {
            seed,
            noun: PoolSizes { common: 25, mid: 40, tail: 40 },
            verb: PoolSizes { common: 20, mid: 30, tail: 30 },
            adj: PoolSizes { common: 15, mid: 25, tail: 25 },
            adv: PoolSizes { common: 10, mid: 10, tail: 10 },
            propn: PoolSizes { common: 10, mid: 15, tail: 20 },
            ambiguity: 0.25,
        }
    }

    /// A desk-scale language whose mid tiers exceed a raw-corpus frequency
    /// threshold of ~20 at around a million raw tokens while staying mostly
    /// unseen in a few-thousand-sentence training set.
    pub fn large(seed: u64) -> Self {
        LanguageSpec {
            seed,
            noun: PoolSizes { common: 200, mid: 2000, tail: 3000 },
            verb: PoolSizes { common: 150, mid: 1500, tail: 2000 },
            adj: PoolSizes { common: 120, mid: 1200, tail: 1500 },
            adv: PoolSizes { common: 60, mid: 300, tail: 400 },
            propn: PoolSizes { common: 100, mid: 800, tail: 1200 },
            ambiguity: 0.3,
        }
    }

    pub fn without_ambiguity(mut self) -> Self {
        self.ambiguity = 0.0;
        self
    }
}

struct Pool {
    /// `(cumulative tier weight, words)`.
    tiers: Vec<(f64, Vec<String>)>,
    total: f64,
}

impl Pool {
    fn closed(words: &[&str]) -> Self {
        Pool {
            tiers: vec![(1.0, words.iter().map(|w| w.to_string()).collect())],
            total: 1.0,
        }
    }

    fn tiered(common: Vec<String>, mid: Vec<String>, tail: Vec<String>) -> Self {
        let mut tiers = Vec::new();
        let mut cum = 0.0;
        for (weight, words) in [(0.5, common), (0.35, mid), (0.15, tail)] {
            if !words.is_empty() {
                cum += weight;
                tiers.push((cum, words));
            }
        }
        Pool { total: cum, tiers }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> &str {
        let draw = rng.random_range(0.0..self.total);
        let tier = self
            .tiers
            .iter()
            .find(|(cum, _)| draw < *cum)
            .unwrap_or(self.tiers.last().expect("pool has tiers"));
        let words = &tier.1;
        &words[rng.random_range(0..words.len())]
    }
}

pub struct Language {
    pools: Vec<Pool>,
    start: Vec<(usize, f64)>,
    trans: Vec<Vec<(usize, f64)>>,
}

fn syllable_word(rng: &mut ChaCha8Rng, capitalized: bool) -> String {
    const ONSETS: [&str; 14] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllables = rng.random_range(2..=4);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        word.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    if rng.random_bool(0.3) {
        word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
    }
    if capitalized {
        let mut chars = word.chars();
        let first = chars.next().expect("word is non-empty");
        word = first.to_uppercase().chain(chars).collect();
    }
    word
}

fn generate_pool(
    rng: &mut ChaCha8Rng,
    sizes: PoolSizes,
    capitalized: bool,
    used: &mut std::collections::HashSet<String>,
    out_common: &mut Vec<String>,
    out_mid: &mut Vec<String>,
    out_tail: &mut Vec<String>,
) {
    let mut fill = |n: usize, out: &mut Vec<String>, rng: &mut ChaCha8Rng| {
        while out.len() < n {
            let w = syllable_word(rng, capitalized);
            if used.insert(w.clone()) {
                out.push(w);
            }
        }
    };
    fill(sizes.common, out_common, rng);
    fill(sizes.mid, out_mid, rng);
    fill(sizes.tail, out_tail, rng);
}

fn cumulative(rows: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let total: f64 = rows.iter().map(|(_, w)| w).sum();
    let mut cum = 0.0;
    rows.iter()
        .map(|&(t, w)| {
            cum += w / total;
            (t, cum)
        })
        .collect()
}

fn sample_tag(rows: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.random_range(0.0..1.0);
    rows.iter()
        .find(|(_, cum)| draw < *cum)
        .unwrap_or(rows.last().expect("rows are non-empty"))
        .0
}

impl Language {
    pub fn build(spec: &LanguageSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut used: std::collections::HashSet<String> = std::collections::HashSet::new();

        let mut pools_cmt: Vec<(Vec<String>, Vec<String>, Vec<String>)> = Vec::new();
        for (sizes, cap) in [
            (spec.noun, false),
            (spec.verb, false),
            (spec.adj, false),
            (spec.adv, false),
            (spec.propn, true),
        ] {
            let (mut c, mut m, mut t) = (Vec::new(), Vec::new(), Vec::new());
            generate_pool(&mut rng, sizes, cap, &mut used, &mut c, &mut m, &mut t);
            pools_cmt.push((c, m, t));
        }
        let [noun, verb, adj, adv, propn]: [(Vec<String>, Vec<String>, Vec<String>); 5] =
            pools_cmt.try_into().expect("five open classes");
        let (mut noun, mut verb) = (noun, verb);

        // Noun/verb ambiguity: share a fraction of words across the two
        // pools, tier for tier, so p(t|w) genuinely varies by word.
        if spec.ambiguity > 0.0 {
            let share = |from: &(Vec<String>, Vec<String>, Vec<String>),
                             to: &mut (Vec<String>, Vec<String>, Vec<String>),
                             rng: &mut ChaCha8Rng| {
                for (src, dst) in [
                    (&from.0, &mut to.0),
                    (&from.1, &mut to.1),
                    (&from.2, &mut to.2),
                ] {
                    for w in src {
                        if rng.random_bool(spec.ambiguity) {
                            dst.push(w.clone());
                        }
                    }
                }
            };
            let noun_snapshot = noun.clone();
            share(&noun_snapshot, &mut verb, &mut rng);
            let verb_snapshot = verb.clone();
            share(&verb_snapshot, &mut noun, &mut rng);
        }

        let numbers: Vec<String> = (0..40)
            .map(|_| {
                let magnitude = rng.random_range(1..=4u32);
                let n = rng.random_range(10u64.pow(magnitude - 1)..10u64.pow(magnitude));
                n.to_string()
            })
            .collect();

        let mut pools: Vec<Pool> = Vec::with_capacity(TAGS.len());
        pools.push(Pool::closed(&["the", "a", "this", "these", "some", "no"])); // DET
        pools.push(Pool::tiered(adj.0, adj.1, adj.2)); // ADJ
        pools.push(Pool::tiered(noun.0, noun.1, noun.2)); // NOUN
        pools.push(Pool::tiered(verb.0, verb.1, verb.2)); // VERB
        pools.push(Pool::tiered(adv.0, adv.1, adv.2)); // ADV
        pools.push(Pool::closed(&["of", "in", "on", "with", "under", "from", "near", "at"])); // PREP
        pools.push(Pool::closed(&["it", "he", "she", "they", "we", "you", "who", "that"])); // PRON
        pools.push(Pool::closed(&["and", "or", "but", "while"])); // CONJ
        pools.push(Pool {
            tiers: vec![(1.0, numbers)],
            total: 1.0,
        }); // NUM
        pools.push(Pool::tiered(propn.0, propn.1, propn.2)); // PROPN
        pools.push(Pool::closed(&["to", "not", "up"])); // PART
        pools.push(Pool::closed(&[","])); // PUNCT inside a sentence

        let start = cumulative(&[
            (DET, 35.0),
            (PROPN, 15.0),
            (PRON, 15.0),
            (NOUN, 10.0),
            (ADV, 8.0),
            (PREP, 7.0),
            (NUM, 5.0),
            (ADJ, 5.0),
        ]);
        let mut trans: Vec<Vec<(usize, f64)>> = vec![Vec::new(); TAGS.len()];
        trans[DET] = cumulative(&[(NOUN, 55.0), (ADJ, 35.0), (NUM, 10.0)]);
        trans[ADJ] = cumulative(&[
            (NOUN, 62.0),
            (ADJ, 15.0),
            (CONJ, 8.0),
            (PREP, 8.0),
            (PUNCT, 7.0),
        ]);
        trans[NOUN] = cumulative(&[
            (VERB, 30.0),
            (PREP, 20.0),
            (PUNCT, 12.0),
            (CONJ, 10.0),
            (NOUN, 13.0),
            (ADV, 5.0),
            (PART, 10.0),
        ]);
        trans[VERB] = cumulative(&[
            (DET, 30.0),
            (NOUN, 12.0),
            (ADV, 15.0),
            (PREP, 15.0),
            (PRON, 8.0),
            (ADJ, 8.0),
            (PART, 7.0),
            (PROPN, 5.0),
        ]);
        trans[ADV] = cumulative(&[
            (VERB, 40.0),
            (ADJ, 25.0),
            (ADV, 10.0),
            (PUNCT, 10.0),
            (PREP, 15.0),
        ]);
        trans[PREP] = cumulative(&[
            (DET, 40.0),
            (NOUN, 25.0),
            (PROPN, 15.0),
            (NUM, 10.0),
            (PRON, 10.0),
        ]);
        trans[PRON] = cumulative(&[
            (VERB, 60.0),
            (ADV, 10.0),
            (PUNCT, 10.0),
            (PREP, 10.0),
            (CONJ, 10.0),
        ]);
        trans[CONJ] = cumulative(&[
            (DET, 25.0),
            (NOUN, 20.0),
            (PRON, 15.0),
            (PROPN, 15.0),
            (VERB, 15.0),
            (ADJ, 10.0),
        ]);
        trans[NUM] = cumulative(&[
            (NOUN, 60.0),
            (PUNCT, 15.0),
            (PREP, 10.0),
            (CONJ, 10.0),
            (NUM, 5.0),
        ]);
        trans[PROPN] = cumulative(&[
            (VERB, 30.0),
            (PROPN, 20.0),
            (PUNCT, 15.0),
            (PREP, 15.0),
            (CONJ, 10.0),
            (NOUN, 10.0),
        ]);
        trans[PART] = cumulative(&[(VERB, 70.0), (DET, 15.0), (NOUN, 15.0)]);
        trans[PUNCT] = cumulative(&[
            (DET, 20.0),
            (PRON, 15.0),
            (CONJ, 20.0),
            (NOUN, 15.0),
            (ADV, 10.0),
            (PROPN, 10.0),
            (PREP, 10.0),
        ]);

        Language { pools, start, trans }
    }

    /// One sentence as `(token, tag_index)` pairs, ending in a final period.
    pub fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
        let len = rng.random_range(6..=20usize);
        let mut out = Vec::with_capacity(len + 1);
        let mut tag = sample_tag(&self.start, rng);
        for _ in 0..len {
            out.push((self.pools[tag].sample(rng).to_string(), tag));
            tag = sample_tag(&self.trans[tag], rng);
        }
        out.push((".".to_string(), PUNCT));
        out
    }

    pub fn tagged_text(&self, sentences: usize, rng: &mut ChaCha8Rng) -> String {
        let mut text = String::new();
        for _ in 0..sentences {
            for (token, tag) in self.sentence(rng) {
                writeln!(text, "{token}\t{}", TAGS[tag]).unwrap();
            }
            text.push('\n');
        }
        text
    }

    pub fn raw_text(&self, sentences: usize, rng: &mut ChaCha8Rng) -> String {
        let mut text = String::new();
        for _ in 0..sentences {
            let sentence = self.sentence(rng);
            let tokens: Vec<&str> = sentence.iter().map(|(t, _)| t.as_str()).collect();
            writeln!(text, "{}", tokens.join(" ")).unwrap();
        }
        text
    }
}

/// Everything one pipeline run needs on disk.
pub struct Fixture {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub train_sentences: usize,
    pub eval_sentences: usize,
    pub raw_sentences: usize,
    pub threshold_k: u64,
    pub clusters_k: usize,
    pub kmeans_iterations: usize,
    pub exchange_iterations: usize,
    pub shard_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn small(seed: u64) -> Self {
        FixtureSpec {
            train_sentences: 80,
            eval_sentences: 40,
            raw_sentences: 600,
            threshold_k: 2,
            clusters_k: 8,
            kmeans_iterations: 30,
            exchange_iterations: 8,
            shard_size: 100,
            epochs: 4,
            clip: 0.05,
            seed,
        }
    }
}

/// Writes train/dev/test/raw corpora plus a config file into `dir`.
pub fn write_fixture(dir: &Path, lang_spec: &LanguageSpec, fix: &FixtureSpec) -> Fixture {
    fs::create_dir_all(dir).unwrap();
    let lang = Language::build(lang_spec);

    let mut train_rng = ChaCha8Rng::seed_from_u64(fix.seed.wrapping_add(1));
    let mut dev_rng = ChaCha8Rng::seed_from_u64(fix.seed.wrapping_add(2));
    let mut test_rng = ChaCha8Rng::seed_from_u64(fix.seed.wrapping_add(3));
    let mut raw_rng = ChaCha8Rng::seed_from_u64(fix.seed.wrapping_add(4));

    fs::write(dir.join("train.tsv"), lang.tagged_text(fix.train_sentences, &mut train_rng)).unwrap();
    fs::write(dir.join("dev.tsv"), lang.tagged_text(fix.eval_sentences, &mut dev_rng)).unwrap();
    fs::write(dir.join("test.tsv"), lang.tagged_text(fix.eval_sentences, &mut test_rng)).unwrap();
    fs::write(dir.join("raw.txt"), lang.raw_text(fix.raw_sentences, &mut raw_rng)).unwrap();

    let config = format!(
        "train_corpus = train.tsv\n\
         raw_corpus = raw.txt\n\
         workdir = work\n\
         eval_corpus = dev:dev.tsv\n\
         eval_corpus = test:test.tsv\n\
         threshold_k = {}\n\
         clusters_k = {}\n\
         kmeans_iterations = {}\n\
         exchange_iterations = {}\n\
         shard_size = {}\n\
         baseline_epochs = {}\n\
         baseline_clip = {}\n\
         final_epochs = {}\n\
         final_clip = {}\n\
         seed = {}\n",
        fix.threshold_k,
        fix.clusters_k,
        fix.kmeans_iterations,
        fix.exchange_iterations,
        fix.shard_size,
        fix.epochs,
        fix.clip,
        fix.epochs,
        fix.clip,
        fix.seed,
    );
    let config_path = dir.join("pipeline.conf");
    fs::write(&config_path, config).unwrap();

    Fixture {
        dir: dir.to_path_buf(),
        config_path,
        workdir: dir.join("work"),
    }
}
