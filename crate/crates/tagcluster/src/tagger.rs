//! First-order linear-chain tagger: scoring, exact Viterbi decoding,
//! averaged structured-MIRA training, and accuracy evaluation.
//!
//! Weights live in a dense table indexed by `base * |T| + tag`, so one
//! interned feature base carries a weight row over all candidate tags.
//! Training updates the raw weights online; inference always scores with the
//! averaged weights (the running mean of the raw weight vector over all
//! updates, no-op updates included).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, TagId, TagSet, TaggedCorpus};
use crate::error::{Error, Result};
use crate::features::{
    dynamic_bases, feature_id, static_bases, BaseId, ClusterKind, ClusterMaps, FeatureAlphabet,
    FeatureId, FeatureTemplateSet,
};

/// MIRA training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clip constant C: the largest permitted update step.
    pub clip: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            clip: 0.01,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be >= 1"));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::contract("clip constant C must be > 0"));
        }
        Ok(())
    }
}

/// Which weight vector scoring reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// The online weights, used while training.
    Raw,
    /// The update-averaged weights, used at inference.
    Averaged,
}

/// A sparse linear model over the interned feature alphabet.
#[derive(Debug, Clone)]
pub struct LinearModel {
    tagset: TagSet,
    templates: FeatureTemplateSet,
    alphabet: FeatureAlphabet,
    raw: Vec<f64>,
    averaged: Vec<f64>,
    // Lazy-averaging bookkeeping: totals[f] accumulates the sum of raw[f]
    // over update snapshots up to last_touch[f].
    totals: Vec<f64>,
    last_touch: Vec<u64>,
    update_count: u64,
}

impl LinearModel {
    pub fn new(tagset: TagSet, templates: FeatureTemplateSet) -> Result<Self> {
        if tagset.is_empty() {
            return Err(Error::contract("cannot build a model over an empty tagset"));
        }
        templates.validate()?;
        Ok(LinearModel {
            tagset,
            templates,
            alphabet: FeatureAlphabet::new(),
            raw: Vec::new(),
            averaged: Vec::new(),
            totals: Vec::new(),
            last_touch: Vec::new(),
            update_count: 0,
        })
    }

    pub fn tagset(&self) -> &TagSet {
        &self.tagset
    }

    pub fn templates(&self) -> &FeatureTemplateSet {
        &self.templates
    }

    pub fn alphabet(&self) -> &FeatureAlphabet {
        &self.alphabet
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    fn n_tags(&self) -> usize {
        self.tagset.len()
    }

    /// Grows the weight tables to cover every interned base.
    fn sync_capacity(&mut self) {
        let want = self.alphabet.len() * self.n_tags();
        if self.raw.len() < want {
            self.raw.resize(want, 0.0);
            self.averaged.resize(want, 0.0);
            self.totals.resize(want, 0.0);
            self.last_touch.resize(want, 0);
        }
    }

    fn weight_at(&self, kind: WeightKind, id: FeatureId) -> f64 {
        let table = match kind {
            WeightKind::Raw => &self.raw,
            WeightKind::Averaged => &self.averaged,
        };
        table.get(id).copied().unwrap_or(0.0)
    }

    fn weight_table(&self, kind: WeightKind) -> &[f64] {
        match kind {
            WeightKind::Raw => &self.raw,
            WeightKind::Averaged => &self.averaged,
        }
    }

    /// Interns `base` and sets both the raw and averaged weight of the
    /// feature `base ∧ tag`. Intended for loading models and building test
    /// fixtures; it does not participate in averaging.
    pub fn set_weight(&mut self, base: &str, tag: TagId, weight: f64) -> Result<()> {
        if tag >= self.n_tags() {
            return Err(Error::contract(format!("tag id {tag} is not a real tag")));
        }
        let b = self.alphabet.intern(base);
        self.sync_capacity();
        let id = feature_id(b, tag, self.n_tags());
        self.raw[id] = weight;
        self.averaged[id] = weight;
        Ok(())
    }

    /// Averaged weight of `base ∧ tag`, zero when unseen.
    pub fn weight(&self, base: &str, tag: TagId) -> f64 {
        match self.alphabet.get(base) {
            Some(b) => self.weight_at(WeightKind::Averaged, feature_id(b, tag, self.n_tags())),
            None => 0.0,
        }
    }

    /// Raw (online) weight of `base ∧ tag`, zero when unseen.
    pub fn raw_weight(&self, base: &str, tag: TagId) -> f64 {
        match self.alphabet.get(base) {
            Some(b) => self.weight_at(WeightKind::Raw, feature_id(b, tag, self.n_tags())),
            None => 0.0,
        }
    }

    fn score_sequence_with(
        &self,
        kind: WeightKind,
        sentence: &Sentence,
        tags: &[TagId],
        maps: &ClusterMaps,
    ) -> Result<f64> {
        if tags.len() != sentence.len() {
            return Err(Error::contract(format!(
                "tag sequence length {} does not match sentence length {}",
                tags.len(),
                sentence.len()
            )));
        }
        let n_tags = self.n_tags();
        let table = self.weight_table(kind);
        let mut bases = Vec::new();
        let mut total = 0.0;
        for (pos, &tag) in tags.iter().enumerate() {
            if tag >= n_tags {
                return Err(Error::contract(format!("tag id {tag} is not a real tag")));
            }
            let prev = if pos == 0 {
                self.tagset.boundary_start()
            } else {
                tags[pos - 1]
            };
            bases.clear();
            static_bases(sentence, pos, &self.templates, maps, &mut bases);
            dynamic_bases(
                sentence,
                pos,
                self.tagset.label(prev),
                &self.templates,
                maps,
                &mut bases,
            );
            for base in &bases {
                if let Some(b) = self.alphabet.get(base) {
                    total += table.get(feature_id(b, tag, n_tags)).copied().unwrap_or(0.0);
                }
            }
        }
        Ok(total)
    }

    /// Scores a tag sequence with the averaged weights: the sum over
    /// positions of `w . features(position, prev_tag, tag)`, with the
    /// boundary-start pseudo-tag as `prev_tag` at position 0.
    pub fn score_sequence(
        &self,
        sentence: &Sentence,
        tags: &[TagId],
        maps: &ClusterMaps,
    ) -> Result<f64> {
        self.score_sequence_with(WeightKind::Averaged, sentence, tags, maps)
    }

    /// Exact argmax decoding with the averaged weights. Ties break toward
    /// the lower tag id at every backtrace decision.
    pub fn viterbi_decode(&self, sentence: &Sentence, maps: &ClusterMaps) -> Result<Vec<TagId>> {
        Decoder::new(self, maps, WeightKind::Averaged).decode(sentence)
    }

    /// Applies one 1-best MIRA update and returns the applied step size.
    ///
    /// With `dphi = phi(gold) - phi(predicted)` and Hamming loss, the step is
    /// `min(C, max(0, (loss - margin) / ||dphi||^2))`; margins are measured
    /// on the raw weights. Degenerate updates (`predicted == gold` or
    /// `||dphi||^2 = 0`) change nothing but still advance the averaging
    /// clock.
    pub fn mira_update(
        &mut self,
        gold: &[TagId],
        predicted: &[TagId],
        gold_features: &[FeatureId],
        predicted_features: &[FeatureId],
        clip: f64,
    ) -> Result<f64> {
        if gold.len() != predicted.len() {
            return Err(Error::contract(
                "mira_update: gold and predicted lengths differ",
            ));
        }
        if clip.is_nan() || clip <= 0.0 {
            return Err(Error::contract("mira_update: clip constant must be > 0"));
        }
        self.sync_capacity();
        self.update_count += 1;
        if gold == predicted {
            return Ok(0.0);
        }

        let mut counts: HashMap<FeatureId, f64> = HashMap::new();
        for &f in gold_features {
            *counts.entry(f).or_insert(0.0) += 1.0;
        }
        for &f in predicted_features {
            *counts.entry(f).or_insert(0.0) -= 1.0;
        }
        // Fixed traversal order keeps the float sums, and therefore whole
        // training runs, reproducible.
        let mut delta: Vec<(FeatureId, f64)> =
            counts.into_iter().filter(|(_, d)| *d != 0.0).collect();
        delta.sort_unstable_by_key(|&(f, _)| f);

        let norm_sq: f64 = delta.iter().map(|(_, d)| d * d).sum();
        if norm_sq == 0.0 {
            // Identical feature vectors for different tag sequences.
            return Ok(0.0);
        }
        let margin: f64 = delta.iter().map(|&(f, d)| d * self.raw[f]).sum();
        let loss = hamming(gold, predicted);
        let step = ((loss - margin) / norm_sq).clamp(0.0, clip);
        if step > 0.0 {
            let upd = self.update_count;
            for &(f, d) in &delta {
                // Account the snapshots since this feature last changed,
                // then the post-update snapshot.
                let pending = (upd - 1).saturating_sub(self.last_touch[f]);
                self.totals[f] += self.raw[f] * pending as f64;
                self.raw[f] += step * d;
                self.totals[f] += self.raw[f];
                self.last_touch[f] = upd;
            }
        }
        Ok(step)
    }

    /// Folds any pending snapshots into the totals and recomputes the
    /// averaged weights as `totals / update_count`.
    pub fn finalize_average(&mut self) {
        self.sync_capacity();
        if self.update_count == 0 {
            self.averaged.copy_from_slice(&self.raw);
            return;
        }
        let n = self.update_count;
        for f in 0..self.raw.len() {
            let pending = n - self.last_touch[f];
            self.totals[f] += self.raw[f] * pending as f64;
            self.last_touch[f] = n;
            self.averaged[f] = self.totals[f] / n as f64;
        }
    }

    /// Writes the model as a self-describing text file; see [`load`] for the
    /// format. Entries round-trip bit-exactly.
    ///
    /// [`load`]: LinearModel::load
    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "#tagcluster-model\tv1")?;
        let mut tags_line = String::from("#tags");
        for label in self.tagset.labels() {
            tags_line.push('\t');
            tags_line.push_str(label);
        }
        writeln!(sink, "{tags_line}")?;
        writeln!(sink, "#templates\t{}", self.templates.to_names().join(","))?;
        writeln!(sink, "#updates\t{}", self.update_count)?;
        let n_tags = self.n_tags();
        for base in 0..self.alphabet.len() {
            for tag in 0..n_tags {
                let w = self.weight_at(WeightKind::Averaged, feature_id(base, tag, n_tags));
                if w != 0.0 {
                    writeln!(
                        sink,
                        "{}~{}\t{}",
                        self.alphabet.name(base),
                        self.tagset.label(tag),
                        w
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Reads a model file: a `#tagcluster-model` header carrying the tagset
    /// and template flags, followed by one `feature\tweight` line per
    /// non-zero averaged weight. The tag is the part of the feature string
    /// after the last `~`.
    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut lines = BufReader::new(source).lines();
        let magic = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty model file"))??;
        if magic != "#tagcluster-model\tv1" {
            return Err(Error::parse(1, "not a tagcluster v1 model file"));
        }
        let tags_line = lines
            .next()
            .ok_or_else(|| Error::parse(2, "missing #tags header"))??;
        let mut tag_fields = tags_line.split('\t');
        if tag_fields.next() != Some("#tags") {
            return Err(Error::parse(2, "missing #tags header"));
        }
        let tagset = TagSet::from_labels(tag_fields)
            .map_err(|e| Error::parse(2, e.to_string()))?;
        let templates_line = lines
            .next()
            .ok_or_else(|| Error::parse(3, "missing #templates header"))??;
        let templates = templates_line
            .strip_prefix("#templates\t")
            .ok_or_else(|| Error::parse(3, "missing #templates header"))
            .and_then(|names| {
                FeatureTemplateSet::from_names(names.split(','))
                    .map_err(|e| Error::parse(3, e.to_string()))
            })?;
        let updates_line = lines
            .next()
            .ok_or_else(|| Error::parse(4, "missing #updates header"))??;
        let update_count: u64 = updates_line
            .strip_prefix("#updates\t")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(4, "missing or malformed #updates header"))?;

        let mut model = LinearModel::new(tagset, templates)?;
        model.update_count = update_count;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 5;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (feature, weight_str) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(line_no, "expected `feature\\tweight`"))?;
            let weight: f64 = weight_str
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad weight `{weight_str}`")))?;
            let (base, tag_label) = feature
                .rsplit_once('~')
                .ok_or_else(|| Error::parse(line_no, "feature is missing its `~tag` suffix"))?;
            let tag = model
                .tagset
                .id(tag_label)
                .ok_or_else(|| Error::parse(line_no, format!("unknown tag `{tag_label}`")))?;
            model.set_weight(base, tag, weight)?;
        }
        Ok(model)
    }
}

fn hamming(a: &[TagId], b: &[TagId]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

/// Extracts the concatenated feature vector of a whole tag sequence, using
/// the gold/predicted tags themselves as the transition context.
pub fn sequence_features(
    sentence: &Sentence,
    tags: &[TagId],
    templates: &FeatureTemplateSet,
    maps: &ClusterMaps,
    tagset: &TagSet,
    alphabet: &mut FeatureAlphabet,
) -> Result<Vec<FeatureId>> {
    if tags.len() != sentence.len() {
        return Err(Error::contract(
            "sequence_features: tag/token length mismatch",
        ));
    }
    let n_tags = tagset.len();
    let mut bases = Vec::new();
    let mut out = Vec::new();
    for (pos, &tag) in tags.iter().enumerate() {
        let prev = if pos == 0 {
            tagset.boundary_start()
        } else {
            tags[pos - 1]
        };
        bases.clear();
        static_bases(sentence, pos, templates, maps, &mut bases);
        dynamic_bases(sentence, pos, tagset.label(prev), templates, maps, &mut bases);
        for base in &bases {
            out.push(feature_id(alphabet.intern(base), tag, n_tags));
        }
    }
    Ok(out)
}

/// Reusable Viterbi decoder over one model and cluster map set.
///
/// Base-id lookups for transition-conjoined templates are memoized, which is
/// what makes bulk tagging of large raw corpora cheap. The decoder holds the
/// model immutably, so the feature alphabet cannot drift while one is alive.
pub struct Decoder<'m> {
    model: &'m LinearModel,
    maps: &'m ClusterMaps,
    kind: WeightKind,
    /// `t-1=<label>` base ids indexed by previous tag id (boundary start
    /// included at index `|T|`).
    trans_bases: Vec<Option<BaseId>>,
    /// Memoized `(template, cluster value, prev)` base ids for the
    /// cluster-transition conjunction templates.
    dyn_cache: HashMap<(u8, usize, TagId), Option<BaseId>>,
}

// Dynamic template slots used as cache keys.
const DYN_RHO0: u8 = 0;
const DYN_RHO1: u8 = 1;
const DYN_ZETA0: u8 = 2;
const DYN_ZETA1: u8 = 3;
const DYN_ETA1: u8 = 4;

impl<'m> Decoder<'m> {
    pub fn new(model: &'m LinearModel, maps: &'m ClusterMaps, kind: WeightKind) -> Self {
        let n_tags = model.n_tags();
        let mut trans_bases = Vec::with_capacity(n_tags + 1);
        if model.templates.transition {
            for prev in 0..=n_tags {
                let label = model.tagset.label(prev);
                trans_bases.push(model.alphabet.get(&format!("t-1={label}")));
            }
        } else {
            trans_bases.resize(n_tags + 1, None);
        }
        Decoder {
            model,
            maps,
            kind,
            trans_bases,
            dyn_cache: HashMap::new(),
        }
    }

    fn cluster_value(&self, sentence: &Sentence, pos: isize, kind: ClusterKind) -> Option<usize> {
        let map = self.maps.get(kind)?;
        let word = if pos >= 0 && (pos as usize) < sentence.len() {
            sentence.tokens[pos as usize].as_str()
        } else {
            ""
        };
        Some(crate::features::lookup_cluster(
            word,
            pos,
            sentence.len(),
            map,
        ))
    }

    fn dyn_base(&mut self, slot: u8, value: usize, prev: TagId) -> Option<BaseId> {
        if let Some(&cached) = self.dyn_cache.get(&(slot, value, prev)) {
            return cached;
        }
        let prev_label = self.model.tagset.label(prev);
        let name = match slot {
            DYN_RHO0 => format!("rho0,t-1={value}|{prev_label}"),
            DYN_RHO1 => format!("rho-1,t-1={value}|{prev_label}"),
            DYN_ZETA0 => format!("zeta0,t-1={value}|{prev_label}"),
            DYN_ZETA1 => format!("zeta-1,t-1={value}|{prev_label}"),
            DYN_ETA1 => format!("eta-1,t-1={value}|{prev_label}"),
            _ => unreachable!(),
        };
        let base = self.model.alphabet.get(&name);
        self.dyn_cache.insert((slot, value, prev), base);
        base
    }

    fn add_row(&self, base: Option<BaseId>, out: &mut [f64]) {
        if let Some(b) = base {
            let n_tags = out.len();
            let table = self.model.weight_table(self.kind);
            let start = b * n_tags;
            if start + n_tags <= table.len() {
                for (o, w) in out.iter_mut().zip(&table[start..start + n_tags]) {
                    *o += w;
                }
            }
        }
    }

    /// Scores of all candidate tags from templates that ignore the previous
    /// tag.
    fn static_row(&self, sentence: &Sentence, pos: usize, bases: &mut Vec<String>, out: &mut [f64]) {
        out.fill(0.0);
        bases.clear();
        static_bases(sentence, pos, &self.model.templates, self.maps, bases);
        for base in bases.iter() {
            self.add_row(self.model.alphabet.get(base), out);
        }
    }

    /// Scores of all candidate tags from templates conjoined with `prev`.
    fn dyn_row(&mut self, sentence: &Sentence, pos: usize, prev: TagId, out: &mut [f64]) {
        out.fill(0.0);
        let t = &self.model.templates;
        if t.transition {
            self.add_row(self.trans_bases[prev.min(self.model.n_tags())], out);
        }
        if t.minimal_clusters {
            return;
        }
        let ipos = pos as isize;
        if t.rho {
            if let (Some(c0), Some(c1)) = (
                self.cluster_value(sentence, ipos, ClusterKind::Rho),
                self.cluster_value(sentence, ipos - 1, ClusterKind::Rho),
            ) {
                let b0 = self.dyn_base(DYN_RHO0, c0, prev);
                self.add_row(b0, out);
                let b1 = self.dyn_base(DYN_RHO1, c1, prev);
                self.add_row(b1, out);
            }
        }
        if t.zeta {
            if let (Some(c0), Some(c1)) = (
                self.cluster_value(sentence, ipos, ClusterKind::Zeta),
                self.cluster_value(sentence, ipos - 1, ClusterKind::Zeta),
            ) {
                let b0 = self.dyn_base(DYN_ZETA0, c0, prev);
                self.add_row(b0, out);
                let b1 = self.dyn_base(DYN_ZETA1, c1, prev);
                self.add_row(b1, out);
            }
        }
        if t.eta {
            if let Some(c) = self.cluster_value(sentence, ipos - 1, ClusterKind::Eta) {
                let b = self.dyn_base(DYN_ETA1, c, prev);
                self.add_row(b, out);
            }
        }
    }

    /// Viterbi argmax over all tag sequences; ties break toward the lower
    /// tag id at every backtrace decision.
    pub fn decode(&mut self, sentence: &Sentence) -> Result<Vec<TagId>> {
        if sentence.is_empty() {
            return Err(Error::contract("cannot decode an empty sentence"));
        }
        let n = sentence.len();
        let n_tags = self.model.n_tags();
        let start = self.model.tagset.boundary_start();

        let mut base_buf: Vec<String> = Vec::new();
        let mut static_scores = vec![0.0f64; n_tags];
        let mut dyn_scores = vec![0.0f64; n_tags];

        let mut dp = vec![0.0f64; n_tags];
        let mut backptr: Vec<Vec<TagId>> = Vec::with_capacity(n);

        self.static_row(sentence, 0, &mut base_buf, &mut static_scores);
        self.dyn_row(sentence, 0, start, &mut dyn_scores);
        for c in 0..n_tags {
            dp[c] = dyn_scores[c] + static_scores[c];
        }
        backptr.push(Vec::new());

        let mut best = vec![0.0f64; n_tags];
        let mut prev_dp = vec![0.0f64; n_tags];
        for pos in 1..n {
            self.static_row(sentence, pos, &mut base_buf, &mut static_scores);
            prev_dp.copy_from_slice(&dp);
            best.fill(f64::NEG_INFINITY);
            let mut best_prev = vec![0 as TagId; n_tags];
            // Ascending prev with a strict comparison: ties go to the lower
            // previous tag id.
            for (prev, &from) in prev_dp.iter().enumerate() {
                self.dyn_row(sentence, pos, prev, &mut dyn_scores);
                for c in 0..n_tags {
                    let score = from + dyn_scores[c];
                    if score > best[c] {
                        best[c] = score;
                        best_prev[c] = prev;
                    }
                }
            }
            for c in 0..n_tags {
                dp[c] = best[c] + static_scores[c];
            }
            backptr.push(best_prev);
        }

        let mut last = 0;
        for c in 1..n_tags {
            if dp[c] > dp[last] {
                last = c;
            }
        }
        let mut tags = vec![0 as TagId; n];
        tags[n - 1] = last;
        for pos in (1..n).rev() {
            tags[pos - 1] = backptr[pos][tags[pos]];
        }
        Ok(tags)
    }
}

/// Trains a model with averaged 1-best MIRA.
///
/// Each sentence is decoded with the current raw weights and a clipped
/// margin update is applied against the gold sequence. Sentence order is
/// reshuffled every epoch from one seeded generator, so the result is a pure
/// function of `(corpus, templates, maps, config)`.
pub fn train(
    corpus: &TaggedCorpus,
    templates: &FeatureTemplateSet,
    maps: &ClusterMaps,
    config: &TrainConfig,
) -> Result<LinearModel> {
    config.validate()?;
    templates.validate()?;
    maps.validate_for(templates)?;
    if corpus.sentences.is_empty() {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let mut model = LinearModel::new(corpus.tagset.clone(), *templates)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    let mut gold_feats: Vec<FeatureId> = Vec::new();
    let mut pred_feats: Vec<FeatureId> = Vec::new();

    for _epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for &idx in &order {
            let sentence = &corpus.sentences[idx];
            let gold = sentence
                .tags
                .as_ref()
                .ok_or_else(|| Error::contract("training sentence has no tags"))?;
            let predicted = Decoder::new(&model, maps, WeightKind::Raw).decode(sentence)?;
            if &predicted == gold {
                model.mira_update(gold, &predicted, &[], &[], config.clip)?;
                continue;
            }
            gold_feats.clear();
            pred_feats.clear();
            gold_feats.extend(sequence_features(
                sentence,
                gold,
                templates,
                maps,
                &model.tagset,
                &mut model.alphabet,
            )?);
            pred_feats.extend(sequence_features(
                sentence,
                &predicted,
                templates,
                maps,
                &model.tagset,
                &mut model.alphabet,
            )?);
            model.mira_update(gold, &predicted, &gold_feats, &pred_feats, config.clip)?;
        }
    }
    model.finalize_average();
    Ok(model)
}

/// Token-level evaluation results.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub tokens: u64,
    pub correct: u64,
    pub oov_tokens: u64,
    pub oov_correct: u64,
    /// `(gold, predicted) -> count`.
    pub confusion: HashMap<(TagId, TagId), u64>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }

    /// Accuracy over tokens whose word was not in the training vocabulary;
    /// `None` when no such token exists.
    pub fn oov_accuracy(&self) -> Option<f64> {
        if self.oov_tokens == 0 {
            None
        } else {
            Some(self.oov_correct as f64 / self.oov_tokens as f64)
        }
    }
}

/// Tags every sentence with the averaged weights and reports token accuracy,
/// per-tag confusion counts and OOV accuracy (tokens outside `train_vocab`).
///
/// The corpus tagset must extend the model tagset (same labels, same order,
/// possibly with extra eval-only tags at the end).
pub fn evaluate(
    model: &LinearModel,
    corpus: &TaggedCorpus,
    maps: &ClusterMaps,
    train_vocab: &HashSet<String>,
) -> Result<EvalReport> {
    let n = model.tagset.len();
    if corpus.tagset.len() < n || corpus.tagset.labels()[..n] != model.tagset.labels()[..] {
        return Err(Error::contract(
            "evaluation tagset does not extend the model tagset",
        ));
    }
    let mut report = EvalReport::default();
    let mut decoder = Decoder::new(model, maps, WeightKind::Averaged);
    for sentence in &corpus.sentences {
        let gold = sentence
            .tags
            .as_ref()
            .ok_or_else(|| Error::contract("evaluation sentence has no tags"))?;
        let predicted = decoder.decode(sentence)?;
        for (pos, (&g, &p)) in gold.iter().zip(&predicted).enumerate() {
            report.tokens += 1;
            let hit = g == p;
            if hit {
                report.correct += 1;
            }
            if !train_vocab.contains(&sentence.tokens[pos]) {
                report.oov_tokens += 1;
                if hit {
                    report.oov_correct += 1;
                }
            }
            *report.confusion.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok(report)
}
