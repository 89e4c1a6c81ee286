//! Per-word conditional tag distribution collection.
//!
//! Streaming a machine-tagged corpus produces, for every word, 64-bit counts
//! of the tag at the word's own position (offset 0) and at its right and
//! left neighbors (offsets +1 / -1, with STOP/START pseudo-tags at sentence
//! boundaries). Counts from disjoint corpus shards merge exactly, and words
//! whose total frequency exceeds a threshold are turned into probability
//! vectors.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::corpus::{Sentence, TagId, TagSet};
use crate::error::{Error, Result};

/// Frequency threshold used throughout the pipeline unless overridden.
pub const DEFAULT_FREQUENCY_THRESHOLD: u64 = 100;

/// Which neighbor's tag is being counted for a word occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Offset {
    /// The word's own tag, p(t|w).
    Current,
    /// The following tag, p(t+1|w); STOP at the last position.
    Next,
    /// The preceding tag, p(t-1|w); START at the first position.
    Prev,
}

impl Offset {
    pub const ALL: [Offset; 3] = [Offset::Current, Offset::Next, Offset::Prev];

    pub fn as_str(self) -> &'static str {
        match self {
            Offset::Current => "0",
            Offset::Next => "+1",
            Offset::Prev => "-1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "0" => Some(Offset::Current),
            "+1" => Some(Offset::Next),
            "-1" => Some(Offset::Prev),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        match self {
            Offset::Current => 0,
            Offset::Next => 1,
            Offset::Prev => 2,
        }
    }

    /// Vector dimension: `|T|` at offset 0, `|T| + 2` for the neighbor
    /// offsets (room for the boundary pseudo-tags).
    pub fn dim(self, n_tags: usize) -> usize {
        match self {
            Offset::Current => n_tags,
            _ => n_tags + 2,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct WordCounts {
    per_offset: [HashMap<TagId, u64>; 3],
}

/// Word/tag co-occurrence counts for the three offsets, tied to one tagset.
#[derive(Debug, Clone)]
pub struct TagCountTable {
    n_tags: usize,
    fingerprint: String,
    words: HashMap<String, WordCounts>,
}

impl TagCountTable {
    pub fn new(tagset: &TagSet) -> Self {
        TagCountTable {
            n_tags: tagset.len(),
            fingerprint: tagset.fingerprint(),
            words: HashMap::new(),
        }
    }

    pub fn n_tags(&self) -> usize {
        self.n_tags
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Number of distinct words seen.
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Total corpus frequency of `word` (the sum of its offset-0 counts).
    pub fn total(&self, word: &str) -> u64 {
        self.words
            .get(word)
            .map(|w| w.per_offset[Offset::Current.slot()].values().sum())
            .unwrap_or(0)
    }

    pub fn count(&self, word: &str, offset: Offset, tag: TagId) -> u64 {
        self.words
            .get(word)
            .and_then(|w| w.per_offset[offset.slot()].get(&tag))
            .copied()
            .unwrap_or(0)
    }

    fn bump(&mut self, word: &str, offset: Offset, tag: TagId) {
        let entry = self
            .words
            .entry(word.to_string())
            .or_default();
        *entry.per_offset[offset.slot()].entry(tag).or_insert(0) += 1;
    }

    /// Adds the counts of another shard. Both tables must have been
    /// collected under the same tagset.
    pub fn merge(&mut self, other: &TagCountTable) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(Error::contract(format!(
                "cannot merge counts collected under tagset {} into tagset {}",
                other.fingerprint, self.fingerprint
            )));
        }
        for (word, counts) in &other.words {
            let entry = self.words.entry(word.clone()).or_default();
            for slot in 0..3 {
                for (&tag, &c) in &counts.per_offset[slot] {
                    *entry.per_offset[slot].entry(tag).or_insert(0) += c;
                }
            }
        }
        Ok(())
    }
}

/// Counts word/tag pairs for all three offsets over tagged sentences.
///
/// For position `i`: offset 0 counts `(w_i, t_i)`, offset +1 counts
/// `(w_i, t_{i+1})` (STOP past the end), offset -1 counts `(w_i, t_{i-1})`
/// (START before the beginning).
pub fn collect_counts<'a, I>(sentences: I, tagset: &TagSet) -> Result<TagCountTable>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut table = TagCountTable::new(tagset);
    let start = tagset.boundary_start();
    let stop = tagset.boundary_stop();
    for sentence in sentences {
        let tags = sentence
            .tags
            .as_ref()
            .ok_or_else(|| Error::contract("collect_counts: sentence has no tags"))?;
        let n = sentence.len();
        for (i, (word, &tag)) in sentence.tokens.iter().zip(tags).enumerate() {
            if tag >= tagset.len() {
                return Err(Error::contract(format!(
                    "collect_counts: tag id {tag} is not a real tag"
                )));
            }
            table.bump(word, Offset::Current, tag);
            let next = if i + 1 < n { tags[i + 1] } else { stop };
            table.bump(word, Offset::Next, next);
            let prev = if i > 0 { tags[i - 1] } else { start };
            table.bump(word, Offset::Prev, prev);
        }
    }
    Ok(table)
}

/// Conditional tag probability vectors for one offset, restricted to words
/// occurring strictly more than `threshold` times.
#[derive(Debug, Clone)]
pub struct TagDistributionTable {
    pub offset: Offset,
    pub dim: usize,
    pub threshold: u64,
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl TagDistributionTable {
    fn from_entries(
        offset: Offset,
        dim: usize,
        threshold: u64,
        entries: Vec<(String, Vec<f64>)>,
    ) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i))
            .collect();
        TagDistributionTable {
            offset,
            dim,
            threshold,
            entries,
            index,
        }
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in word-sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }
}

/// Normalizes counts into per-offset distribution tables, keeping exactly
/// the words with total count strictly greater than `threshold`.
pub fn build_distributions(
    counts: &TagCountTable,
    threshold: u64,
) -> [TagDistributionTable; 3] {
    let mut kept: Vec<&str> = counts
        .words
        .iter()
        .filter(|(_, wc)| {
            let total: u64 = wc.per_offset[Offset::Current.slot()].values().sum();
            total > threshold
        })
        .map(|(w, _)| w.as_str())
        .collect();
    kept.sort_unstable();

    Offset::ALL.map(|offset| {
        let dim = offset.dim(counts.n_tags);
        let mut entries = Vec::with_capacity(kept.len());
        for &word in &kept {
            let tag_counts = &counts.words[word].per_offset[offset.slot()];
            let total: u64 = tag_counts.values().sum();
            if total == 0 {
                continue;
            }
            let mut vec = vec![0.0f64; dim];
            for (&tag, &c) in tag_counts {
                vec[tag] = c as f64 / total as f64;
            }
            entries.push((word.to_string(), vec));
        }
        TagDistributionTable::from_entries(offset, dim, threshold, entries)
    })
}

/// Writes one offset of a count table as a shard file: a header carrying the
/// tagset fingerprint and offset, then `word\ttag_label\tcount` lines in
/// sorted order.
pub fn write_count_shard<W: Write>(
    counts: &TagCountTable,
    offset: Offset,
    tagset: &TagSet,
    mut sink: W,
) -> Result<()> {
    if tagset.fingerprint() != counts.fingerprint {
        return Err(Error::contract(
            "count table was collected under a different tagset",
        ));
    }
    writeln!(
        sink,
        "#tagset={}\toffset={}",
        counts.fingerprint,
        offset.as_str()
    )?;
    let mut words: Vec<&str> = counts.words.keys().map(String::as_str).collect();
    words.sort_unstable();
    for word in words {
        let mut tags: Vec<(TagId, u64)> = counts.words[word].per_offset[offset.slot()]
            .iter()
            .map(|(&t, &c)| (t, c))
            .collect();
        tags.sort_unstable();
        for (tag, count) in tags {
            writeln!(sink, "{word}\t{}\t{count}", tagset.label(tag))?;
        }
    }
    Ok(())
}

/// Reads a count shard written by [`write_count_shard`]. The shard must have
/// been produced under the same tagset.
pub fn read_count_shard<R: Read>(source: R, tagset: &TagSet) -> Result<TagCountTable> {
    let mut lines = BufReader::new(source).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty count shard"))??;
    let rest = header
        .strip_prefix("#tagset=")
        .ok_or_else(|| Error::parse(1, "expected `#tagset=<fp>\\toffset=<o>` header"))?;
    let (fp, offset_str) = rest
        .split_once('\t')
        .ok_or_else(|| Error::parse(1, "expected `#tagset=<fp>\\toffset=<o>` header"))?;
    if fp != tagset.fingerprint() {
        return Err(Error::contract(format!(
            "count shard was collected under tagset {fp}, expected {}",
            tagset.fingerprint()
        )));
    }
    let offset = offset_str
        .strip_prefix("offset=")
        .and_then(Offset::parse)
        .ok_or_else(|| Error::parse(1, format!("bad offset in `{offset_str}`")))?;

    let mut table = TagCountTable::new(tagset);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (word, label, count_str) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(l), Some(c), None) => (w, l, c),
            _ => return Err(Error::parse(line_no, "expected `word\\ttag\\tcount`")),
        };
        let tag = tagset
            .id_or_boundary(label)
            .ok_or_else(|| Error::parse(line_no, format!("unknown tag `{label}`")))?;
        let count: u64 = count_str
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad count `{count_str}`")))?;
        let entry = table.words.entry(word.to_string()).or_default();
        *entry.per_offset[offset.slot()].entry(tag).or_insert(0) += count;
    }
    Ok(table)
}

/// Writes a distribution table: `#dim=<d>\tk=<k>\toffset=<o>` then
/// `word\tp1,p2,...` rows with probabilities at 9 decimal places.
pub fn write_distribution_file<W: Write>(
    table: &TagDistributionTable,
    mut sink: W,
) -> Result<()> {
    writeln!(
        sink,
        "#dim={}\tk={}\toffset={}",
        table.dim,
        table.threshold,
        table.offset.as_str()
    )?;
    let mut row = String::new();
    for (word, vec) in table.iter() {
        row.clear();
        row.push_str(word);
        row.push('\t');
        for (i, p) in vec.iter().enumerate() {
            if i > 0 {
                row.push(',');
            }
            row.push_str(&format!("{p:.9}"));
        }
        writeln!(sink, "{row}")?;
    }
    Ok(())
}

/// Reads a distribution file. Vectors are renormalized to sum exactly to 1,
/// undoing the 9-decimal rounding of the writer.
pub fn read_distribution_file<R: Read>(source: R) -> Result<TagDistributionTable> {
    let mut lines = BufReader::new(source).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty distribution file"))??;
    let mut fields = header.split('\t');
    let dim: usize = fields
        .next()
        .and_then(|f| f.strip_prefix("#dim="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad `#dim=` header field"))?;
    let threshold: u64 = fields
        .next()
        .and_then(|f| f.strip_prefix("k="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad `k=` header field"))?;
    let offset = fields
        .next()
        .and_then(|f| f.strip_prefix("offset="))
        .and_then(Offset::parse)
        .ok_or_else(|| Error::parse(1, "bad `offset=` header field"))?;

    let mut entries = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (word, probs) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected `word\\tp1,p2,...`"))?;
        let mut vec = Vec::with_capacity(dim);
        for p in probs.split(',') {
            let p: f64 = p
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad probability `{p}`")))?;
            vec.push(p);
        }
        if vec.len() != dim {
            return Err(Error::parse(
                line_no,
                format!("expected {dim} probabilities, found {}", vec.len()),
            ));
        }
        let sum: f64 = vec.iter().sum();
        if sum <= 0.0 || sum.is_nan() {
            return Err(Error::parse(line_no, "degenerate all-zero vector"));
        }
        for p in &mut vec {
            *p /= sum;
        }
        entries.push((word.to_string(), vec));
    }
    Ok(TagDistributionTable::from_entries(
        offset, dim, threshold, entries,
    ))
}
