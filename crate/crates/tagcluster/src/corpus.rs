//! Corpus and tagset handling.
//!
//! Two on-disk formats are supported:
//!
//! * tagged corpora: UTF-8, one `token\ttag` line per token, sentences
//!   separated by blank lines;
//! * raw corpora: UTF-8, one space-tokenized sentence per line.
//!
//! Raw corpora are read as streams so arbitrarily large files can be
//! traversed in constant memory.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense integer id of a tag. Real tags occupy `0..|T|`; the two boundary
/// pseudo-tags sit at `|T|` (start) and `|T|+1` (stop).
pub type TagId = usize;

/// Label used for the sentence-start pseudo-tag in human-readable output.
pub const START_LABEL: &str = "<START>";
/// Label used for the sentence-stop pseudo-tag in human-readable output.
pub const STOP_LABEL: &str = "<STOP>";

/// Bijection between tag labels and dense ids, plus the boundary pseudo-tags.
///
/// Ids are assigned in first-seen order, which makes them deterministic for a
/// fixed input. The boundary ids float at `len()` and `len()+1`, so they are
/// only meaningful once the set is no longer being extended.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSet {
    labels: Vec<String>,
    index: HashMap<String, TagId>,
}

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = Self::new();
        for label in labels {
            set.intern(label.as_ref())?;
        }
        Ok(set)
    }

    /// Returns the id for `label`, assigning the next free id if unseen.
    ///
    /// The boundary labels and labels containing `\t`, `\n` or `~` are
    /// rejected: they would be ambiguous in the tab-separated corpus and
    /// model file formats.
    pub fn intern(&mut self, label: &str) -> Result<TagId> {
        if let Some(&id) = self.index.get(label) {
            return Ok(id);
        }
        if label.is_empty() {
            return Err(Error::contract("empty tag label"));
        }
        if label == START_LABEL || label == STOP_LABEL {
            return Err(Error::contract(format!(
                "tag label `{label}` is reserved for sentence boundaries"
            )));
        }
        if label.contains(['\t', '\n', '~']) {
            return Err(Error::contract(format!(
                "tag label `{}` contains a character reserved by the file formats",
                label.escape_default()
            )));
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        Ok(id)
    }

    /// Id of a real tag, if known.
    pub fn id(&self, label: &str) -> Option<TagId> {
        self.index.get(label).copied()
    }

    /// Id of a real tag or of one of the boundary labels.
    pub fn id_or_boundary(&self, label: &str) -> Option<TagId> {
        match label {
            START_LABEL => Some(self.boundary_start()),
            STOP_LABEL => Some(self.boundary_stop()),
            _ => self.id(label),
        }
    }

    /// Label for `id`, including the boundary pseudo-tags.
    ///
    /// Panics if `id` is outside `0..len()+2`.
    pub fn label(&self, id: TagId) -> &str {
        if id < self.labels.len() {
            &self.labels[id]
        } else if id == self.boundary_start() {
            START_LABEL
        } else if id == self.boundary_stop() {
            STOP_LABEL
        } else {
            panic!("tag id {id} out of range for tagset of size {}", self.len())
        }
    }

    /// Number of real tags.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn boundary_start(&self) -> TagId {
        self.labels.len()
    }

    pub fn boundary_stop(&self) -> TagId {
        self.labels.len() + 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Stable hex digest of the label sequence; used to detect mixing
    /// artifacts produced under different tagsets.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for label in &self.labels {
            hasher.update(label.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for byte in &digest[..8] {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// A token sequence with an optional aligned tag sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Option<Vec<TagId>>,
}

impl Sentence {
    pub fn raw(tokens: Vec<String>) -> Self {
        Sentence { tokens, tags: None }
    }

    pub fn tagged(tokens: Vec<String>, tags: Vec<TagId>) -> Self {
        debug_assert_eq!(tokens.len(), tags.len());
        Sentence {
            tokens,
            tags: Some(tags),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A fully materialized tagged corpus together with its tagset.
#[derive(Debug, Clone)]
pub struct TaggedCorpus {
    pub sentences: Vec<Sentence>,
    pub tagset: TagSet,
}

impl TaggedCorpus {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Reads a two-column tagged corpus, building a fresh tagset from the
/// observed tags in first-seen order.
pub fn read_tagged_corpus<R: Read>(source: R) -> Result<TaggedCorpus> {
    let mut tagset = TagSet::new();
    let sentences = read_tagged_into(source, &mut tagset, false)?;
    Ok(TaggedCorpus { sentences, tagset })
}

/// Reads a two-column tagged corpus into an existing tagset.
///
/// With `frozen` set, a tag absent from `tagset` is a parse error; otherwise
/// the tagset is extended in first-seen order.
pub fn read_tagged_into<R: Read>(
    source: R,
    tagset: &mut TagSet,
    frozen: bool,
) -> Result<Vec<Sentence>> {
    let reader = BufReader::new(source);
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<TagId> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence::tagged(
                    std::mem::take(&mut tokens),
                    std::mem::take(&mut tags),
                ));
            }
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected `token<TAB>tag`"))?;
        if tag.contains('\t') {
            return Err(Error::parse(line_no, "expected exactly two columns"));
        }
        if token.is_empty() {
            return Err(Error::parse(line_no, "empty token"));
        }
        if tag.is_empty() {
            return Err(Error::parse(line_no, "empty tag"));
        }
        let tag_id = if frozen {
            tagset.id(tag).ok_or_else(|| {
                Error::parse(line_no, format!("tag `{tag}` not in the frozen tagset"))
            })?
        } else {
            tagset
                .intern(tag)
                .map_err(|e| Error::parse(line_no, e.to_string()))?
        };
        tokens.push(token.to_string());
        tags.push(tag_id);
    }
    if !tokens.is_empty() {
        sentences.push(Sentence::tagged(tokens, tags));
    }
    Ok(sentences)
}

/// Streaming reader for raw (untagged) corpora: one whitespace-tokenized
/// sentence per line. Memory use is bounded by the longest line regardless
/// of corpus size.
pub struct RawReader<R: BufRead> {
    reader: R,
    buf: String,
}

impl<R: BufRead> Iterator for RawReader<R> {
    type Item = Result<Sentence>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    let tokens: Vec<String> = self
                        .buf
                        .split_whitespace()
                        .map(str::to_string)
                        .collect();
                    if tokens.is_empty() {
                        continue; // blank line
                    }
                    return Some(Ok(Sentence::raw(tokens)));
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

/// Opens a raw corpus stream.
pub fn read_raw_corpus<R: Read>(source: R) -> RawReader<BufReader<R>> {
    RawReader {
        reader: BufReader::new(source),
        buf: String::new(),
    }
}

/// Writes tagged sentences in the two-column format. Every sentence must
/// carry tags; the output re-reads to identical content.
pub fn write_tagged<'a, I, W>(sentences: I, tagset: &TagSet, mut sink: W) -> Result<()>
where
    I: IntoIterator<Item = &'a Sentence>,
    W: Write,
{
    for sentence in sentences {
        let tags = sentence
            .tags
            .as_ref()
            .ok_or_else(|| Error::contract("write_tagged: sentence has no tags"))?;
        if tags.len() != sentence.tokens.len() {
            return Err(Error::contract(
                "write_tagged: token/tag length mismatch",
            ));
        }
        for (token, &tag) in sentence.tokens.iter().zip(tags) {
            writeln!(sink, "{token}\t{}", tagset.label(tag))?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagset_assigns_dense_ids_in_first_seen_order() {
        let mut ts = TagSet::new();
        assert_eq!(ts.intern("DT").unwrap(), 0);
        assert_eq!(ts.intern("NN").unwrap(), 1);
        assert_eq!(ts.intern("DT").unwrap(), 0);
        assert_eq!(ts.len(), 2);
        assert_eq!(ts.boundary_start(), 2);
        assert_eq!(ts.boundary_stop(), 3);
        assert_eq!(ts.label(0), "DT");
        assert_eq!(ts.label(2), START_LABEL);
        assert_eq!(ts.label(3), STOP_LABEL);
        assert_eq!(ts.id("NN"), Some(1));
        assert_eq!(ts.id("VB"), None);
        assert_eq!(ts.id_or_boundary(START_LABEL), Some(2));
    }

    #[test]
    fn tagset_rejects_reserved_labels() {
        let mut ts = TagSet::new();
        assert!(ts.intern(START_LABEL).is_err());
        assert!(ts.intern(STOP_LABEL).is_err());
        assert!(ts.intern("a~b").is_err());
        assert!(ts.intern("").is_err());
    }

    #[test]
    fn reads_two_column_corpus() {
        let corpus = read_tagged_corpus("the\tDT\ndog\tNN\n\n".as_bytes()).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].tokens, vec!["the", "dog"]);
        assert_eq!(corpus.sentences[0].tags.as_deref(), Some(&[0, 1][..]));
        assert_eq!(corpus.tagset.label(0), "DT");
        assert_eq!(corpus.tagset.label(1), "NN");
    }

    #[test]
    fn empty_input_is_an_empty_corpus() {
        let corpus = read_tagged_corpus("".as_bytes()).unwrap();
        assert!(corpus.sentences.is_empty());
        assert!(corpus.tagset.is_empty());
    }

    #[test]
    fn missing_final_blank_line_still_closes_the_sentence() {
        let corpus = read_tagged_corpus("a\tX\nb\tY".as_bytes()).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].len(), 2);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = read_tagged_corpus("the DT dog NN".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = read_tagged_corpus("a\tX\nb\tY\tZ\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_reading_rejects_unknown_tags() {
        let mut ts = TagSet::from_labels(["DT"]).unwrap();
        let err = read_tagged_into("dog\tNN\n".as_bytes(), &mut ts, true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert_eq!(ts.len(), 1);
    }

    #[test]
    fn raw_reader_splits_on_whitespace_and_skips_blanks() {
        let sentences: Vec<_> = read_raw_corpus("a b c\n".as_bytes())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(sentences.len(), 1);
        assert_eq!(sentences[0].tokens, vec!["a", "b", "c"]);
        assert!(sentences[0].tags.is_none());

        let sentences: Vec<_> = read_raw_corpus("a b\n\nc\n".as_bytes())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(sentences.len(), 2);
        assert_eq!(sentences[1].tokens, vec!["c"]);
    }

    #[test]
    fn write_then_read_round_trips() {
        let corpus =
            read_tagged_corpus("the\tDT\ndog\tNN\n\nran\tVB\n\n".as_bytes()).unwrap();
        let mut bytes = Vec::new();
        write_tagged(&corpus.sentences, &corpus.tagset, &mut bytes).unwrap();
        let reread = read_tagged_corpus(bytes.as_slice()).unwrap();
        assert_eq!(reread.sentences, corpus.sentences);
        assert_eq!(reread.tagset, corpus.tagset);

        // Writing the re-read corpus again is byte-identical.
        let mut bytes2 = Vec::new();
        write_tagged(&reread.sentences, &reread.tagset, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn writing_zero_sentences_produces_empty_output() {
        let mut bytes = Vec::new();
        write_tagged(&[], &TagSet::new(), &mut bytes).unwrap();
        assert!(bytes.is_empty());
    }

    #[test]
    fn writing_untagged_sentence_is_a_contract_error() {
        let sentence = Sentence::raw(vec!["a".into()]);
        let mut bytes = Vec::new();
        let err = write_tagged([&sentence], &TagSet::new(), &mut bytes).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
