//! Feature templates, cluster lookups and the feature alphabet.
//!
//! A feature is a template instantiated at a sentence position and conjoined
//! with the tag being predicted. Internally the template-plus-values part
//! (the "base") is interned to a dense id and the full feature id is
//! `base * |T| + candidate_tag`, so one interned base carries the weight rows
//! for every candidate tag.
//!
//! Base strings are human readable (`w0=dog`, `suf2=og`, `zeta0,t-1=13|DT`)
//! and appear verbatim in model files.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::corpus::{Sentence, TagId, TagSet};
use crate::error::{Error, Result};

/// Dense id of an interned feature base (template + values, no tag).
pub type BaseId = usize;
/// Dense id of a full feature: `base * |T| + candidate_tag`.
pub type FeatureId = usize;

/// Which cluster map a feature template reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClusterKind {
    /// Distributional (class-bigram exchange) clusters.
    Rho,
    /// p(t|w) clusters.
    Zeta,
    /// p(t+1|w) clusters, used as a feature of the previous word.
    Eta,
    /// p(t-1|w) clusters, used as a feature of the following word.
    Tau,
}

impl ClusterKind {
    pub const ALL: [ClusterKind; 4] = [
        ClusterKind::Rho,
        ClusterKind::Zeta,
        ClusterKind::Eta,
        ClusterKind::Tau,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClusterKind::Rho => "rho",
            ClusterKind::Zeta => "zeta",
            ClusterKind::Eta => "eta",
            ClusterKind::Tau => "tau",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rho" => Some(ClusterKind::Rho),
            "zeta" => Some(ClusterKind::Zeta),
            "eta" => Some(ClusterKind::Eta),
            "tau" => Some(ClusterKind::Tau),
            _ => None,
        }
    }
}

/// Word-to-cluster assignment with OOV and out-of-sentence sentinels.
///
/// Assigned ids live in `0..k`; `k` is the OOV sentinel and `k + 1` the
/// boundary sentinel, so cluster features are total functions of the input.
#[derive(Debug, Clone)]
pub struct ClusterMap {
    kind: ClusterKind,
    k: usize,
    assignments: HashMap<String, usize>,
}

impl ClusterMap {
    pub fn new(kind: ClusterKind, k: usize, assignments: HashMap<String, usize>) -> Result<Self> {
        if let Some((word, &id)) = assignments.iter().find(|&(_, &id)| id >= k) {
            return Err(Error::contract(format!(
                "cluster id {id} for word `{word}` is outside 0..{k}"
            )));
        }
        Ok(ClusterMap {
            kind,
            k,
            assignments,
        })
    }

    pub fn kind(&self) -> ClusterKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn oov_id(&self) -> usize {
        self.k
    }

    pub fn boundary_id(&self) -> usize {
        self.k + 1
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.assignments.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Assignment pairs in unspecified order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.assignments.iter().map(|(w, &c)| (w.as_str(), c))
    }
}

/// Resolves the cluster id for a (possibly out-of-range) sentence position.
pub fn lookup_cluster(word: &str, position: isize, sentence_len: usize, map: &ClusterMap) -> usize {
    if position < 0 || position >= sentence_len as isize {
        map.boundary_id()
    } else {
        map.get(word).unwrap_or_else(|| map.oov_id())
    }
}

fn cluster_at(sentence: &Sentence, position: isize, map: &ClusterMap) -> usize {
    let word = if position >= 0 && (position as usize) < sentence.len() {
        sentence.tokens[position as usize].as_str()
    } else {
        ""
    };
    lookup_cluster(word, position, sentence.len(), map)
}

/// The cluster maps available to feature extraction, keyed by kind.
#[derive(Debug, Clone, Default)]
pub struct ClusterMaps {
    maps: [Option<ClusterMap>; 4],
}

impl ClusterMaps {
    pub fn empty() -> Self {
        Self::default()
    }

    fn slot(kind: ClusterKind) -> usize {
        match kind {
            ClusterKind::Rho => 0,
            ClusterKind::Zeta => 1,
            ClusterKind::Eta => 2,
            ClusterKind::Tau => 3,
        }
    }

    pub fn insert(&mut self, map: ClusterMap) {
        let slot = Self::slot(map.kind());
        self.maps[slot] = Some(map);
    }

    pub fn get(&self, kind: ClusterKind) -> Option<&ClusterMap> {
        self.maps[Self::slot(kind)].as_ref()
    }

    /// Every cluster group enabled in `templates` must have its map.
    pub fn validate_for(&self, templates: &FeatureTemplateSet) -> Result<()> {
        for (enabled, kind) in [
            (templates.rho, ClusterKind::Rho),
            (templates.zeta, ClusterKind::Zeta),
            (templates.eta, ClusterKind::Eta),
            (templates.tau, ClusterKind::Tau),
        ] {
            if enabled && self.get(kind).is_none() {
                return Err(Error::contract(format!(
                    "template group `{}` is enabled but no {} cluster map was provided",
                    kind.as_str(),
                    kind.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Flags selecting which template groups are extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureTemplateSet {
    /// The current word form, `w0`.
    pub lexical: bool,
    /// Affixes, capitalization shape and hyphenation of `w0`.
    pub signature: bool,
    /// The previous tag, `t-1`.
    pub transition: bool,
    pub rho: bool,
    pub zeta: bool,
    pub eta: bool,
    pub tau: bool,
    /// Restrict enabled cluster groups to their single primary template
    /// (`rho0` / `zeta0` / `eta-1` / `tau+1`); used by the minimal models.
    pub minimal_clusters: bool,
}

impl FeatureTemplateSet {
    /// Lexical + signature + transition, the cluster-free tagger.
    pub fn baseline() -> Self {
        FeatureTemplateSet {
            lexical: true,
            signature: true,
            transition: true,
            rho: false,
            zeta: false,
            eta: false,
            tau: false,
            minimal_clusters: false,
        }
    }

    pub fn with_cluster(mut self, kind: ClusterKind) -> Self {
        match kind {
            ClusterKind::Rho => self.rho = true,
            ClusterKind::Zeta => self.zeta = true,
            ClusterKind::Eta => self.eta = true,
            ClusterKind::Tau => self.tau = true,
        }
        self
    }

    pub fn enabled_clusters(&self) -> Vec<ClusterKind> {
        let mut kinds = Vec::new();
        if self.rho {
            kinds.push(ClusterKind::Rho);
        }
        if self.zeta {
            kinds.push(ClusterKind::Zeta);
        }
        if self.eta {
            kinds.push(ClusterKind::Eta);
        }
        if self.tau {
            kinds.push(ClusterKind::Tau);
        }
        kinds
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lexical
            || self.signature
            || self.transition
            || self.rho
            || self.zeta
            || self.eta
            || self.tau)
        {
            return Err(Error::contract("no feature template group enabled"));
        }
        Ok(())
    }

    /// Canonical flag names, used in the model file header.
    pub fn to_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.lexical {
            names.push("lexical");
        }
        if self.signature {
            names.push("signature");
        }
        if self.transition {
            names.push("transition");
        }
        if self.rho {
            names.push("rho");
        }
        if self.zeta {
            names.push("zeta");
        }
        if self.eta {
            names.push("eta");
        }
        if self.tau {
            names.push("tau");
        }
        if self.minimal_clusters {
            names.push("minimal-clusters");
        }
        names
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = FeatureTemplateSet {
            lexical: false,
            signature: false,
            transition: false,
            rho: false,
            zeta: false,
            eta: false,
            tau: false,
            minimal_clusters: false,
        };
        for name in names {
            match name {
                "lexical" => set.lexical = true,
                "signature" => set.signature = true,
                "transition" => set.transition = true,
                "rho" => set.rho = true,
                "zeta" => set.zeta = true,
                "eta" => set.eta = true,
                "tau" => set.tau = true,
                "minimal-clusters" => set.minimal_clusters = true,
                other => {
                    return Err(Error::contract(format!(
                        "unknown feature template flag `{other}`"
                    )))
                }
            }
        }
        set.validate()?;
        Ok(set)
    }
}

/// Capitalization shape of a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapShape {
    AllLower,
    InitialCap,
    AllCaps,
    Other,
}

impl CapShape {
    pub fn as_str(self) -> &'static str {
        match self {
            CapShape::AllLower => "all-lower",
            CapShape::InitialCap => "initial-cap",
            CapShape::AllCaps => "all-caps",
            CapShape::Other => "other",
        }
    }
}

/// The orthographic signature of a word: affixes up to length 3 (emitted
/// only when the word has at least that many code points), a 4-way
/// capitalization shape and a hyphen flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSignature {
    pub prefixes: Vec<String>,
    pub suffixes: Vec<String>,
    pub shape: CapShape,
    pub hyphen: bool,
}

pub fn word_signature(word: &str) -> WordSignature {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let mut prefixes = Vec::new();
    let mut suffixes = Vec::new();
    for len in 1..=3usize {
        if n >= len {
            prefixes.push(chars[..len].iter().collect());
            suffixes.push(chars[n - len..].iter().collect());
        }
    }
    let has_upper = chars.iter().any(|c| c.is_uppercase());
    let has_lower = chars.iter().any(|c| c.is_lowercase());
    let shape = if !has_upper {
        CapShape::AllLower
    } else if !has_lower {
        CapShape::AllCaps
    } else if chars[0].is_uppercase() {
        CapShape::InitialCap
    } else {
        CapShape::Other
    };
    WordSignature {
        prefixes,
        suffixes,
        shape,
        hyphen: word.contains('-'),
    }
}

/// Appends the base strings of all enabled templates that do not mention the
/// previous tag. Order is fixed, so interning order is deterministic.
pub(crate) fn static_bases(
    sentence: &Sentence,
    pos: usize,
    templates: &FeatureTemplateSet,
    maps: &ClusterMaps,
    out: &mut Vec<String>,
) {
    let word = sentence.tokens[pos].as_str();
    if templates.lexical {
        out.push(format!("w0={word}"));
    }
    if templates.signature {
        let sig = word_signature(word);
        for (i, p) in sig.prefixes.iter().enumerate() {
            out.push(format!("pref{}={p}", i + 1));
        }
        for (i, s) in sig.suffixes.iter().enumerate() {
            out.push(format!("suf{}={s}", i + 1));
        }
        out.push(format!("shape={}", sig.shape.as_str()));
        if sig.hyphen {
            out.push("hyphen".to_string());
        }
    }
    let ipos = pos as isize;
    for kind in [ClusterKind::Rho, ClusterKind::Zeta] {
        let enabled = match kind {
            ClusterKind::Rho => templates.rho,
            _ => templates.zeta,
        };
        if !enabled {
            continue;
        }
        let map = match maps.get(kind) {
            Some(m) => m,
            None => continue,
        };
        let name = kind.as_str();
        let c0 = cluster_at(sentence, ipos, map);
        out.push(format!("{name}0={c0}"));
        if templates.minimal_clusters {
            continue;
        }
        let c1 = cluster_at(sentence, ipos - 1, map);
        let c2 = cluster_at(sentence, ipos - 2, map);
        out.push(format!("{name}-1={c1}"));
        out.push(format!("{name}-2={c2}"));
        out.push(format!("{name}-1,{name}0={c1}|{c0}"));
        out.push(format!("{name}-2,{name}-1={c2}|{c1}"));
    }
    if templates.eta {
        if let Some(map) = maps.get(ClusterKind::Eta) {
            let c = cluster_at(sentence, ipos - 1, map);
            out.push(format!("eta-1={c}"));
        }
    }
    if templates.tau {
        if let Some(map) = maps.get(ClusterKind::Tau) {
            let c = cluster_at(sentence, ipos + 1, map);
            out.push(format!("tau+1={c}"));
        }
    }
}

/// Appends the base strings of all enabled templates conjoined with the
/// previous tag (`prev_label`).
pub(crate) fn dynamic_bases(
    sentence: &Sentence,
    pos: usize,
    prev_label: &str,
    templates: &FeatureTemplateSet,
    maps: &ClusterMaps,
    out: &mut Vec<String>,
) {
    if templates.transition {
        out.push(format!("t-1={prev_label}"));
    }
    if templates.minimal_clusters {
        return;
    }
    let ipos = pos as isize;
    for kind in [ClusterKind::Rho, ClusterKind::Zeta] {
        let enabled = match kind {
            ClusterKind::Rho => templates.rho,
            _ => templates.zeta,
        };
        if !enabled {
            continue;
        }
        let map = match maps.get(kind) {
            Some(m) => m,
            None => continue,
        };
        let name = kind.as_str();
        let c0 = cluster_at(sentence, ipos, map);
        let c1 = cluster_at(sentence, ipos - 1, map);
        out.push(format!("{name}0,t-1={c0}|{prev_label}"));
        out.push(format!("{name}-1,t-1={c1}|{prev_label}"));
    }
    if templates.eta {
        if let Some(map) = maps.get(ClusterKind::Eta) {
            let c = cluster_at(sentence, ipos - 1, map);
            out.push(format!("eta-1,t-1={c}|{prev_label}"));
        }
    }
}

/// Grow-on-train intern table from feature base strings to dense ids.
///
/// Inference-time callers only hold a shared reference, so the alphabet is
/// frozen there by construction; unseen bases simply fail the lookup and the
/// feature is dropped.
#[derive(Debug, Clone, Default)]
pub struct FeatureAlphabet {
    index: HashMap<String, BaseId>,
    names: Vec<String>,
}

impl FeatureAlphabet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> BaseId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<BaseId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: BaseId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Composes a full feature id from an interned base and a candidate tag.
#[inline]
pub fn feature_id(base: BaseId, candidate: TagId, n_tags: usize) -> FeatureId {
    base * n_tags + candidate
}

/// Splits a full feature id back into `(base, candidate_tag)`.
#[inline]
pub fn split_feature_id(id: FeatureId, n_tags: usize) -> (BaseId, TagId) {
    (id / n_tags, id % n_tags)
}

/// Extracts the full feature vector for one position and candidate tag,
/// interning any new bases.
///
/// `prev_tag` may be a boundary id (it is at position 0). Every emitted id is
/// unique within the returned vector.
#[allow(clippy::too_many_arguments)]
pub fn extract_features(
    sentence: &Sentence,
    position: usize,
    prev_tag: TagId,
    candidate_tag: TagId,
    templates: &FeatureTemplateSet,
    maps: &ClusterMaps,
    tagset: &TagSet,
    alphabet: &mut FeatureAlphabet,
) -> Result<Vec<FeatureId>> {
    if position >= sentence.len() {
        return Err(Error::contract(format!(
            "position {position} out of range for sentence of length {}",
            sentence.len()
        )));
    }
    if candidate_tag >= tagset.len() {
        return Err(Error::contract(format!(
            "candidate tag id {candidate_tag} is not a real tag"
        )));
    }
    let mut bases = Vec::new();
    static_bases(sentence, position, templates, maps, &mut bases);
    dynamic_bases(
        sentence,
        position,
        tagset.label(prev_tag),
        templates,
        maps,
        &mut bases,
    );
    let n_tags = tagset.len();
    Ok(bases
        .iter()
        .map(|b| feature_id(alphabet.intern(b), candidate_tag, n_tags))
        .collect())
}

/// Reads a cluster file: a `#K=<K>\tkind=<kind>` header followed by
/// `word\tcluster_id` lines.
pub fn read_cluster_map<R: Read>(source: R) -> Result<ClusterMap> {
    let mut lines = BufReader::new(source).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty cluster file"))??;
    let rest = header
        .strip_prefix("#K=")
        .ok_or_else(|| Error::parse(1, "expected `#K=<K>\\tkind=<kind>` header"))?;
    let (k_str, kind_str) = rest
        .split_once('\t')
        .ok_or_else(|| Error::parse(1, "expected `#K=<K>\\tkind=<kind>` header"))?;
    let k: usize = k_str
        .parse()
        .map_err(|_| Error::parse(1, format!("bad cluster count `{k_str}`")))?;
    let kind = kind_str
        .strip_prefix("kind=")
        .and_then(ClusterKind::parse)
        .ok_or_else(|| Error::parse(1, format!("bad cluster kind in `{kind_str}`")))?;

    let mut assignments = HashMap::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (word, id_str) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected `word\\tcluster_id`"))?;
        let id: usize = id_str
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad cluster id `{id_str}`")))?;
        if id >= k {
            return Err(Error::parse(
                line_no,
                format!("cluster id {id} outside 0..{k}"),
            ));
        }
        if assignments.insert(word.to_string(), id).is_some() {
            return Err(Error::parse(line_no, format!("duplicate word `{word}`")));
        }
    }
    ClusterMap::new(kind, k, assignments)
}

/// Writes the cluster file format read by [`read_cluster_map`]. Entries are
/// written in the order given.
pub fn write_cluster_entries<'a, I, W>(kind: ClusterKind, k: usize, entries: I, mut sink: W) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, usize)>,
    W: Write,
{
    writeln!(sink, "#K={k}\tkind={}", kind.as_str())?;
    for (word, id) in entries {
        debug_assert!(id < k);
        writeln!(sink, "{word}\t{id}")?;
    }
    Ok(())
}
