//! Text-guided relevance analysis: scoring candidate object classes against a
//! set of target activities through their label embeddings, ranking them and
//! keeping the `m` best.
//!
//! The overall relevance of a class is the plain sum of raw cosines between
//! its label vector and every activity label vector, accumulated in 64-bit in
//! label-sorted activity order so that results are bitwise reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};

use thiserror::Error;

use crate::embeddings::{cosine, EmbeddingError, EmbeddingTable, SimilarityScore};
use crate::tsv::format_sig;

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error("label {0:?} has no tokens")]
    EmptyLabel(String),
    #[error("label {0:?} has no token in the embedding table")]
    UnembeddableLabel(String),
    #[error("{side} label {label:?} cannot be embedded: {source}")]
    Side {
        side: Side,
        label: String,
        #[source]
        source: Box<RelevanceError>,
    },
    #[error("label {0:?} embeds to a zero vector")]
    DegenerateVector(String),
    #[error("the activity set is empty")]
    EmptyActivitySet,
    #[error("the candidate class set is empty")]
    EmptyClassSet,
    #[error("class label {0:?} appears more than once")]
    DuplicateClass(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl RelevanceError {
    /// The raw label that could not be embedded, looking through side tags.
    pub fn unembeddable_label(&self) -> Option<&str> {
        match self {
            RelevanceError::UnembeddableLabel(l) | RelevanceError::DegenerateVector(l) => Some(l),
            RelevanceError::Side { source, .. } => source.unembeddable_label(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Activity,
    Object,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Activity => "activity",
            Side::Object => "object",
        })
    }
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

/// A textual class label and its normalised tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPhrase {
    raw: String,
    tokens: Vec<String>,
}

impl LabelPhrase {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Splits a label on whitespace, `_`, `-` and lower→upper camelCase
/// boundaries, lowercases, and trims non-alphanumeric edge characters.
pub fn tokenize_label(raw: &str) -> Result<LabelPhrase> {
    let mut tokens = Vec::new();
    for piece in raw.split(|c: char| c.is_whitespace() || c == '_' || c == '-') {
        let mut current = String::new();
        let mut prev_lower = false;
        for c in piece.chars() {
            if prev_lower && c.is_uppercase() {
                tokens.push(std::mem::take(&mut current));
            }
            prev_lower = c.is_lowercase();
            current.push(c);
        }
        tokens.push(current);
    }
    let tokens: Vec<String> = tokens
        .iter()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(RelevanceError::EmptyLabel(raw.to_string()));
    }
    Ok(LabelPhrase {
        raw: raw.to_string(),
        tokens,
    })
}

/// Looks the underscore-joined phrase up first, falling back to the mean of
/// whichever individual tokens the table stores.
pub fn embed_label(phrase: &LabelPhrase, table: &EmbeddingTable) -> Result<Vec<f64>> {
    let joined = phrase.tokens.join("_");
    let vector: Vec<f64> = if let Some(v) = table.lookup(&joined) {
        v.iter().map(|&x| x as f64).collect()
    } else {
        let mut sum = vec![0.0f64; table.dim()];
        let mut found = 0usize;
        for token in &phrase.tokens {
            if let Some(v) = table.lookup(token) {
                for (s, &x) in sum.iter_mut().zip(v) {
                    *s += x as f64;
                }
                found += 1;
            }
        }
        if found == 0 {
            return Err(RelevanceError::UnembeddableLabel(phrase.raw.clone()));
        }
        sum.iter().map(|s| s / found as f64).collect()
    };
    if vector.iter().all(|&x| x == 0.0) {
        return Err(RelevanceError::DegenerateVector(phrase.raw.clone()));
    }
    Ok(vector)
}

fn embed_side(phrase: &LabelPhrase, table: &EmbeddingTable, side: Side) -> Result<Vec<f64>> {
    embed_label(phrase, table).map_err(|e| RelevanceError::Side {
        side,
        label: phrase.raw.clone(),
        source: Box::new(e),
    })
}

/// Cosine between an activity label and an object label.
pub fn pairwise_relevance(
    activity: &LabelPhrase,
    object: &LabelPhrase,
    table: &EmbeddingTable,
) -> Result<SimilarityScore> {
    let x = embed_side(activity, table, Side::Activity)?;
    let y = embed_side(object, table, Side::Object)?;
    Ok(cosine(&x, &y)?)
}

/// Activity vectors in the fixed accumulation order (sorted by raw label).
struct ActivityVectors {
    phrases: Vec<LabelPhrase>,
    vectors: Vec<Vec<f64>>,
}

impl ActivityVectors {
    fn new(activities: &[LabelPhrase], table: &EmbeddingTable) -> Result<Self> {
        if activities.is_empty() {
            return Err(RelevanceError::EmptyActivitySet);
        }
        let mut phrases = activities.to_vec();
        phrases.sort_by(|a, b| a.raw.cmp(&b.raw));
        let vectors = phrases
            .iter()
            .map(|p| embed_side(p, table, Side::Activity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { phrases, vectors })
    }

    fn kappa(&self, object: &[f64]) -> Result<f64> {
        let mut total = 0.0f64;
        for x in &self.vectors {
            total += cosine(x, object)?.value();
        }
        Ok(total)
    }
}

/// Sum of pairwise relevances of `object` to every activity.
pub fn overall_relevance(
    object: &LabelPhrase,
    activities: &[LabelPhrase],
    table: &EmbeddingTable,
) -> Result<f64> {
    let acts = ActivityVectors::new(activities, table)?;
    let y = embed_side(object, table, Side::Object)?;
    acts.kappa(&y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedClass {
    pub rank: usize,
    pub label: String,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLabel {
    pub label: String,
    pub reason: String,
}

/// Every embeddable candidate class with its relevance and 1-based rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceRanking {
    classes: Vec<RankedClass>,
    activities: Vec<LabelPhrase>,
    skipped: Vec<SkippedLabel>,
}

impl RelevanceRanking {
    /// Classes in rank order.
    pub fn classes(&self) -> &[RankedClass] {
        &self.classes
    }

    pub fn activities(&self) -> &[LabelPhrase] {
        &self.activities
    }

    /// Candidate labels excluded from ranking because they could not be embedded.
    pub fn skipped(&self) -> &[SkippedLabel] {
        &self.skipped
    }

    pub fn scores(&self) -> BTreeMap<&str, f64> {
        self.classes.iter().map(|c| (c.label.as_str(), c.kappa)).collect()
    }

    pub fn ranks(&self) -> BTreeMap<&str, usize> {
        self.classes.iter().map(|c| (c.label.as_str(), c.rank)).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "rank\tlabel\tkappa")?;
        for c in &self.classes {
            writeln!(w, "{}\t{}\t{}", c.rank, c.label, format_sig(c.kappa, 9))?;
        }
        Ok(())
    }

    pub fn write_skipped<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "label\treason")?;
        for s in &self.skipped {
            writeln!(w, "{}\t{}", s.label, s.reason)?;
        }
        Ok(())
    }
}

/// Descending relevance, ties broken by ascending label.
fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Scores every candidate class against the activity set and ranks them.
///
/// Candidates that cannot be embedded are skipped and listed in
/// [`RelevanceRanking::skipped`]; an unembeddable activity is an error.
pub fn rank_classes(
    activities: &[LabelPhrase],
    classes: &[LabelPhrase],
    table: &EmbeddingTable,
) -> Result<RelevanceRanking> {
    if classes.is_empty() {
        return Err(RelevanceError::EmptyClassSet);
    }
    let acts = ActivityVectors::new(activities, table)?;
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.raw.as_str()) {
            return Err(RelevanceError::DuplicateClass(c.raw.clone()));
        }
    }

    let mut scored = Vec::with_capacity(classes.len());
    let mut skipped = Vec::new();
    for c in classes {
        match embed_label(c, table) {
            Ok(y) => scored.push((c.raw.clone(), acts.kappa(&y)?)),
            Err(e) => skipped.push(SkippedLabel {
                label: c.raw.clone(),
                reason: e.to_string(),
            }),
        }
    }
    scored.sort_by(rank_order);
    let classes = scored
        .into_iter()
        .enumerate()
        .map(|(i, (label, kappa))| RankedClass {
            rank: i + 1,
            label,
            kappa,
        })
        .collect();
    Ok(RelevanceRanking {
        classes,
        activities: acts.phrases,
        skipped,
    })
}

/// The refined class set: every class ranked `m` or better.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedClassSet {
    selected: Vec<String>,
    m: usize,
    source: RelevanceRanking,
}

impl RefinedClassSet {
    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn source_ranking(&self) -> &RelevanceRanking {
        &self.source
    }

    pub fn contains(&self, label: &str) -> bool {
        self.selected.iter().any(|s| s == label)
    }

    pub fn write_selection<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for label in &self.selected {
            writeln!(w, "{label}")?;
        }
        Ok(())
    }
}

pub fn select_top_m(ranking: &RelevanceRanking, m: usize) -> RefinedClassSet {
    let selected = ranking
        .classes
        .iter()
        .take_while(|c| c.rank <= m)
        .map(|c| c.label.clone())
        .collect();
    RefinedClassSet {
        selected,
        m,
        source: ranking.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub activity: String,
    pub rank: usize,
    pub object: String,
    pub phi: f64,
}

/// Per-activity top-`k` objects among the selected classes, by pairwise relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct TraReport {
    pub rows: Vec<ReportRow>,
}

impl TraReport {
    pub fn top_for(&self, activity: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.activity == activity).collect()
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "activity\trank\tobject_label\tphi")?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                r.activity,
                r.rank,
                r.object,
                format_sig(r.phi, 9)
            )?;
        }
        Ok(())
    }
}

/// For every activity, the `k` selected classes with the highest pairwise
/// relevance. Ties are broken by label, as in ranking.
pub fn tra_report(refined: &RefinedClassSet, table: &EmbeddingTable, k: usize) -> Result<TraReport> {
    let acts = ActivityVectors::new(&refined.source.activities, table)?;
    let mut objects = Vec::with_capacity(refined.selected.len());
    for label in &refined.selected {
        let phrase = tokenize_label(label)?;
        objects.push((label.clone(), embed_side(&phrase, table, Side::Object)?));
    }
    let mut rows = Vec::new();
    for (phrase, x) in acts.phrases.iter().zip(&acts.vectors) {
        let mut scored = objects
            .iter()
            .map(|(label, y)| Ok((label.clone(), cosine(x, y)?.value())))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(rank_order);
        rows.extend(
            scored
                .into_iter()
                .take(k)
                .enumerate()
                .map(|(i, (object, phi))| ReportRow {
                    activity: phrase.raw.clone(),
                    rank: i + 1,
                    object,
                    phi,
                }),
        );
    }
    Ok(TraReport { rows })
}

/// Tokenises a list of raw labels, skipping blank lines.
pub fn parse_labels<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Result<Vec<LabelPhrase>> {
    lines
        .into_iter()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(tokenize_label)
        .collect()
}
