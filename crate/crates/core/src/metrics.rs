//! NEWS shared-task transliteration metrics.
//!
//! * ACC: top-1 candidate equals some reference.
//! * Mean F-score: LCS-based fuzzy match of the top-1 candidate against the closest
//!   reference, with `LCS(c, r) = (|c| + |r| − ED(c, r)) / 2`.
//! * MRR: reciprocal rank of the first correct candidate.
//! * MAP: `(1/m) Σ_k correct(k) · P@k` for an item with `m` references.
//!
//! Strings are compared as NFC-normalized code points. Candidate lists are deduplicated
//! (first occurrence wins) and cut to [`DEFAULT_N`] entries when items are built through
//! [`EvalItem::new`].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::data::{load_corpus, SequencePair};
use crate::error::{Error, Result};

/// Candidate-list cutoff.
pub const DEFAULT_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub references: Vec<String>,
    pub candidates: Vec<String>,
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn dedup(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

impl EvalItem {
    /// Normalizes, deduplicates and truncates to [`DEFAULT_N`] candidates.
    pub fn new<R, C>(references: R, candidates: C) -> Result<Self>
    where
        R: IntoIterator,
        R::Item: AsRef<str>,
        C: IntoIterator,
        C::Item: AsRef<str>,
    {
        Self::with_cutoff(references, candidates, DEFAULT_N)
    }

    pub fn with_cutoff<R, C>(references: R, candidates: C, n: usize) -> Result<Self>
    where
        R: IntoIterator,
        R::Item: AsRef<str>,
        C: IntoIterator,
        C::Item: AsRef<str>,
    {
        let references = dedup(references.into_iter().map(|r| nfc(r.as_ref())));
        if references.is_empty() {
            return Err(Error::InvalidInput("item without references".into()));
        }
        let mut candidates = dedup(candidates.into_iter().map(|c| nfc(c.as_ref())));
        candidates.truncate(n);
        Ok(Self {
            references,
            candidates,
        })
    }

    fn is_correct(&self, candidate: &str) -> bool {
        self.references.iter().any(|r| r == candidate)
    }

    /// 1-based rank of the first correct candidate.
    fn first_hit(&self) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| self.is_correct(c))
            .map(|i| i + 1)
    }
}

fn mean(items: &[EvalItem], f: impl Fn(&EvalItem) -> f64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidInput("no items to score".into()));
    }
    Ok(items.iter().map(f).sum::<f64>() / items.len() as f64)
}

pub fn acc(items: &[EvalItem]) -> Result<f64> {
    mean(items, |it| match it.candidates.first() {
        Some(c) if it.is_correct(c) => 1.0,
        _ => 0.0,
    })
}

/// Unit-cost Levenshtein distance over code points.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F-score of `candidate` against the reference with the smallest edit distance.
pub fn lcs_fscore<S: AsRef<str>>(candidate: &str, references: &[S]) -> f64 {
    let c_len = candidate.chars().count();
    let Some((r_len, ed)) = references
        .iter()
        .map(|r| (r.as_ref().chars().count(), edit_distance(candidate, r.as_ref())))
        .min_by_key(|&(_, ed)| ed)
    else {
        return 0.0;
    };
    if c_len == 0 || r_len == 0 {
        return if c_len == r_len { 1.0 } else { 0.0 };
    }
    let lcs = (c_len + r_len - ed) as f64 / 2.0;
    let recall = lcs / r_len as f64;
    let precision = lcs / c_len as f64;
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

pub fn mean_fscore(items: &[EvalItem]) -> Result<f64> {
    mean(items, |it| {
        it.candidates
            .first()
            .map_or(0.0, |c| lcs_fscore(c, &it.references))
    })
}

pub fn mrr(items: &[EvalItem]) -> Result<f64> {
    mean(items, |it| it.first_hit().map_or(0.0, |k| 1.0 / k as f64))
}

/// Mean average precision over the top `m` ranks of each item, `m` being its reference
/// count. With one reference per item this is exactly ACC.
pub fn map_metric(items: &[EvalItem]) -> Result<f64> {
    mean(items, |it| {
        let mut matched: HashSet<&str> = HashSet::new();
        let mut total = 0.0;
        let m = it.references.len();
        for (k, c) in it.candidates.iter().take(m).enumerate() {
            if it.is_correct(c) && matched.insert(c.as_str()) {
                total += matched.len() as f64 / (k + 1) as f64;
            }
        }
        total / it.references.len() as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub fscore: f64,
    pub mrr: f64,
    pub map: f64,
    pub item_count: usize,
}

impl MetricsReport {
    pub fn compute(items: &[EvalItem]) -> Result<Self> {
        Ok(Self {
            acc: acc(items)?,
            fscore: mean_fscore(items)?,
            mrr: mrr(items)?,
            map: map_metric(items)?,
            item_count: items.len(),
        })
    }

    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("acc", self.acc),
            ("fscore", self.fscore),
            ("mrr", self.mrr),
            ("map", self.map),
        ]
    }

    /// `metric,value` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.rows() {
            let _ = writeln!(out, "{name},{v:?}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.rows() {
            let _ = writeln!(out, "{:<8}{v:>10.4}", name.to_uppercase());
        }
        let _ = writeln!(
            out,
            "{} items; candidates deduplicated, cutoff n={DEFAULT_N}",
            self.item_count
        );
        out
    }
}

/// Ranked candidates per source, in first-seen source order.
pub fn parse_nbest(text: &str, origin: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String)>> = HashMap::new();
    for (n, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err("expected source, rank and candidate columns"));
        }
        let rank: usize = fields[1].parse().map_err(|_| err("rank is not an integer"))?;
        let source = fields[0].to_string();
        if !rows.contains_key(&source) {
            order.push(source.clone());
        }
        rows.entry(source)
            .or_default()
            .push((rank, fields[2].to_string()));
    }
    Ok(order
        .into_iter()
        .map(|s| {
            let mut cands = rows.remove(&s).unwrap_or_default();
            cands.sort_by_key(|(rank, _)| *rank);
            (s, cands.into_iter().map(|(_, c)| c).collect())
        })
        .collect())
}

/// Joins n-best lists with references by source. Items follow reference order.
pub fn align(nbest: &[(String, Vec<String>)], references: &[SequencePair]) -> Result<Vec<EvalItem>> {
    let by_source: HashMap<&str, &Vec<String>> =
        nbest.iter().map(|(s, c)| (s.as_str(), c)).collect();
    let ref_sources: HashSet<&str> = references.iter().map(|p| p.source.as_str()).collect();
    let mut missing: Vec<String> = references
        .iter()
        .filter(|p| !by_source.contains_key(p.source.as_str()))
        .map(|p| p.source.clone())
        .collect();
    missing.extend(
        nbest
            .iter()
            .filter(|(s, _)| !ref_sources.contains(s.as_str()))
            .map(|(s, _)| s.clone()),
    );
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }
    references
        .iter()
        .map(|p| EvalItem::new(&p.targets, by_source[p.source.as_str()]))
        .collect()
}

pub fn score_file(
    nbest_path: impl AsRef<Path>,
    reference_path: impl AsRef<Path>,
) -> Result<MetricsReport> {
    let nbest_path = nbest_path.as_ref();
    let text = std::fs::read_to_string(nbest_path).map_err(|e| Error::io(nbest_path, e))?;
    let nbest = parse_nbest(&text, &nbest_path.display().to_string())?;
    let references = load_corpus(reference_path)?;
    MetricsReport::compute(&align(&nbest, &references)?)
}
