//! Brute-force metric definitions over raw (unnormalized, undeduplicated) candidate lists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct RawItem {
    pub references: Vec<String>,
    pub candidates: Vec<String>,
}

/// First-occurrence dedup followed by the top-`n` cutoff.
fn ranked(raw: &[String], n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in raw {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out.truncate(n);
    out
}

/// Edit distance by plain recursion over all alignments; only for short strings.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance(ra, rb) + usize::from(x != y);
            let del = edit_distance(ra, b) + 1;
            let ins = edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn fscore(cand: &str, refs: &[String]) -> f64 {
    let c: Vec<char> = cand.chars().collect();
    let mut best: Option<(usize, usize)> = None;
    for r in refs {
        let rc: Vec<char> = r.chars().collect();
        let ed = edit_distance(&c, &rc);
        if best.map_or(true, |(b, _)| ed < b) {
            best = Some((ed, rc.len()));
        }
    }
    let (ed, r_len) = best.unwrap();
    if c.is_empty() || r_len == 0 {
        return if c.len() == r_len { 1.0 } else { 0.0 };
    }
    let lcs = (c.len() + r_len - ed) as f64 / 2.0;
    let (rec, prec) = (lcs / r_len as f64, lcs / c.len() as f64);
    if rec + prec == 0.0 {
        0.0
    } else {
        2.0 * rec * prec / (rec + prec)
    }
}

pub struct Scores {
    pub acc: f64,
    pub fscore: f64,
    pub mrr: f64,
    pub map: f64,
}

pub fn score(items: &[RawItem], n: usize) -> Scores {
    let (mut acc, mut f, mut mrr, mut map) = (0.0, 0.0, 0.0, 0.0);
    for it in items {
        let mut refs: Vec<String> = Vec::new();
        for r in &it.references {
            if !refs.contains(r) {
                refs.push(r.clone());
            }
        }
        let cands = ranked(&it.candidates, n);
        if let Some(top) = cands.first() {
            if refs.contains(top) {
                acc += 1.0;
            }
            f += fscore(top, &refs);
        }
        for (i, c) in cands.iter().enumerate() {
            if refs.contains(c) {
                mrr += 1.0 / (i + 1) as f64;
                break;
            }
        }
        let mut ap = 0.0;
        for k in 1..=cands.len().min(refs.len()) {
            if refs.contains(&cands[k - 1]) {
                let hits = cands[..k].iter().filter(|c| refs.contains(c)).count();
                ap += hits as f64 / k as f64;
            }
        }
        map += ap / refs.len() as f64;
    }
    let m = items.len() as f64;
    Scores {
        acc: acc / m,
        fscore: f / m,
        mrr: mrr / m,
        map: map / m,
    }
}

fn word(rng: &mut ChaCha8Rng, min: usize) -> String {
    let len = rng.gen_range(min..=4);
    (0..len).map(|_| ['a', 'b', 'c'][rng.gen_range(0..3)]).collect()
}

/// A random test set over a three-letter alphabet, so hits, duplicates and near misses are
/// common. `max_refs = 1` gives a single-reference set.
pub fn random_set(rng: &mut ChaCha8Rng, max_refs: usize) -> Vec<RawItem> {
    (0..rng.gen_range(1..=8))
        .map(|_| {
            let references = (0..rng.gen_range(1..=max_refs)).map(|_| word(rng, 1)).collect();
            let candidates = (0..rng.gen_range(0..=13)).map(|_| word(rng, 0)).collect();
            RawItem {
                references,
                candidates,
            }
        })
        .collect()
}
