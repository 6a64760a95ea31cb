//! Synthetic corpora for end-to-end runs.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use translit::SequencePair;

/// `count` distinct random strings over `alphabet` with lengths in `min..=max`.
pub fn random_strings(alphabet: &str, count: usize, min: usize, max: usize, seed: u64) -> Vec<String> {
    let chars: Vec<char> = alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.gen_range(min..=max);
        let s: String = (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

pub fn copy_pairs(strings: &[String]) -> Vec<SequencePair> {
    strings.iter().map(|s| SequencePair::new(s.clone(), s.clone())).collect()
}

pub const CIPHER_ALPHABET: &str = "abcdehiklnost";

/// Left-to-right substitution into Cyrillic with three context rules:
/// `sh` → `ш`, `kh` → `х`, and `c` → `ц` before `e`/`i` but `к` elsewhere.
pub fn cipher(word: &str) -> String {
    let chars: Vec<char> = word.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    while i < chars.len() {
        let next = chars.get(i + 1).copied();
        let (glyph, used) = match (chars[i], next) {
            ('s', Some('h')) => ('ш', 2),
            ('k', Some('h')) => ('х', 2),
            ('c', Some('e' | 'i')) => ('ц', 1),
            ('c', _) => ('к', 1),
            (c, _) => (single(c), 1),
        };
        out.push(glyph);
        i += used;
    }
    out
}

fn single(c: char) -> char {
    match c {
        'a' => 'а',
        'b' => 'б',
        'd' => 'д',
        'e' => 'е',
        'h' => 'г',
        'i' => 'и',
        'k' => 'к',
        'l' => 'л',
        'n' => 'н',
        'o' => 'о',
        's' => 'с',
        't' => 'т',
        other => panic!("no cipher mapping for {other:?}"),
    }
}

pub fn cipher_pairs(strings: &[String]) -> Vec<SequencePair> {
    strings.iter().map(|s| SequencePair::new(s.clone(), cipher(s))).collect()
}
