//! Word error rate: unit-cost Levenshtein alignment over whitespace tokens.

use crate::error::{Error, Result};
use crate::vocab;

/// Alignment counts for one reference/hypothesis pair, or a corpus total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl WerBreakdown {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.distance() as f64 / self.reference_words as f64
    }

    /// Corpus aggregation: summed counts, so the corpus rate is total edit
    /// distance over total reference words.
    pub fn absorb(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_words += other.reference_words;
    }
}

/// Scores one hypothesis against its reference. Both sides are normalized
/// (lowercase, collapsed whitespace) before tokenization. Ties between
/// optimal alignments are broken preferring substitution over an
/// insertion+deletion pair. An empty hypothesis scores as all deletions.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r_text = vocab::normalize(reference);
    let h_text = vocab::normalize(hypothesis);
    let r: Vec<&str> = r_text.split_whitespace().collect();
    let h: Vec<&str> = h_text.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Input("reference has no words to score against".into()));
    }

    // dist[i][j]: edits aligning the first i reference words with the first
    // j hypothesis words.
    let mut dist = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        dist[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = dist[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = sub.min(del).min(ins);
        }
    }

    // Backtrace, diagonal first so ties resolve to substitution.
    let mut out = WerBreakdown { reference_words: r.len(), ..Default::default() };
    let (mut i, mut j) = (r.len(), h.len());
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 && here == dist[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                out.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dist[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(out.distance(), dist[r.len()][h.len()]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_score_zero() {
        let b = wer("a b c", "a b c").unwrap();
        assert_eq!(b.distance(), 0);
        assert_eq!(b.rate(), 0.0);
        assert_eq!(b.reference_words, 3);
    }

    #[test]
    fn single_substitution() {
        let b = wer("a b c", "a x c").unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 0));
        assert!((b.rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_insertion_against_short_reference() {
        let b = wer("a", "a b").unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 0, 1));
        assert_eq!(b.rate(), 1.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = wer("a b c", "").unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 3, 0));
        assert_eq!(b.rate(), 1.0);
    }

    #[test]
    fn empty_reference_is_rejected() {
        assert!(matches!(wer("   ", "a"), Err(Error::Input(_))));
    }

    #[test]
    fn normalization_applies_to_both_sides() {
        let b = wer("  Hello   WORLD ", "hello world").unwrap();
        assert_eq!(b.distance(), 0);
    }

    #[test]
    fn ties_prefer_substitution_over_insert_delete() {
        // "a b" vs "b a" costs 2 either as two substitutions or as one
        // deletion plus one insertion; the breakdown must pick the former
        let b = wer("a b", "b a").unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (2, 0, 0));
    }

    #[test]
    fn distance_is_symmetric_when_both_sides_have_words() {
        let cases = [("a b c", "a c"), ("x", "x y z"), ("p q", "q p"), ("m n o", "m o n")];
        for (r, h) in cases {
            assert_eq!(wer(r, h).unwrap().distance(), wer(h, r).unwrap().distance());
        }
    }

    #[test]
    fn corpus_rate_is_total_edits_over_total_reference_words() {
        let pairs = [("a b c", "a b c"), ("a b", "x b"), ("a", "")];
        let mut total = WerBreakdown::default();
        let mut edits = 0;
        let mut words = 0;
        for (r, h) in pairs {
            let b = wer(r, h).unwrap();
            edits += b.distance();
            words += b.reference_words;
            total.absorb(&b);
        }
        assert_eq!(total.distance(), edits);
        assert_eq!(total.reference_words, words);
        assert!((total.rate() - edits as f64 / words as f64).abs() < 1e-15);
    }
}
