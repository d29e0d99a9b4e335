//! Text-only sentences from a small grammar whose vocabulary is disjoint
//! from the caption grammar:
//!
//! ```text
//! sentence := np VERB np
//! np       := DET NOUN | DET ADJ NOUN      (each alternative with p = 1/2)
//! ```
//!
//! Every terminal class is drawn uniformly.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DETERMINERS: [&str; 4] = ["this", "that", "every", "some"];
pub const ADJECTIVES: [&str; 5] = ["small", "big", "happy", "old", "quiet"];
pub const NOUNS: [&str; 6] = ["cat", "dog", "bird", "fish", "horse", "mouse"];
pub const VERBS: [&str; 5] = ["sees", "likes", "chases", "follows", "finds"];

/// Probability that a noun phrase carries an adjective.
pub const ADJECTIVE_PROB: f64 = 0.5;

fn noun_phrase(rng: &mut impl Rng, out: &mut Vec<&'static str>) {
    out.push(DETERMINERS.choose(rng).unwrap());
    if rng.random_bool(ADJECTIVE_PROB) {
        out.push(ADJECTIVES.choose(rng).unwrap());
    }
    out.push(NOUNS.choose(rng).unwrap());
}

fn sentence(rng: &mut impl Rng) -> String {
    let mut words = Vec::with_capacity(7);
    noun_phrase(rng, &mut words);
    words.push(VERBS.choose(rng).unwrap());
    noun_phrase(rng, &mut words);
    words.join(" ")
}

pub fn gen_text_corpus(seed: u64, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::invalid("text corpus size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sentence(&mut rng)).collect())
}

fn parse_np(words: &[&str], at: usize) -> Result<usize> {
    let Some(det) = words.get(at) else {
        return Err(Error::parse(at, "expected determiner"));
    };
    if !DETERMINERS.contains(det) {
        return Err(Error::parse(at, format!("expected determiner, found {det:?}")));
    }
    let mut i = at + 1;
    if words.get(i).is_some_and(|w| ADJECTIVES.contains(w)) {
        i += 1;
    }
    match words.get(i) {
        Some(w) if NOUNS.contains(w) => Ok(i + 1),
        Some(w) => Err(Error::parse(i, format!("expected noun, found {w:?}"))),
        None => Err(Error::parse(i, "expected noun")),
    }
}

/// Checks membership in the sentence grammar.
pub fn parse_sentence(text: &str) -> Result<()> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let i = parse_np(&words, 0)?;
    match words.get(i) {
        Some(w) if VERBS.contains(w) => {}
        Some(w) => return Err(Error::parse(i, format!("expected verb, found {w:?}"))),
        None => return Err(Error::parse(i, "expected verb")),
    }
    let end = parse_np(&words, i + 1)?;
    if end != words.len() {
        return Err(Error::parse(end, "trailing words"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn deterministic_and_grammatical() {
        let a = gen_text_corpus(11, 500).unwrap();
        assert_eq!(a, gen_text_corpus(11, 500).unwrap());
        for s in &a {
            parse_sentence(s).unwrap();
        }
        assert!(gen_text_corpus(0, 0).is_err());
        assert!(parse_sentence("this cat sees").is_err());
        assert!(parse_sentence("a red square").is_err());
    }

    // Expected word counts per sentence, derived by hand from the grammar:
    // 2 determiners, 2 nouns, 1 verb, and 2 * 1/2 adjectives on average.
    #[test]
    fn unigram_entropy_matches_grammar() {
        let per_sentence = 2.0 + 2.0 + 1.0 + 1.0;
        let mut analytic = 0.0;
        for (count, k) in [(2.0, 4.0), (1.0, 5.0), (2.0, 6.0), (1.0, 5.0)] {
            let p = count / k / per_sentence;
            analytic -= k * p * f64::ln(p);
        }
        let corpus = gen_text_corpus(3, 20_000).unwrap();
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for s in &corpus {
            for w in s.split_whitespace() {
                *freq.entry(w).or_default() += 1;
                total += 1;
            }
        }
        let empirical: f64 = freq
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        let rel = (empirical - analytic).abs() / analytic;
        assert!(rel < 0.05, "empirical {empirical} analytic {analytic}");
    }
}
