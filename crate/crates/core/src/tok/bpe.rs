use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Byte-level BPE tokenizer. IDs `0..256` are raw bytes; merge `i`
/// produces ID `256 + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenizer {
    merges: Vec<(TokenId, TokenId)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(TokenId, TokenId), usize>,
}

impl Default for TextTokenizer {
    fn default() -> Self {
        Self::bytes_only()
    }
}

impl TextTokenizer {
    pub fn bytes_only() -> Self {
        Self {
            merges: Vec::new(),
            pieces: (0..=255u8).map(|b| vec![b]).collect(),
            ranks: HashMap::new(),
        }
    }

    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut tok = Self::bytes_only();
        for (i, (a, b)) in merges.into_iter().enumerate() {
            let n = tok.pieces.len() as TokenId;
            if a >= n || b >= n {
                return Err(Error::invalid(format!(
                    "merge {i} ({a}, {b}) references an undefined token"
                )));
            }
            tok.push_merge(a, b);
        }
        Ok(tok)
    }

    fn push_merge(&mut self, a: TokenId, b: TokenId) {
        let mut piece = self.pieces[a as usize].clone();
        piece.extend_from_slice(&self.pieces[b as usize]);
        self.ranks.insert((a, b), self.merges.len());
        self.merges.push((a, b));
        self.pieces.push(piece);
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// `256 + number of merges`.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, s: &str) -> Vec<TokenId> {
        self.encode_bytes(s.as_bytes())
    }

    /// Applies merges greedily: repeatedly merges every occurrence of the
    /// lowest-ranked adjacent pair, left to right.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else {
                break;
            };
            ids = merge_pair(&ids, pair, 256 + rank as TokenId);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or_else(|| Error::InvalidToken {
                id,
                reason: format!("not a textual id (vocab size {})", self.vocab_size()),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Decodes to a string; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// One merge per line as two decimal token IDs.
    pub fn write_merges<W: Write>(&self, mut w: W) -> Result<()> {
        for (a, b) in &self.merges {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn read_merges<R: BufRead>(r: R) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::parse::<TokenId>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => return Err(Error::parse(i + 1, format!("bad merge line {line:?}"))),
            }
        }
        Self::from_merges(merges)
    }
}

fn merge_pair(ids: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns up to `target_merges` merges from `corpus`. Each round merges the
/// most frequent adjacent pair (counted over all positions); ties go to the
/// lexicographically smallest `(left bytes, right bytes)`. Stops early when
/// no adjacent pair remains.
pub fn train_bpe<S: AsRef<[u8]>>(corpus: &[S], target_merges: usize) -> Result<TextTokenizer> {
    if corpus.is_empty() {
        return Err(Error::invalid("BPE training corpus is empty"));
    }
    let mut counts: BTreeMap<&[u8], usize> = BTreeMap::new();
    for s in corpus {
        *counts.entry(s.as_ref()).or_default() += 1;
    }
    let mut words: Vec<(Vec<TokenId>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as TokenId).collect(), c))
        .collect();
    let mut tok = TextTokenizer::bytes_only();
    for _ in 0..target_merges {
        let mut pairs: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let Some((&best, _)) = pairs.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (tok.piece(pb.0), tok.piece(pb.1));
                let kb = (tok.piece(pa.0), tok.piece(pa.1));
                ka.cmp(&kb)
            })
            .then_with(|| pb.cmp(pa))
        }) else {
            break;
        };
        let new_id = tok.vocab_size() as TokenId;
        tok.push_merge(best.0, best.1);
        for (w, _) in words.iter_mut() {
            *w = merge_pair(w, best, new_id);
        }
    }
    Ok(tok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_merges_is_bytes() {
        let tok = train_bpe(&["hello"], 0).unwrap();
        assert_eq!(tok.vocab_size(), 256);
        assert_eq!(tok.encode("hi"), vec![104, 105]);
    }

    #[test]
    fn single_pair_corpus() {
        let tok = train_bpe(&["aaaa"], 1).unwrap();
        assert_eq!(tok.merges(), &[(97, 97)]);
        assert_eq!(tok.encode("aaaa"), vec![256, 256]);
        assert_eq!(tok.encode("aaa"), vec![256, 97]);
    }

    #[test]
    fn stops_when_exhausted() {
        let tok = train_bpe(&["ab"], 5).unwrap();
        assert_eq!(tok.merges().len(), 1);
        assert!(train_bpe::<&str>(&[], 3).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // every pair occurs once; ("a","b") is the smallest
        let tok = train_bpe(&["abxba"], 1).unwrap();
        assert_eq!(tok.merges(), &[(97, 98)]);
    }

    #[test]
    fn empty_and_invalid_decode() {
        let tok = train_bpe(&["the cat"], 3).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert!(tok.decode(&[tok.vocab_size() as TokenId]).is_err());
    }

    #[test]
    fn merges_file_round_trip() {
        let tok = train_bpe(&["this cat sees that dog", "every dog likes some cat"], 20).unwrap();
        let mut buf = Vec::new();
        tok.write_merges(&mut buf).unwrap();
        assert_eq!(TextTokenizer::read_merges(buf.as_slice()).unwrap(), tok);
        assert!(TextTokenizer::read_merges("1 2 3\n".as_bytes()).is_err());
        assert!(TextTokenizer::read_merges("300 1\n".as_bytes()).is_err());
    }
}
