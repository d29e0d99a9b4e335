//! Unified sequence layouts, their parser, caption dropping, the chat
//! template, and sequence packing.
//!
//! ```text
//! text-only      [SOS] x.. [EOS]
//! image-to-text  [SOS] [SOI] y.. [EOI] x.. [EOS]
//! text-to-image  [SOS] x.. [SOI] y.. [EOI] [EOS]
//! unconditional  [SOS] [SOI] y.. [EOI] [EOS]
//! ```
//!
//! The image-to-text form with no text is byte-identical to the
//! unconditional form and parses as the latter.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tok::TextTokenizer;
use crate::vocab::{Special, TokenClass, TokenId, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqKind {
    TextOnly,
    ImageToText,
    TextToImage,
    UnconditionalImage,
    /// Any other well-formed mix of text and image segments.
    Interleaved,
}

/// Training task a sequence belongs to; the unit of the data ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Und,
    Gen,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Und, Modality::Gen];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl SeqKind {
    pub fn modality(self) -> Option<Modality> {
        match self {
            SeqKind::TextOnly => Some(Modality::Text),
            SeqKind::ImageToText => Some(Modality::Und),
            SeqKind::TextToImage | SeqKind::UnconditionalImage => Some(Modality::Gen),
            SeqKind::Interleaved => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Text,
    Image,
}

/// A run of content tokens; delimiters are not included in `range`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedSequence {
    pub ids: Vec<TokenId>,
    pub kind: SeqKind,
    pub segments: Vec<Segment>,
}

impl UnifiedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concatenated content of all text segments.
    pub fn text_ids(&self) -> Vec<TokenId> {
        self.collect(SegmentKind::Text)
    }

    /// Concatenated content of all image segments.
    pub fn image_ids(&self) -> Vec<TokenId> {
        self.collect(SegmentKind::Image)
    }

    fn collect(&self, kind: SegmentKind) -> Vec<TokenId> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .flat_map(|s| self.ids[s.range.clone()].iter().copied())
            .collect()
    }

    /// Same layout with different token values (e.g. after masking).
    pub fn with_ids(&self, ids: Vec<TokenId>) -> Self {
        debug_assert_eq!(ids.len(), self.ids.len());
        Self {
            ids,
            kind: self.kind,
            segments: self.segments.clone(),
        }
    }
}

/// Builds and parses unified sequences for one vocabulary layout and a
/// fixed number of tokens per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceFormat {
    pub layout: VocabLayout,
    pub image_tokens: usize,
}

impl SequenceFormat {
    pub fn new(layout: VocabLayout, image_tokens: usize) -> Self {
        Self {
            layout,
            image_tokens,
        }
    }

    fn check_text(&self, x: &[TokenId]) -> Result<()> {
        match x.iter().find(|&&id| !self.layout.is_textual(id)) {
            Some(&id) => Err(Error::invalid(format!(
                "text segment holds non-textual id {}",
                self.layout.describe(id)
            ))),
            None => Ok(()),
        }
    }

    fn check_image(&self, y: &[TokenId]) -> Result<()> {
        if y.len() != self.image_tokens {
            return Err(Error::invalid(format!(
                "image segment must hold {} tokens, got {}",
                self.image_tokens,
                y.len()
            )));
        }
        let mask = self.layout.mask();
        match y.iter().find(|&&id| !self.layout.is_visual(id) && id != mask) {
            Some(&id) => Err(Error::invalid(format!(
                "image segment holds non-visual id {}",
                self.layout.describe(id)
            ))),
            None => Ok(()),
        }
    }

    /// `[SOS] x.. [EOS]`.
    pub fn text(&self, x: &[TokenId]) -> Result<UnifiedSequence> {
        self.check_text(x)?;
        let l = &self.layout;
        let mut ids = Vec::with_capacity(x.len() + 2);
        ids.push(l.sos());
        ids.extend_from_slice(x);
        ids.push(l.eos());
        Ok(UnifiedSequence {
            segments: vec![Segment {
                kind: SegmentKind::Text,
                range: 1..1 + x.len(),
            }],
            ids,
            kind: SeqKind::TextOnly,
        })
    }

    /// `[SOS] [SOI] y.. [EOI] x.. [EOS]`.
    pub fn und(&self, y: &[TokenId], x: &[TokenId]) -> Result<UnifiedSequence> {
        self.check_image(y)?;
        self.check_text(x)?;
        if x.is_empty() {
            return self.gen(x, y);
        }
        let l = &self.layout;
        let n = y.len();
        let mut ids = Vec::with_capacity(n + x.len() + 4);
        ids.extend([l.sos(), l.soi()]);
        ids.extend_from_slice(y);
        ids.push(l.eoi());
        ids.extend_from_slice(x);
        ids.push(l.eos());
        Ok(UnifiedSequence {
            segments: vec![
                Segment {
                    kind: SegmentKind::Image,
                    range: 2..2 + n,
                },
                Segment {
                    kind: SegmentKind::Text,
                    range: 3 + n..3 + n + x.len(),
                },
            ],
            ids,
            kind: SeqKind::ImageToText,
        })
    }

    /// `[SOS] x.. [SOI] y.. [EOI] [EOS]`; with empty `x` this is the
    /// unconditional image form.
    pub fn gen(&self, x: &[TokenId], y: &[TokenId]) -> Result<UnifiedSequence> {
        self.check_text(x)?;
        self.check_image(y)?;
        let l = &self.layout;
        let (m, n) = (x.len(), y.len());
        let mut ids = Vec::with_capacity(m + n + 4);
        ids.push(l.sos());
        ids.extend_from_slice(x);
        ids.push(l.soi());
        ids.extend_from_slice(y);
        ids.extend([l.eoi(), l.eos()]);
        let image = Segment {
            kind: SegmentKind::Image,
            range: 2 + m..2 + m + n,
        };
        let (kind, segments) = if m == 0 {
            (SeqKind::UnconditionalImage, vec![image])
        } else {
            (
                SeqKind::TextToImage,
                vec![
                    Segment {
                        kind: SegmentKind::Text,
                        range: 1..1 + m,
                    },
                    image,
                ],
            )
        };
        Ok(UnifiedSequence { ids, kind, segments })
    }

    /// Conditional image prompt `[SOS] x.. [SOI]`.
    pub fn gen_prompt(&self, x: &[TokenId]) -> Result<Vec<TokenId>> {
        self.check_text(x)?;
        let mut ids = vec![self.layout.sos()];
        ids.extend_from_slice(x);
        ids.push(self.layout.soi());
        Ok(ids)
    }

    /// Understanding prompt `[SOS] [SOI] y.. [EOI]` followed by optional
    /// leading text.
    pub fn und_prompt(&self, y: &[TokenId], x: &[TokenId]) -> Result<Vec<TokenId>> {
        self.check_image(y)?;
        self.check_text(x)?;
        let mut ids = vec![self.layout.sos(), self.layout.soi()];
        ids.extend_from_slice(y);
        ids.push(self.layout.eoi());
        ids.extend_from_slice(x);
        Ok(ids)
    }

    /// With probability `p`, removes the caption of a text-to-image sample.
    /// Exactly one uniform draw is consumed per call.
    pub fn drop_caption<R: Rng + ?Sized>(&self, seq: &UnifiedSequence, p: f64, rng: &mut R) -> Result<UnifiedSequence> {
        if seq.kind != SeqKind::TextToImage {
            return Err(Error::invalid(format!("caption drop needs a text-to-image sample, got {:?}", seq.kind)));
        }
        let u: f64 = rng.random();
        if u < p {
            self.gen(&[], &seq.image_ids())
        } else {
            Ok(seq.clone())
        }
    }

    /// Parses one of the four fixed layouts.
    pub fn parse(&self, ids: &[TokenId]) -> Result<UnifiedSequence> {
        let seq = self.parse_interleaved(ids)?;
        if seq.kind == SeqKind::Interleaved {
            return Err(Error::parse(0, "sequence does not match any fixed layout"));
        }
        Ok(seq)
    }

    /// Parses `[SOS] (text | [SOI] y^N [EOI])* [EOS]` and classifies the
    /// result. Errors name the first violating position.
    pub fn parse_interleaved(&self, ids: &[TokenId]) -> Result<UnifiedSequence> {
        let l = &self.layout;
        if ids.first() != Some(&l.sos()) {
            return Err(Error::parse(0, "sequence must begin with [SOS]"));
        }
        let mut segments: Vec<Segment> = Vec::new();
        let mut i = 1;
        let mut text_start: Option<usize> = None;
        let close_text = |segments: &mut Vec<Segment>, start: &mut Option<usize>, end: usize| {
            if let Some(s) = start.take() {
                segments.push(Segment {
                    kind: SegmentKind::Text,
                    range: s..end,
                });
            }
        };
        loop {
            let Some(&id) = ids.get(i) else {
                return Err(Error::parse(i, "missing [EOS]"));
            };
            match l.classify(id).map_err(|_| Error::parse(i, format!("id {id} outside vocabulary")))? {
                TokenClass::Textual => {
                    text_start.get_or_insert(i);
                    i += 1;
                }
                TokenClass::Special(Special::Eos) => {
                    close_text(&mut segments, &mut text_start, i);
                    if i + 1 != ids.len() {
                        return Err(Error::parse(i + 1, "tokens after [EOS]"));
                    }
                    break;
                }
                TokenClass::Special(Special::Soi) => {
                    close_text(&mut segments, &mut text_start, i);
                    let start = i + 1;
                    let mut j = start;
                    while j < ids.len() && j - start < self.image_tokens {
                        let t = ids[j];
                        if !(l.is_visual(t) || t == l.mask()) {
                            break;
                        }
                        j += 1;
                    }
                    if j - start != self.image_tokens {
                        return Err(Error::parse(
                            j,
                            format!("unterminated image: {} of {} tokens", j - start, self.image_tokens),
                        ));
                    }
                    if ids.get(j) != Some(&l.eoi()) {
                        return Err(Error::parse(j, "unterminated image: expected [EOI]"));
                    }
                    segments.push(Segment {
                        kind: SegmentKind::Image,
                        range: start..j,
                    });
                    i = j + 1;
                }
                TokenClass::Visual => return Err(Error::parse(i, "visual token outside an image")),
                TokenClass::Special(s) => {
                    return Err(Error::parse(i, format!("unexpected {} in text", s.name())))
                }
            }
        }
        let n = self.image_tokens;
        let len = ids.len();
        let kinds: Vec<SegmentKind> = segments.iter().map(|s| s.kind).collect();
        use SegmentKind::{Image, Text};
        let kind = match kinds.as_slice() {
            [] | [Text] => SeqKind::TextOnly,
            [Image, Text] if segments[0].range.start == 2 && segments[1].range == (3 + n..len - 1) => {
                SeqKind::ImageToText
            }
            [Image] if segments[0].range == (2..2 + n) && len == n + 4 => SeqKind::UnconditionalImage,
            [Text, Image] if segments[0].range.start == 1 && segments[1].range.end + 2 == len => {
                SeqKind::TextToImage
            }
            _ => SeqKind::Interleaved,
        };
        if kind == SeqKind::TextOnly && segments.is_empty() {
            segments.push(Segment {
                kind: Text,
                range: 1..1,
            });
        }
        Ok(UnifiedSequence {
            ids: ids.to_vec(),
            kind,
            segments,
        })
    }
}

/// One exchange of the chat template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub input: String,
    pub response: String,
}

impl Turn {
    pub fn new(input: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            response: response.into(),
        }
    }
}

/// The literal chat template text: `User:<input>\nAssistant:<response>` per
/// turn, turns joined by `\n`.
pub fn sft_text(turns: &[Turn]) -> Result<String> {
    if turns.is_empty() {
        return Err(Error::invalid("chat needs at least one turn"));
    }
    Ok(turns
        .iter()
        .map(|t| format!("User:{}\nAssistant:{}", t.input, t.response))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Encodes the chat template; wrap the result with a [`SequenceFormat`].
pub fn format_sft(tok: &TextTokenizer, turns: &[Turn]) -> Result<Vec<TokenId>> {
    Ok(tok.encode(&sft_text(turns)?))
}

/// A sample's location inside a packed row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpan {
    pub start: usize,
    pub len: usize,
    pub kind: SeqKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRow {
    pub ids: Vec<TokenId>,
    pub samples: Vec<SampleSpan>,
}

impl PackedRow {
    pub fn used_len(&self) -> usize {
        self.samples.last().map_or(0, |s| s.start + s.len)
    }

    /// For each position, the first position it may attend to. Trailing
    /// padding forms one extra block.
    pub fn block_starts(&self) -> Vec<usize> {
        let mut out = vec![self.used_len(); self.ids.len()];
        for s in &self.samples {
            out[s.start..s.start + s.len].fill(s.start);
        }
        out
    }

    /// Next-token targets: position `i` predicts `ids[i + 1]` when both lie
    /// in the same sample; padding and sample ends have no target.
    pub fn targets(&self) -> Vec<Option<TokenId>> {
        let mut out = vec![None; self.ids.len()];
        for s in &self.samples {
            for i in s.start..s.start + s.len - 1 {
                out[i] = Some(self.ids[i + 1]);
            }
        }
        out
    }

    /// Sample index owning each position (`None` for padding).
    pub fn owners(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.ids.len()];
        for (k, s) in self.samples.iter().enumerate() {
            out[s.start..s.start + s.len].fill(Some(k));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub row_len: usize,
    pub rows: Vec<PackedRow>,
}

impl PackedBatch {
    pub fn target_count(&self) -> usize {
        self.rows.iter().flat_map(|r| r.samples.iter()).map(|s| s.len - 1).sum()
    }
}

/// First-fit-decreasing packing into rows of `row_len`, padded with `[PAD]`.
/// Equal lengths keep input order.
pub fn pack(seqs: &[UnifiedSequence], row_len: usize, layout: &VocabLayout) -> Result<PackedBatch> {
    if let Some(s) = seqs.iter().find(|s| s.len() > row_len || s.is_empty()) {
        return Err(Error::invalid(format!(
            "sequence of length {} does not fit rows of {row_len}",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
    let mut rows: Vec<PackedRow> = Vec::new();
    for i in order {
        let s = &seqs[i];
        let slot = rows.iter().position(|r| row_len - r.used_len() >= s.len());
        let row = match slot {
            Some(r) => &mut rows[r],
            None => {
                rows.push(PackedRow {
                    ids: Vec::with_capacity(row_len),
                    samples: Vec::new(),
                });
                rows.last_mut().unwrap()
            }
        };
        row.samples.push(SampleSpan {
            start: row.ids.len(),
            len: s.len(),
            kind: s.kind,
        });
        row.ids.extend_from_slice(&s.ids);
    }
    for r in rows.iter_mut() {
        r.ids.resize(row_len, layout.pad());
    }
    Ok(PackedBatch { row_len, rows })
}

/// Per row, the attention blocks tiling `[0, row_len)`: one per sample plus
/// one for trailing padding. Attention never crosses a block boundary.
pub fn attention_blocks(batch: &PackedBatch) -> Vec<Vec<Range<usize>>> {
    batch
        .rows
        .iter()
        .map(|r| {
            let mut blocks: Vec<Range<usize>> = r.samples.iter().map(|s| s.start..s.start + s.len).collect();
            if r.used_len() < batch.row_len {
                blocks.push(r.used_len()..batch.row_len);
            }
            blocks
        })
        .collect()
}

const PACK_MAGIC: &[u8; 4] = b"UGPB";

/// `UGPB`, rows (u32), row_len (u32), ids as i32, then per row the sample
/// count (u32) and start offsets (u32); little-endian.
pub fn write_packed<W: Write>(batch: &PackedBatch, mut w: W) -> Result<()> {
    w.write_all(PACK_MAGIC)?;
    w.write_all(&(batch.rows.len() as u32).to_le_bytes())?;
    w.write_all(&(batch.row_len as u32).to_le_bytes())?;
    for r in &batch.rows {
        for &id in &r.ids {
            w.write_all(&(id as i32).to_le_bytes())?;
        }
    }
    for r in &batch.rows {
        w.write_all(&(r.samples.len() as u32).to_le_bytes())?;
        for s in &r.samples {
            w.write_all(&(s.start as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a packed batch; sample lengths and kinds are recovered from the
/// offsets, the padding, and the sequence grammar.
pub fn read_packed<R: Read>(fmt: &SequenceFormat, mut r: R) -> Result<PackedBatch> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if &b4 != PACK_MAGIC {
        return Err(Error::Corrupt("not a packed batch file".into()));
    }
    let read_u32 = |r: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let n_rows = read_u32(&mut r)? as usize;
    let row_len = read_u32(&mut r)? as usize;
    let mut all_ids = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut ids = Vec::with_capacity(row_len);
        for _ in 0..row_len {
            let v = read_u32(&mut r)? as i32;
            if v < 0 {
                return Err(Error::Corrupt(format!("negative token id {v}")));
            }
            ids.push(v as TokenId);
        }
        all_ids.push(ids);
    }
    let pad = fmt.layout.pad();
    let mut rows = Vec::with_capacity(n_rows);
    for ids in all_ids {
        let n = read_u32(&mut r)? as usize;
        let mut starts = Vec::with_capacity(n);
        for _ in 0..n {
            starts.push(read_u32(&mut r)? as usize);
        }
        let used = ids.iter().position(|&t| t == pad).unwrap_or(row_len);
        let mut samples = Vec::with_capacity(n);
        for (k, &start) in starts.iter().enumerate() {
            let end = starts.get(k + 1).copied().unwrap_or(used);
            if end <= start || end > row_len {
                return Err(Error::Corrupt(format!("bad sample offsets {starts:?}")));
            }
            let kind = fmt
                .parse_interleaved(&ids[start..end])
                .map_err(|e| Error::Corrupt(format!("sample at {start}: {e}")))?
                .kind;
            samples.push(SampleSpan {
                start,
                len: end - start,
                kind,
            });
        }
        rows.push(PackedRow { ids, samples });
    }
    Ok(PackedBatch { row_len, rows })
}
