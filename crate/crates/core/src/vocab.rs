//! Unified token-ID space and the progressive visual-vocabulary scheduler.
//!
//! IDs are laid out as `[textual | visual | special]`. Textual and special
//! IDs are always considered activated; visual IDs join the activated set
//! one at a time, every `k` training steps, in an order fixed by a seed.

use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::UnifiedSequence;

/// Token ID type used across the crate.
pub type TokenId = u32;

/// Number of special tokens appended after the visual range.
pub const NUM_SPECIAL: usize = 6;

/// Special tokens, in the order they are laid out after the visual range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Sos,
    Eos,
    Soi,
    Eoi,
    Mask,
    Pad,
}

impl Special {
    pub const ALL: [Special; NUM_SPECIAL] = [
        Special::Sos,
        Special::Eos,
        Special::Soi,
        Special::Eoi,
        Special::Mask,
        Special::Pad,
    ];

    fn offset(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Sos => "[SOS]",
            Special::Eos => "[EOS]",
            Special::Soi => "[SOI]",
            Special::Eoi => "[EOI]",
            Special::Mask => "[MASK]",
            Special::Pad => "[PAD]",
        }
    }
}

/// Which segment of the vocabulary an ID belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Textual,
    Visual,
    Special(Special),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    text_size: usize,
    visual_size: usize,
}

impl VocabLayout {
    pub fn new(text_size: usize, visual_size: usize) -> Result<Self> {
        if text_size == 0 || visual_size == 0 {
            return Err(Error::invalid(format!(
                "vocabulary segments must be non-empty (text_size={text_size}, visual_size={visual_size})"
            )));
        }
        Ok(Self {
            text_size,
            visual_size,
        })
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn visual_size(&self) -> usize {
        self.visual_size
    }

    pub fn total_size(&self) -> usize {
        self.text_size + self.visual_size + NUM_SPECIAL
    }

    /// First visual ID.
    pub fn visual_base(&self) -> TokenId {
        self.text_size as TokenId
    }

    fn special_base(&self) -> usize {
        self.text_size + self.visual_size
    }

    pub fn special(&self, s: Special) -> TokenId {
        (self.special_base() + s.offset()) as TokenId
    }

    pub fn sos(&self) -> TokenId {
        self.special(Special::Sos)
    }
    pub fn eos(&self) -> TokenId {
        self.special(Special::Eos)
    }
    pub fn soi(&self) -> TokenId {
        self.special(Special::Soi)
    }
    pub fn eoi(&self) -> TokenId {
        self.special(Special::Eoi)
    }
    pub fn mask(&self) -> TokenId {
        self.special(Special::Mask)
    }
    pub fn pad(&self) -> TokenId {
        self.special(Special::Pad)
    }

    pub fn classify(&self, id: TokenId) -> Result<TokenClass> {
        let i = id as usize;
        if i < self.text_size {
            Ok(TokenClass::Textual)
        } else if i < self.special_base() {
            Ok(TokenClass::Visual)
        } else if i < self.total_size() {
            Ok(TokenClass::Special(Special::ALL[i - self.special_base()]))
        } else {
            Err(Error::InvalidToken {
                id,
                reason: format!("outside vocabulary of size {}", self.total_size()),
            })
        }
    }

    pub fn is_textual(&self, id: TokenId) -> bool {
        (id as usize) < self.text_size
    }

    pub fn is_visual(&self, id: TokenId) -> bool {
        let i = id as usize;
        i >= self.text_size && i < self.special_base()
    }

    /// Visual ID for codebook entry `code`.
    pub fn visual_id(&self, code: usize) -> Result<TokenId> {
        if code >= self.visual_size {
            return Err(Error::invalid(format!(
                "codebook index {code} exceeds visual vocabulary of {}",
                self.visual_size
            )));
        }
        Ok((self.text_size + code) as TokenId)
    }

    /// Codebook entry for a visual ID.
    pub fn visual_code(&self, id: TokenId) -> Option<usize> {
        self.is_visual(id).then(|| id as usize - self.text_size)
    }

    /// All visual IDs in ascending order.
    pub fn visual_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (self.text_size..self.special_base()).map(|i| i as TokenId)
    }

    pub fn describe(&self, id: TokenId) -> String {
        match self.classify(id) {
            Ok(TokenClass::Textual) => format!("t{id}"),
            Ok(TokenClass::Visual) => format!("v{}", id as usize - self.text_size),
            Ok(TokenClass::Special(s)) => s.name().to_string(),
            Err(_) => format!("?{id}"),
        }
    }
}

/// How fast visual IDs are activated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// One visual ID every `k` steps.
    Period(u64),
    /// Every visual ID active from step 0 (the vanilla unified baseline).
    Immediate,
}

impl Activation {
    pub fn period(k: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("activation period k must be >= 1"));
        }
        Ok(Activation::Period(k))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Period(k) => write!(f, "{k}"),
            Activation::Immediate => f.write_str("immediate"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("immediate") || s.eq_ignore_ascii_case("inf") {
            return Ok(Activation::Immediate);
        }
        let k: u64 = s
            .parse()
            .map_err(|_| Error::invalid(format!("activation must be a period or `immediate`, got {s:?}")))?;
        Activation::period(k)
    }
}

/// Compact, replayable description of an activation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSnapshot {
    pub seed: u64,
    pub mode: Activation,
    pub step: u64,
    pub activated: usize,
}

/// The evolving set of activated visual IDs.
///
/// The pending pool is shuffled once from the seed and consumed front to
/// back, which is distributionally the same as a fresh uniform choice per
/// activation and lets the whole state be rebuilt from a snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationState {
    layout: VocabLayout,
    mode: Activation,
    seed: u64,
    step: u64,
    order: Vec<TokenId>,
    cursor: usize,
    active: Vec<bool>,
}

impl ActivationState {
    pub fn new(layout: VocabLayout, mode: Activation, seed: u64) -> Self {
        let mut order: Vec<TokenId> = layout.visual_ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut state = Self {
            layout,
            mode,
            seed,
            step: 0,
            order,
            cursor: 0,
            active: vec![false; layout.visual_size()],
        };
        if mode == Activation::Immediate {
            state.activate_up_to(layout.visual_size());
        }
        state
    }

    pub fn from_snapshot(layout: VocabLayout, snap: &ActivationSnapshot) -> Result<Self> {
        if snap.activated > layout.visual_size() {
            return Err(Error::invalid(format!(
                "snapshot activates {} ids but visual vocabulary has {}",
                snap.activated,
                layout.visual_size()
            )));
        }
        let mut state = Self::new(layout, snap.mode, snap.seed);
        state.step = snap.step;
        state.activate_up_to(snap.activated);
        Ok(state)
    }

    pub fn snapshot(&self) -> ActivationSnapshot {
        ActivationSnapshot {
            seed: self.seed,
            mode: self.mode,
            step: self.step,
            activated: self.cursor,
        }
    }

    fn activate_up_to(&mut self, n: usize) {
        while self.cursor < n {
            let id = self.order[self.cursor];
            self.active[id as usize - self.layout.text_size()] = true;
            self.cursor += 1;
        }
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn mode(&self) -> Activation {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Overwrites the step counter without touching the activated set.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Activation check for the current step: when `step % k == 0` and IDs
    /// are still pending, the next pending ID is activated and returned.
    pub fn tick(&mut self) -> Option<TokenId> {
        let Activation::Period(k) = self.mode else {
            return None;
        };
        if self.step % k != 0 || self.cursor == self.order.len() {
            return None;
        }
        let id = self.order[self.cursor];
        self.activate_up_to(self.cursor + 1);
        Some(id)
    }

    /// Increments the step counter, then runs [`tick`](Self::tick).
    pub fn advance(&mut self) -> Option<TokenId> {
        self.step += 1;
        self.tick()
    }

    /// Whether `id` is in the activated vocabulary. Textual and special IDs
    /// always are; out-of-range IDs never are.
    pub fn is_active(&self, id: TokenId) -> bool {
        match self.layout.visual_code(id) {
            Some(code) => self.active[code],
            None => (id as usize) < self.layout.total_size(),
        }
    }

    pub fn activated_count(&self) -> usize {
        self.cursor
    }

    pub fn pending_count(&self) -> usize {
        self.order.len() - self.cursor
    }

    /// Activated visual IDs in ascending order.
    pub fn activated_visual(&self) -> Vec<TokenId> {
        self.layout.visual_ids().filter(|&id| self.is_active(id)).collect()
    }

    /// Pending visual IDs in the order they will be activated.
    pub fn pending(&self) -> &[TokenId] {
        &self.order[self.cursor..]
    }

    pub fn is_complete(&self) -> bool {
        self.cursor == self.order.len()
    }

    pub fn activation_fraction(&self) -> f64 {
        self.cursor as f64 / self.layout.visual_size() as f64
    }

    /// Replaces every non-activated visual ID with `[MASK]`.
    pub fn mask_ids(&self, ids: &[TokenId]) -> Result<Vec<TokenId>> {
        let mask = self.layout.mask();
        ids.iter()
            .map(|&id| {
                self.layout.classify(id)?;
                Ok(if self.is_active(id) { id } else { mask })
            })
            .collect()
    }
}

/// Replaces every visual ID outside the activated set with `[MASK]`;
/// textual, special and activated visual IDs pass through unchanged.
pub fn mask_sequence(seq: &UnifiedSequence, state: &ActivationState) -> Result<UnifiedSequence> {
    Ok(seq.with_ids(state.mask_ids(&seq.ids)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes() {
        let l = VocabLayout::new(300, 64).unwrap();
        assert_eq!(l.total_size(), 370);
        let l = VocabLayout::new(1, 1).unwrap();
        assert_eq!(l.total_size(), 8);
        assert_eq!(l.visual_ids().collect::<Vec<_>>(), vec![1]);
        let l = VocabLayout::new(32000, 16384).unwrap();
        assert_eq!(l.total_size(), 32000 + 16384 + 6);
        assert!(VocabLayout::new(0, 4).is_err());
        assert!(VocabLayout::new(4, 0).is_err());
    }

    #[test]
    fn every_id_classifies_once() {
        let l = VocabLayout::new(5, 3).unwrap();
        let mut counts = [0usize; 3];
        for id in 0..l.total_size() as TokenId {
            match l.classify(id).unwrap() {
                TokenClass::Textual => counts[0] += 1,
                TokenClass::Visual => counts[1] += 1,
                TokenClass::Special(_) => counts[2] += 1,
            }
        }
        assert_eq!(counts, [5, 3, NUM_SPECIAL]);
        assert!(l.classify(l.total_size() as TokenId).is_err());
        assert_eq!(l.classify(l.mask()).unwrap(), TokenClass::Special(Special::Mask));
    }

    #[test]
    fn tick_respects_period() {
        let l = VocabLayout::new(10, 64).unwrap();
        let mut s = ActivationState::new(l, Activation::Period(10), 3);
        s.set_step(7);
        assert_eq!(s.tick(), None);
        s.set_step(10);
        assert!(s.tick().is_some());
        assert_eq!(s.activated_count(), 1);
        assert_eq!(s.pending_count(), 63);
    }

    #[test]
    fn empty_pending_is_a_noop() {
        let l = VocabLayout::new(2, 2).unwrap();
        let mut s = ActivationState::new(l, Activation::Period(1), 0);
        s.advance();
        s.advance();
        assert!(s.is_complete());
        assert_eq!(s.advance(), None);
        assert_eq!(s.step(), 3);
    }

    #[test]
    fn fraction_and_snapshot() {
        let l = VocabLayout::new(10, 64).unwrap();
        let mut s = ActivationState::new(l, Activation::Period(10), 9);
        assert_eq!(s.activation_fraction(), 0.0);
        for _ in 0..320 {
            s.advance();
        }
        assert_eq!(s.activation_fraction(), 0.5);
        let back = ActivationState::from_snapshot(l, &s.snapshot()).unwrap();
        assert_eq!(back, s);
        let imm = ActivationState::new(l, Activation::Immediate, 9);
        assert_eq!(imm.activation_fraction(), 1.0);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        let l = VocabLayout::new(4, 4).unwrap();
        let s = ActivationState::new(l, Activation::Period(5), 0);
        let err = s.mask_ids(&[0, 99]).unwrap_err();
        assert!(matches!(err, Error::InvalidToken { id: 99, .. }));
    }

    #[test]
    fn activation_parse() {
        assert_eq!("immediate".parse::<Activation>().unwrap(), Activation::Immediate);
        assert_eq!("12".parse::<Activation>().unwrap(), Activation::Period(12));
        assert!("0".parse::<Activation>().is_err());
        assert!("fast".parse::<Activation>().is_err());
    }
}
