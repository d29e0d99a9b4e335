use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{derive_seed, gen_image_samples, gen_text_corpus, is_held_out, ImageSample};
use crate::error::{Error, Result};
use crate::prompt::{sft_text, Modality, SequenceFormat, Turn, UnifiedSequence};
use crate::tok::{extract_patches, fit_codebook, train_bpe, TextTokenizer, VisualCodebook};
use crate::vocab::{TokenId, VocabLayout};

use super::{DataConfig, RunConfig, Stage};

/// Training sequences per modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Datasets {
    pub text: Vec<UnifiedSequence>,
    pub und: Vec<UnifiedSequence>,
    pub gen: Vec<UnifiedSequence>,
}

impl Datasets {
    pub fn get(&self, m: Modality) -> &[UnifiedSequence] {
        match m {
            Modality::Text => &self.text,
            Modality::Und => &self.und,
            Modality::Gen => &self.gen,
        }
    }

    /// At most `n` sequences per modality, in order.
    pub fn truncated(&self, n: usize) -> Datasets {
        Datasets {
            text: self.text.iter().take(n).cloned().collect(),
            und: self.und.iter().take(n).cloned().collect(),
            gen: self.gen.iter().take(n).cloned().collect(),
        }
    }

    pub fn max_len(&self) -> usize {
        Modality::ALL.iter().flat_map(|&m| self.get(m)).map(UnifiedSequence::len).max().unwrap_or(0)
    }

    /// Hex SHA-256 over every ID, bound to its modality.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in Modality::ALL {
            h.update([m.index() as u8]);
            for s in self.get(m) {
                h.update((s.ids.len() as u32).to_le_bytes());
                for id in &s.ids {
                    h.update(id.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-modality counts for one batch: the largest-remainder split of
/// `batch` by `ratio`, with remainder ties going to the lower index.
pub fn split_counts(ratio: [u32; 3], batch: usize) -> [usize; 3] {
    let total: u64 = ratio.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return [0; 3];
    }
    let mut counts = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        let num = batch as u64 * ratio[i] as u64;
        counts[i] = (num / total) as usize;
        rems[i] = num % total;
    }
    let mut left = batch - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratio[i] > 0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Draws one training batch: exact per-modality counts, assignment order
/// shuffled, samples drawn uniformly with replacement, and every
/// text-to-image sample passed through caption drop.
pub fn mix_batch<R: Rng + ?Sized>(
    cfg: &RunConfig,
    fmt: &SequenceFormat,
    data: &Datasets,
    rng: &mut R,
) -> Result<Vec<UnifiedSequence>> {
    use rand::seq::SliceRandom;
    let counts = split_counts(cfg.data_ratio, cfg.batch_size);
    let mut slots = Vec::with_capacity(cfg.batch_size);
    for m in Modality::ALL {
        let n = counts[m.index()];
        if n > 0 && data.get(m).is_empty() {
            return Err(Error::config(format!("data_ratio needs {m:?} samples but that dataset is empty")));
        }
        slots.extend(std::iter::repeat_n(m, n));
    }
    slots.shuffle(rng);
    slots
        .into_iter()
        .map(|m| {
            let pool = data.get(m);
            let s = &pool[rng.random_range(0..pool.len())];
            match m {
                Modality::Gen => fmt.drop_caption(s, cfg.caption_drop_p, rng),
                _ => Ok(s.clone()),
            }
        })
        .collect()
}

/// How prompts are worded: plain captions for pretraining, the chat
/// template after SFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptStyle {
    Plain,
    Chat,
}

pub const UND_INSTRUCTION: &str = "describe the image";

impl PromptStyle {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Sft => PromptStyle::Chat,
            _ => PromptStyle::Plain,
        }
    }

    /// Text preceding `[SOI]` when generating an image for `caption`.
    pub fn gen_condition(self, caption: &str) -> String {
        match self {
            PromptStyle::Plain => caption.to_string(),
            PromptStyle::Chat => chat(&format!("draw {caption}"), ""),
        }
    }

    /// Text after `[EOI]` that precedes a generated caption.
    pub fn und_prefix(self) -> String {
        match self {
            PromptStyle::Plain => String::new(),
            PromptStyle::Chat => chat(UND_INSTRUCTION, ""),
        }
    }

    /// Full target text of an image-to-text sample.
    pub fn und_text(self, caption: &str) -> String {
        self.und_prefix() + caption
    }
}

fn chat(input: &str, response: &str) -> String {
    sft_text(&[Turn::new(input, response)]).expect("one turn")
}

/// A text-only instruction pair: complete a sentence from its first half.
pub fn completion_turn(sentence: &str) -> Turn {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let cut = words.len() / 2;
    Turn::new(format!("complete: {}", words[..cut].join(" ")), words[cut..].join(" "))
}

const IMAGE_STREAM: u64 = 10;
const TEXT_STREAM: u64 = 11;
const CODEBOOK_STREAM: u64 = 12;

/// One synthetic corpus, its fitted tokenizers, and every dataset derived
/// from it. Sample `i` is held out when `is_held_out(i)`.
#[derive(Debug, Clone)]
pub struct World {
    pub config: DataConfig,
    pub seed: u64,
    pub layout: VocabLayout,
    pub format: SequenceFormat,
    pub tokenizer: TextTokenizer,
    pub codebook: VisualCodebook,
    pub images: Vec<ImageSample>,
    pub sentences: Vec<String>,
    pub pretrain: Datasets,
    pub sft: Datasets,
    pub held_out: Datasets,
    pub held_out_sft: Datasets,
    /// Indices into `images` never trained on.
    pub held_out_images: Vec<usize>,
}

/// The synthetic corpus of a data world.
pub fn gen_corpus(cfg: &DataConfig, seed: u64) -> Result<(Vec<ImageSample>, Vec<String>)> {
    cfg.corpus.validate()?;
    let images = gen_image_samples(&cfg.corpus, derive_seed(seed, IMAGE_STREAM, 0), cfg.n_images);
    let sentences = gen_text_corpus(derive_seed(seed, TEXT_STREAM, 0), cfg.n_sentences)?;
    Ok((images, sentences))
}

/// Fits BPE on training sentences, captions and prompt templates, and the
/// visual codebook on a seeded subset of training-image patches.
pub fn fit_tokenizers(
    cfg: &DataConfig,
    seed: u64,
    images: &[ImageSample],
    sentences: &[String],
) -> Result<(TextTokenizer, VisualCodebook)> {
    let mut texts: Vec<String> = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if !is_held_out(i) {
            texts.push(completion_turn(s).input);
            texts.push(s.clone());
        }
    }
    for (i, s) in images.iter().enumerate() {
        if !is_held_out(i) {
            texts.push(PromptStyle::Chat.gen_condition(&s.caption.text));
            texts.push(PromptStyle::Chat.und_text(&s.caption.text));
        }
    }
    let tokenizer = train_bpe(&texts, cfg.bpe_merges)?;

    let mut patches = Vec::new();
    for (i, s) in images.iter().enumerate() {
        if !is_held_out(i) {
            patches.extend(extract_patches(&s.image, cfg.corpus.patch_size)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, CODEBOOK_STREAM, 0));
    if patches.len() > cfg.codebook_patches {
        let mut keep = index::sample(&mut rng, patches.len(), cfg.codebook_patches).into_vec();
        keep.sort_unstable();
        patches = keep.into_iter().map(|i| std::mem::take(&mut patches[i])).collect();
    }
    let codebook = fit_codebook(&patches, cfg.codebook_size, derive_seed(seed, CODEBOOK_STREAM, 1))?;
    Ok((tokenizer, codebook))
}

impl World {
    pub fn build(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let (images, sentences) = gen_corpus(cfg, seed)?;
        let (tokenizer, codebook) = fit_tokenizers(cfg, seed, &images, &sentences)?;
        Self::from_parts(cfg, seed, images, sentences, tokenizer, codebook)
    }

    /// Assembles datasets from an existing corpus and tokenizers. The
    /// textual vocabulary is always `256 + bpe_merges` wide.
    pub fn from_parts(
        cfg: &DataConfig,
        seed: u64,
        images: Vec<ImageSample>,
        sentences: Vec<String>,
        tokenizer: TextTokenizer,
        codebook: VisualCodebook,
    ) -> Result<Self> {
        let text_size = 256 + cfg.bpe_merges;
        if tokenizer.vocab_size() > text_size {
            return Err(Error::config(format!(
                "tokenizer has {} tokens but bpe_merges allows {text_size}",
                tokenizer.vocab_size()
            )));
        }
        if codebook.size() != cfg.codebook_size {
            return Err(Error::config(format!(
                "codebook has {} entries, config expects {}",
                codebook.size(),
                cfg.codebook_size
            )));
        }
        let layout = VocabLayout::new(text_size, cfg.codebook_size)?;
        let format = SequenceFormat::new(layout, cfg.corpus.image_tokens());
        let mut world = Self {
            config: *cfg,
            seed,
            layout,
            format,
            tokenizer,
            codebook,
            images,
            sentences,
            pretrain: Datasets::default(),
            sft: Datasets::default(),
            held_out: Datasets::default(),
            held_out_sft: Datasets::default(),
            held_out_images: Vec::new(),
        };
        for i in 0..world.sentences.len() {
            let s = &world.sentences[i];
            let plain = world.format.text(&world.tokenizer.encode(s))?;
            let chat = world
                .format
                .text(&crate::prompt::format_sft(&world.tokenizer, &[completion_turn(s)])?)?;
            let (pre, sft) = if is_held_out(i) {
                (&mut world.held_out, &mut world.held_out_sft)
            } else {
                (&mut world.pretrain, &mut world.sft)
            };
            pre.text.push(plain);
            sft.text.push(chat);
        }
        for i in 0..world.images.len() {
            let y = world.image_ids(&world.images[i])?;
            let cap = &world.images[i].caption.text;
            let enc = |t: String| world.tokenizer.encode(&t);
            let und_plain = world.format.und(&y, &enc(PromptStyle::Plain.und_text(cap)))?;
            let und_chat = world.format.und(&y, &enc(PromptStyle::Chat.und_text(cap)))?;
            let gen_plain = world.format.gen(&enc(PromptStyle::Plain.gen_condition(cap)), &y)?;
            let gen_chat = world.format.gen(&enc(PromptStyle::Chat.gen_condition(cap)), &y)?;
            let (pre, sft) = if is_held_out(i) {
                world.held_out_images.push(i);
                (&mut world.held_out, &mut world.held_out_sft)
            } else {
                (&mut world.pretrain, &mut world.sft)
            };
            pre.und.push(und_plain);
            pre.gen.push(gen_plain);
            sft.und.push(und_chat);
            sft.gen.push(gen_chat);
        }
        Ok(world)
    }

    /// Visual token IDs of an image.
    pub fn image_ids(&self, sample: &ImageSample) -> Result<Vec<TokenId>> {
        self.codebook
            .quantize(&sample.image)?
            .into_iter()
            .map(|c| self.layout.visual_id(c))
            .collect()
    }

    /// Hex SHA-256 of the raw corpus: image pixels, captions and sentences.
    /// Independent of the tokenizers, so it is shared by every codebook size.
    pub fn corpus_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.images {
            h.update(s.image.raw());
            h.update((s.caption.text.len() as u32).to_le_bytes());
            h.update(s.caption.text.as_bytes());
        }
        for s in &self.sentences {
            h.update((s.len() as u32).to_le_bytes());
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn datasets(&self, stage: Stage) -> &Datasets {
        match stage {
            Stage::Sft => &self.sft,
            _ => &self.pretrain,
        }
    }

    pub fn held_out_for(&self, stage: Stage) -> &Datasets {
        match stage {
            Stage::Sft => &self.held_out_sft,
            _ => &self.held_out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn largest_remainder_splits() {
        assert_eq!(split_counts([3, 2, 5], 10), [3, 2, 5]);
        assert_eq!(split_counts([2, 6, 2], 10), [2, 6, 2]);
        assert_eq!(split_counts([1, 0, 0], 7), [7, 0, 0]);
        assert_eq!(split_counts([3, 2, 5], 32), [10, 6, 16]);
        assert_eq!(split_counts([1, 1, 1], 4), [2, 1, 1]);
        assert_eq!(split_counts([2, 6, 2], 16), [3, 10, 3]);
        assert_eq!(split_counts([0, 1, 1], 3), [0, 2, 1]);
    }

    fn tiny_cfg() -> DataConfig {
        DataConfig {
            n_images: 40,
            n_sentences: 40,
            codebook_size: 16,
            bpe_merges: 20,
            ..DataConfig::default()
        }
    }

    #[test]
    fn world_splits_and_formats() {
        let w = World::build(&tiny_cfg(), 3).unwrap();
        assert_eq!(w.layout.text_size(), 276);
        assert_eq!(w.pretrain.text.len(), 36);
        assert_eq!(w.held_out.und.len(), 4);
        assert_eq!(w.held_out_images, vec![9, 19, 29, 39]);
        let g = &w.sft.gen[0];
        let text = w.tokenizer.decode(&g.text_ids()).unwrap();
        assert!(text.starts_with("User:draw "), "{text}");
        assert!(text.ends_with("\nAssistant:"));
        let again = World::build(&tiny_cfg(), 3).unwrap();
        assert_eq!(again.pretrain.digest(), w.pretrain.digest());
        assert_ne!(World::build(&tiny_cfg(), 4).unwrap().pretrain.digest(), w.pretrain.digest());
    }

    #[test]
    fn mix_is_exact_and_seeded() {
        let w = World::build(&tiny_cfg(), 3).unwrap();
        let mut cfg = RunConfig::for_stage(Stage::UnifiedPretrain);
        cfg.batch_size = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = mix_batch(&cfg, &w.format, &w.pretrain, &mut rng).unwrap();
            let mut c = [0; 3];
            for s in &b {
                c[s.kind.modality().unwrap().index()] += 1;
            }
            assert_eq!(c, [3, 2, 5]);
        }
        let mut empty = w.pretrain.clone();
        empty.und.clear();
        assert!(matches!(mix_batch(&cfg, &w.format, &empty, &mut rng), Err(Error::Config(_))));
        cfg.data_ratio = [1, 0, 1];
        assert!(mix_batch(&cfg, &w.format, &empty, &mut rng).is_ok());
    }
}
