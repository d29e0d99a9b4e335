//! Synthetic multimodal world: toy scenes, their images and captions,
//! text-only sentences, and a programmatic caption/image checker.

mod caption;
mod image;
mod scene;
mod text;

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

pub use caption::{base_rate, caption, check, parse_caption, Caption, Predicate, Relation, Verdict};
pub use image::{
    background_patch, classify_patch, detect, object_patch, render, Jitter, ToyImage, BACKGROUND_RGB,
};
pub use scene::{all_scenes, gen_scene, scene_count, scene_from_index, Attr, Color, Object, Scene, Shape};
pub use text::{gen_text_corpus, parse_sentence, ADJECTIVES, DETERMINERS, NOUNS, VERBS};

use crate::error::{Error, Result};

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every tenth sample (by index) is held out from training.
pub fn is_held_out(index: usize) -> bool {
    index % 10 == 9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub grid_size: usize,
    pub patch_size: usize,
    pub jitter: u8,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            patch_size: 4,
            jitter: 8,
        }
    }
}

impl CorpusConfig {
    pub fn image_tokens(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::invalid("grid_size must be >= 2"));
        }
        // smaller patches make circle and square prototypes coincide
        if self.patch_size < 4 {
            return Err(Error::invalid("patch_size must be >= 4"));
        }
        Ok(())
    }
}

/// One scene with its rendered image and caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub seed: u64,
    pub scene: Scene,
    pub caption: Caption,
    pub image: ToyImage,
}

const SCENE_STREAM: u64 = 1;
const CAPTION_STREAM: u64 = 2;
const JITTER_STREAM: u64 = 3;

impl ImageSample {
    pub fn generate(cfg: &CorpusConfig, seed: u64) -> Self {
        let scene = gen_scene(derive_seed(seed, SCENE_STREAM, 0), cfg.grid_size);
        let caption = caption(&scene, derive_seed(seed, CAPTION_STREAM, 0));
        let image = render(
            &scene,
            cfg.patch_size,
            Jitter {
                amplitude: cfg.jitter,
                seed: derive_seed(seed, JITTER_STREAM, 0),
            },
        );
        Self {
            seed,
            scene,
            caption,
            image,
        }
    }
}

pub fn gen_image_samples(cfg: &CorpusConfig, seed: u64, n: usize) -> Vec<ImageSample> {
    (0..n as u64)
        .map(|i| ImageSample::generate(cfg, derive_seed(seed, 0, i)))
        .collect()
}

/// Exact probability that a random scene satisfies the caption of another
/// independent random scene.
pub fn random_pair_base_rate(grid_size: usize) -> f64 {
    use std::collections::HashMap;
    let scenes: Vec<Scene> = all_scenes(grid_size).collect();
    let mut cache: HashMap<Predicate, usize> = HashMap::new();
    let mut hits = 0f64;
    for s in &scenes {
        let pred = Predicate::of_scene(s);
        let n = *cache
            .entry(pred)
            .or_insert_with(|| scenes.iter().filter(|t| pred.holds(t)).count());
        hits += n as f64;
    }
    hits / (scenes.len() as f64 * scenes.len() as f64)
}

/// One line of the corpus export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub kind: RecordKind,
    pub caption: String,
    pub scene: Option<Scene>,
    /// Base64 of raw row-major RGB bytes; the image is square.
    pub image: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Image,
    Text,
}

impl CorpusRecord {
    pub fn from_sample(s: &ImageSample) -> Self {
        Self {
            kind: RecordKind::Image,
            caption: s.caption.text.clone(),
            scene: Some(s.scene.clone()),
            image: Some(B64.encode(s.image.raw())),
            seed: s.seed,
        }
    }

    pub fn from_sentence(text: &str, seed: u64) -> Self {
        Self {
            kind: RecordKind::Text,
            caption: text.to_string(),
            scene: None,
            image: None,
            seed,
        }
    }

    pub fn to_sample(&self) -> Result<ImageSample> {
        let (Some(scene), Some(image)) = (&self.scene, &self.image) else {
            return Err(Error::Corrupt(format!("record {} has no image", self.seed)));
        };
        let raw = B64
            .decode(image)
            .map_err(|e| Error::Corrupt(format!("bad base64 image: {e}")))?;
        let side = ((raw.len() / 3) as f64).sqrt().round() as usize;
        Ok(ImageSample {
            seed: self.seed,
            scene: scene.clone(),
            caption: Caption::new(self.caption.clone()),
            image: ToyImage::from_raw(side, side, raw)?,
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_round_trip() {
        let cfg = CorpusConfig::default();
        let samples = gen_image_samples(&cfg, 4, 5);
        let mut recs: Vec<_> = samples.iter().map(CorpusRecord::from_sample).collect();
        recs.push(CorpusRecord::from_sentence("this cat sees some dog", 1));
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        for (r, s) in back.iter().zip(&samples) {
            assert_eq!(&r.to_sample().unwrap(), s);
        }
    }

    #[test]
    fn random_caption_vs_random_image_rate() {
        let g = 4;
        let analytic = random_pair_base_rate(g);
        let cfg = CorpusConfig::default();
        let n = 20_000u64;
        let mut hits = 0u64;
        for i in 0..n {
            let a = ImageSample::generate(&cfg, derive_seed(1, 10, i));
            let b = ImageSample::generate(&cfg, derive_seed(1, 11, i));
            hits += check(&a.caption, &b.image, cfg.patch_size).unwrap().overall as u64;
        }
        let rate = hits as f64 / n as f64;
        let sigma = (analytic * (1.0 - analytic) / n as f64).sqrt();
        assert!((rate - analytic).abs() <= 4.0 * sigma + 1e-12, "rate {rate} analytic {analytic}");
    }
}
