use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::vocab::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextPretrain,
    UnifiedPretrain,
    Sft,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::TextPretrain, Stage::UnifiedPretrain, Stage::Sft];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TextPretrain => "text_pretrain",
            Stage::UnifiedPretrain => "unified_pretrain",
            Stage::Sft => "sft",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown stage {s:?} (text_pretrain, unified_pretrain, sft)")))
    }
}

/// Corpus sizes and tokenizer settings that define a data world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub n_images: usize,
    pub n_sentences: usize,
    /// Visual vocabulary size `K`.
    pub codebook_size: usize,
    /// Patches sampled for k-means fitting.
    pub codebook_patches: usize,
    /// Textual vocabulary is `256 + bpe_merges`.
    pub bpe_merges: usize,
    /// Held-out sequences per modality used for logged perplexities.
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            n_images: 4000,
            n_sentences: 4000,
            codebook_size: 64,
            codebook_patches: 16384,
            bpe_merges: 44,
            eval_samples: 32,
        }
    }
}

/// Everything one training stage needs. Serialized as a flat `key = value`
/// file; `#` starts a comment and unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Text-only : image-to-text : text-to-image.
    pub data_ratio: [u32; 3],
    pub activation: Activation,
    pub caption_drop_p: f64,
    pub seed: u64,
    /// Final learning rate as a fraction of `peak_lr`.
    pub lr_floor_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub row_len: usize,
    /// Metric record cadence in steps (the final step is always logged).
    pub log_every: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Stage defaults: pretraining at lr 1e-4 for 20000 steps (warmup 200,
    /// batch 32), SFT at 3e-5 for 2000 steps (warmup 40, batch 16).
    pub fn for_stage(stage: Stage) -> Self {
        let mut cfg = Self {
            stage,
            peak_lr: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 200,
            total_steps: 20_000,
            batch_size: 32,
            data_ratio: [3, 2, 5],
            activation: Activation::Period(64),
            caption_drop_p: 0.1,
            seed: 0,
            lr_floor_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            row_len: 256,
            log_every: 100,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
        };
        cfg.apply_stage_defaults(stage);
        cfg
    }

    fn apply_stage_defaults(&mut self, stage: Stage) {
        self.stage = stage;
        match stage {
            Stage::TextPretrain => {
                self.peak_lr = 1e-4;
                self.warmup_steps = 200;
                self.total_steps = 20_000;
                self.batch_size = 32;
                self.data_ratio = [1, 0, 0];
                self.activation = Activation::Immediate;
            }
            Stage::UnifiedPretrain => {
                self.peak_lr = 1e-4;
                self.warmup_steps = 200;
                self.total_steps = 20_000;
                self.batch_size = 32;
                self.data_ratio = [3, 2, 5];
                self.activation = Activation::Period(64);
            }
            Stage::Sft => {
                self.peak_lr = 3e-5;
                self.warmup_steps = 40;
                self.total_steps = 2_000;
                self.batch_size = 16;
                self.data_ratio = [2, 6, 2];
                self.activation = Activation::Immediate;
            }
        }
    }

    /// Same model, data and seed with another stage's optimization defaults.
    pub fn with_stage(&self, stage: Stage) -> Self {
        let mut out = self.clone();
        out.apply_stage_defaults(stage);
        out
    }

    pub const KEYS: &'static [&'static str] = &[
        "stage",
        "peak_lr",
        "weight_decay",
        "grad_clip",
        "warmup_steps",
        "total_steps",
        "batch_size",
        "data_ratio",
        "activation",
        "caption_drop_p",
        "seed",
        "lr_floor_ratio",
        "beta1",
        "beta2",
        "adam_eps",
        "row_len",
        "log_every",
        "checkpoint_every",
        "d_model",
        "n_layers",
        "n_heads",
        "mlp_hidden",
        "max_seq_len",
        "norm_eps",
        "rope_base",
        "tie_embeddings",
        "init_std",
        "grid_size",
        "patch_size",
        "jitter",
        "n_images",
        "n_sentences",
        "codebook_size",
        "codebook_patches",
        "bpe_merges",
        "eval_samples",
    ];

    /// Sets one key. `stage` only changes the stage name; use
    /// [`RunConfig::with_stage`] to also reset stage defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "stage" => self.stage = v.parse()?,
            "peak_lr" => self.peak_lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "total_steps" => self.total_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "data_ratio" => self.data_ratio = parse_ratio(v)?,
            "activation" => self.activation = v.parse().map_err(|e: Error| Error::config(e.to_string()))?,
            "caption_drop_p" => self.caption_drop_p = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "lr_floor_ratio" => self.lr_floor_ratio = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "row_len" => self.row_len = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "d_model" => m.d_model = num(key, v)?,
            "n_layers" => m.n_layers = num(key, v)?,
            "n_heads" => m.n_heads = num(key, v)?,
            "mlp_hidden" => m.mlp_hidden = num(key, v)?,
            "max_seq_len" => m.max_seq_len = num(key, v)?,
            "norm_eps" => m.norm_eps = num(key, v)?,
            "rope_base" => m.rope_base = num(key, v)?,
            "tie_embeddings" => m.tie_embeddings = num(key, v)?,
            "init_std" => m.init_std = num(key, v)?,
            "grid_size" => d.corpus.grid_size = num(key, v)?,
            "patch_size" => d.corpus.patch_size = num(key, v)?,
            "jitter" => d.corpus.jitter = num(key, v)?,
            "n_images" => d.n_images = num(key, v)?,
            "n_sentences" => d.n_sentences = num(key, v)?,
            "codebook_size" => d.codebook_size = num(key, v)?,
            "codebook_patches" => d.codebook_patches = num(key, v)?,
            "bpe_merges" => d.bpe_merges = num(key, v)?,
            "eval_samples" => d.eval_samples = num(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let d = &self.data;
        Some(match key {
            "stage" => self.stage.to_string(),
            "peak_lr" => self.peak_lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "data_ratio" => {
                let [a, b, c] = self.data_ratio;
                format!("{a}:{b}:{c}")
            }
            "activation" => self.activation.to_string(),
            "caption_drop_p" => self.caption_drop_p.to_string(),
            "seed" => self.seed.to_string(),
            "lr_floor_ratio" => self.lr_floor_ratio.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "row_len" => self.row_len.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "d_model" => m.d_model.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "mlp_hidden" => m.mlp_hidden.to_string(),
            "max_seq_len" => m.max_seq_len.to_string(),
            "norm_eps" => m.norm_eps.to_string(),
            "rope_base" => m.rope_base.to_string(),
            "tie_embeddings" => m.tie_embeddings.to_string(),
            "init_std" => m.init_std.to_string(),
            "grid_size" => d.corpus.grid_size.to_string(),
            "patch_size" => d.corpus.patch_size.to_string(),
            "jitter" => d.corpus.jitter.to_string(),
            "n_images" => d.n_images.to_string(),
            "n_sentences" => d.n_sentences.to_string(),
            "codebook_size" => d.codebook_size.to_string(),
            "codebook_patches" => d.codebook_patches.to_string(),
            "bpe_merges" => d.bpe_merges.to_string(),
            "eval_samples" => d.eval_samples.to_string(),
            _ => return None,
        })
    }

    /// Parses a config file. Defaults come from `stage` (or the file's own
    /// `stage` key); the remaining keys override them. Errors carry the
    /// 1-based line number.
    pub fn parse(text: &str, stage: Option<Stage>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut file_stage = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `key = value`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !Self::KEYS.contains(&k) {
                return Err(Error::config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if k == "stage" {
                file_stage = Some(v.parse::<Stage>()?);
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = Self::for_stage(stage.or(file_stage).unwrap_or(Stage::UnifiedPretrain));
        for (line, k, v) in entries {
            if k == "stage" {
                continue;
            }
            cfg.set(k, v).map_err(|e| Error::config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "need warmup_steps < total_steps (got {} and {})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.data_ratio.iter().all(|&r| r == 0) {
            return bad("data_ratio must have a nonzero entry".into());
        }
        if !(0.0..=1.0).contains(&self.caption_drop_p) {
            return bad(format!("caption_drop_p {} outside [0, 1]", self.caption_drop_p));
        }
        if self.batch_size == 0 || self.row_len == 0 || self.log_every == 0 {
            return bad("batch_size, row_len and log_every must be positive".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("peak_lr and weight_decay must be >= 0, grad_clip > 0".into());
        }
        if self.row_len > self.model.max_seq_len {
            return bad(format!(
                "row_len {} exceeds max_seq_len {}",
                self.row_len, self.model.max_seq_len
            ));
        }
        if self.data.codebook_size == 0 || self.data.n_images < 10 || self.data.n_sentences < 10 {
            return bad("codebook_size must be positive and n_images, n_sentences >= 10".into());
        }
        self.model.validate().map_err(|e| Error::config(e.to_string()))?;
        self.data.corpus.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form: every key in documented order.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("documented key")));
        }
        out
    }

    /// Hex SHA-256 prefix of the canonical form.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_config_string().as_bytes());
        hex::encode(&h[..8])
    }
}

fn parse_ratio(v: &str) -> Result<[u32; 3]> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let parsed: Option<Vec<u32>> = parts.iter().map(|p| p.parse().ok()).collect();
    match parsed.as_deref() {
        Some(&[a, b, c]) => Ok([a, b, c]),
        _ => Err(Error::config(format!("data_ratio must look like 3:2:5, got {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let p = RunConfig::for_stage(Stage::UnifiedPretrain);
        assert_eq!((p.peak_lr, p.weight_decay, p.grad_clip), (1e-4, 0.01, 1.0));
        assert_eq!(p.data_ratio, [3, 2, 5]);
        let s = RunConfig::for_stage(Stage::Sft);
        assert_eq!((s.peak_lr, s.data_ratio, s.total_steps), (3e-5, [2, 6, 2], 2000));
        assert_eq!(RunConfig::for_stage(Stage::TextPretrain).data_ratio, [1, 0, 0]);
    }

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::parse("stage = sft\n# comment\n seed=7 \ndata_ratio = 1:1:0 # trailing\nactivation = inf\n", None).unwrap();
        assert_eq!(cfg.stage, Stage::Sft);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data_ratio, [1, 1, 0]);
        assert_eq!(cfg.activation, Activation::Immediate);
        let again = RunConfig::parse(&cfg.to_config_string(), None).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        let other = RunConfig::parse("seed = 8", Some(Stage::Sft)).unwrap();
        assert_ne!(other.digest(), cfg.digest());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(RunConfig::parse("sed = 7", None).unwrap_err().to_string().contains("line 1"));
        assert!(RunConfig::parse("\nwarmup_steps = 20000", None).is_err());
        assert!(RunConfig::parse("data_ratio = 0:0:0", None).is_err());
        assert!(RunConfig::parse("caption_drop_p = 1.5", None).is_err());
        assert!(RunConfig::parse("data_ratio = 3:2", None).is_err());
        assert!(RunConfig::parse("no equals sign", None).is_err());
        assert!(RunConfig::parse("stage = finetune", None).is_err());
    }
}
