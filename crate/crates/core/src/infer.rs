//! Sampling and generation: text continuation, classifier-free guided image
//! generation and free interleaved decoding, all on the incremental decoder.

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ToyImage;
use crate::error::{Error, Result};
use crate::model::{Decoder, ParamStore, Scalar};
use crate::prompt::{SequenceFormat, UnifiedSequence};
use crate::tok::VisualCodebook;
use crate::vocab::{ActivationState, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// `None` keeps every allowed ID.
    pub top_k: Option<usize>,
    /// Guidance scale `s` in `l_u + s (l_c - l_u)`.
    pub cfg_scale: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Argmax with ties to the lowest ID instead of sampling.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            cfg_scale: 5.0,
            max_new_tokens: 64,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::invalid("cfg_scale must be finite"));
        }
        Ok(())
    }
}

/// Picks the next ID among `allowed`: greedy argmax, or a draw from the
/// temperature-scaled, top-k-filtered softmax. Uses exactly one uniform
/// draw per sampled token.
pub fn sample_next<F: Scalar, R: Rng + ?Sized>(
    logits: &[F],
    cfg: &SamplingConfig,
    allowed: &[TokenId],
    rng: &mut R,
) -> Result<TokenId> {
    cfg.validate()?;
    if allowed.is_empty() {
        return Err(Error::Sampling("allowed set is empty".into()));
    }
    let mut cands: Vec<(TokenId, f64)> = Vec::with_capacity(allowed.len());
    for &id in allowed {
        let z = logits
            .get(id as usize)
            .ok_or_else(|| Error::InvalidToken {
                id,
                reason: format!("no logit (vocabulary {})", logits.len()),
            })?
            .as_f64();
        if z.is_nan() {
            return Err(Error::Sampling(format!("logit of {id} is NaN")));
        }
        if z != f64::NEG_INFINITY {
            cands.push((id, z));
        }
    }
    if cands.is_empty() {
        return Err(Error::Sampling("every allowed logit is -inf".into()));
    }
    // descending logit, ascending id
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if cfg.greedy {
        return Ok(cands[0].0);
    }
    if let Some(k) = cfg.top_k {
        cands.truncate(k);
    }
    let max = cands[0].1 / cfg.temperature;
    let weights: Vec<f64> = cands.iter().map(|&(_, z)| (z / cfg.temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (&(id, _), w) in cands.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(cands.last().expect("nonempty").0)
}

/// Guided logits `l_u + s (l_c - l_u)`; `s = 1` returns `l_c` and `s = 0`
/// returns `l_u` exactly.
pub fn cfg_logits<F: Scalar>(l_c: &[F], l_u: &[F], s: f64) -> Result<Vec<F>> {
    if l_c.len() != l_u.len() {
        return Err(Error::invalid(format!(
            "conditional and unconditional logits differ in length ({} vs {})",
            l_c.len(),
            l_u.len()
        )));
    }
    if s == 1.0 {
        return Ok(l_c.to_vec());
    }
    if s == 0.0 {
        return Ok(l_u.to_vec());
    }
    let s = F::of(s);
    Ok(l_c.iter().zip(l_u).map(|(&c, &u)| u + s * (c - u)).collect())
}

fn check_ids<F>(params: &ParamStore<F>, ids: &[TokenId]) -> Result<()> {
    let total = params.layout().total_size();
    match ids.iter().find(|&&id| id as usize >= total) {
        Some(&id) => Err(Error::InvalidToken {
            id,
            reason: format!("outside the vocabulary of {total}"),
        }),
        None => Ok(()),
    }
}

fn text_allowed<F>(params: &ParamStore<F>, extra: &[TokenId]) -> Vec<TokenId> {
    let l = params.layout();
    let mut v: Vec<TokenId> = (0..l.text_size() as TokenId).collect();
    v.extend_from_slice(extra);
    v
}

/// Continues `prompt` with textual IDs until `[EOS]`, `max_new_tokens`, or
/// the context limit. The returned IDs exclude `[EOS]`.
pub fn generate_text<F: Scalar>(params: &ParamStore<F>, prompt: &[TokenId], cfg: &SamplingConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    check_ids(params, prompt)?;
    let eos = params.layout().eos();
    let allowed = text_allowed(params, &[eos]);
    let max_len = params.config().max_seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(params);
    dec.prefill(prompt)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && dec.len() < max_len {
        let id = sample_next(dec.logits(), cfg, &allowed, &mut rng)?;
        if id == eos {
            break;
        }
        out.push(id);
        if dec.len() < max_len {
            dec.push(id)?;
        }
    }
    Ok(out)
}

/// A generated image with its token grid and full unified sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub ids: Vec<TokenId>,
    pub sequence: UnifiedSequence,
    pub image: ToyImage,
}

/// Samples `G²` activated visual IDs under classifier-free guidance. The
/// conditional stream starts `[SOS] x.. [SOI]`, the unconditional one
/// `[SOS][SOI]`, and both are fed the same sampled prefix. `s = 1` skips
/// the unconditional stream and `s = 0` the conditional one.
pub fn generate_image<F: Scalar>(
    params: &ParamStore<F>,
    fmt: &SequenceFormat,
    codebook: &VisualCodebook,
    act: &ActivationState,
    caption_ids: &[TokenId],
    cfg: &SamplingConfig,
) -> Result<GeneratedImage> {
    cfg.validate()?;
    let l = &fmt.layout;
    if *params.layout() != *l || *act.layout() != *l {
        return Err(Error::invalid("model, format and activation state use different layouts"));
    }
    let allowed = act.activated_visual();
    if allowed.is_empty() {
        return Err(Error::Sampling("no visual ID is activated".into()));
    }
    let n = fmt.image_tokens;
    let grid = (n as f64).sqrt() as usize;
    if grid * grid != n {
        return Err(Error::invalid(format!("{n} image tokens do not form a square grid")));
    }
    let cond_prompt = fmt.gen_prompt(caption_ids)?;
    if cond_prompt.len() + n + 1 > params.config().max_seq_len {
        return Err(Error::invalid("caption too long for the context window"));
    }
    let s = cfg.cfg_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cond = (s != 0.0).then(|| Decoder::new(params));
    let mut uncond = (s != 1.0).then(|| Decoder::new(params));
    if let Some(d) = cond.as_mut() {
        d.prefill(&cond_prompt)?;
    }
    if let Some(d) = uncond.as_mut() {
        d.prefill(&[l.sos(), l.soi()])?;
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let logits = match (&cond, &uncond) {
            (Some(c), Some(u)) => cfg_logits(c.logits(), u.logits(), s)?,
            (Some(c), None) => c.logits().to_vec(),
            (None, Some(u)) => u.logits().to_vec(),
            (None, None) => unreachable!("at least one stream runs"),
        };
        let id = sample_next(&logits, cfg, &allowed, &mut rng)?;
        ids.push(id);
        if i + 1 < n {
            for d in [cond.as_mut(), uncond.as_mut()].into_iter().flatten() {
                d.push(id)?;
            }
        }
    }
    let codes: Vec<usize> = ids.iter().map(|&id| l.visual_code(id).expect("visual")).collect();
    let image = codebook.dequantize(&codes, grid)?;
    let sequence = fmt.gen(caption_ids, &ids)?;
    Ok(GeneratedImage { ids, sequence, image })
}

/// Free decoding of an interleaved sequence. In text mode the allowed set is
/// textual IDs, `[SOI]` and `[EOS]`; after `[SOI]` exactly `G²` activated
/// visual IDs are sampled and `[EOI]` is forced. `[SOI]` is only offered
/// while a whole image still fits the budget, and `[EOS]` is appended when
/// the budget runs out, so the result always parses.
pub fn generate_mixed<F: Scalar>(
    params: &ParamStore<F>,
    fmt: &SequenceFormat,
    act: &ActivationState,
    prompt: &[TokenId],
    cfg: &SamplingConfig,
) -> Result<UnifiedSequence> {
    cfg.validate()?;
    let l = fmt.layout;
    check_ids(params, prompt)?;
    let mut closed = prompt.to_vec();
    closed.push(l.eos());
    fmt.parse_interleaved(&closed)
        .map_err(|e| Error::invalid(format!("prompt is not an open interleaved sequence: {e}")))?;

    let n = fmt.image_tokens;
    let visual = act.activated_visual();
    let room = params.config().max_seq_len.saturating_sub(prompt.len() + 1);
    let budget = cfg.max_new_tokens.min(room);
    let text_only = text_allowed(params, &[l.eos()]);
    let with_image = text_allowed(params, &[l.soi(), l.eos()]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(params);
    dec.prefill(prompt)?;
    let mut ids = prompt.to_vec();
    let mut used = 0;
    let mut finished = false;
    while used < budget {
        let image_fits = !visual.is_empty() && used + n + 2 <= budget;
        let allowed = if image_fits { &with_image } else { &text_only };
        let id = sample_next(dec.logits(), cfg, allowed, &mut rng)?;
        ids.push(id);
        used += 1;
        if id == l.eos() {
            finished = true;
            break;
        }
        dec.push(id)?;
        if id == l.soi() {
            for _ in 0..n {
                let v = sample_next(dec.logits(), cfg, &visual, &mut rng)?;
                ids.push(v);
                dec.push(v)?;
            }
            ids.push(l.eoi());
            used += n + 1;
            if used < budget {
                dec.push(l.eoi())?;
            }
        }
    }
    if !finished {
        ids.push(l.eos());
    }
    fmt.parse_interleaved(&ids)
}

/// One generation as emitted by the command line: prompt text, all IDs,
/// decoded text, base64 raw RGB image (when one was produced) and the
/// sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub ids: Vec<TokenId>,
    pub text: String,
    pub image: Option<String>,
    pub settings: SamplingConfig,
}

pub fn encode_image(img: &ToyImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(img.raw())
}
