//! Llama-style decoder-only transformer with a separate textual embedding
//! table, an auxiliary table for visual and special IDs, and a head over the
//! whole unified vocabulary.
//!
//! Blocks are pre-norm (RMSNorm with gain), attention uses rotary position
//! encoding with positions restarting at each packed sample, and the MLP is
//! SwiGLU. Gradients are computed by a hand-written reverse pass.

mod checkpoint;
mod decode;
mod forward;
pub mod linalg;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Special, TokenId, VocabLayout};

pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerMoments};
pub use decode::{reforward_logits, Decoder};
pub use forward::{batch_loss, forward, forward_row, loss_and_grads, LossStats, RowTrace};
pub use linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
    /// Reuse the input tables as the output head.
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_hidden: 512,
            max_seq_len: 256,
            norm_eps: 1e-5,
            rope_base: 10_000.0,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max_seq_len must be positive"));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::invalid("norm_eps, rope_base must be positive and init_std non-negative"));
        }
        Ok(())
    }
}

/// Shape and optimizer treatment of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Weight decay applies (matrices only, never norm gains).
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) const PER_LAYER: usize = 9;

/// Borrowed weights of one block.
pub struct LayerWeights<'a, F> {
    pub attn_norm: &'a [F],
    pub wq: &'a [F],
    pub wk: &'a [F],
    pub wv: &'a [F],
    pub wo: &'a [F],
    pub mlp_norm: &'a [F],
    pub w_gate: &'a [F],
    pub w_up: &'a [F],
    pub w_down: &'a [F],
}

/// All parameters, stored as flat row-major tensors in declaration order:
/// `text_embed`, `aux_embed`, per layer (`attn_norm`, `wq`, `wk`, `wv`,
/// `wo`, `mlp_norm`, `w_gate`, `w_up`, `w_down`), `final_norm`, `head`.
/// The same type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    config: ModelConfig,
    layout: VocabLayout,
    specs: Vec<TensorSpec>,
    tensors: Vec<Vec<F>>,
}

fn tensor_specs(cfg: &ModelConfig, layout: &VocabLayout) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let entry = |name: String, rows, cols, decay| TensorSpec { name, rows, cols, decay };
    let mut out = vec![
        entry("text_embed".into(), layout.text_size(), d, true),
        entry("aux_embed".into(), layout.total_size() - layout.text_size(), d, true),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(entry(p("attn_norm"), 1, d, false));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push(entry(p(w), d, d, true));
        }
        out.push(entry(p("mlp_norm"), 1, d, false));
        out.push(entry(p("w_gate"), h, d, true));
        out.push(entry(p("w_up"), h, d, true));
        out.push(entry(p("w_down"), d, h, true));
    }
    out.push(entry("final_norm".into(), 1, d, false));
    if !cfg.tie_embeddings {
        out.push(entry("head".into(), layout.total_size(), d, true));
    }
    out
}

impl<F: Scalar> ParamStore<F> {
    pub fn zeros(config: ModelConfig, layout: VocabLayout) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config, &layout);
        let tensors = specs.iter().map(|s| vec![F::zero(); s.len()]).collect();
        Ok(Self {
            config,
            layout,
            specs,
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout,
            specs: self.specs.clone(),
            tensors: self.specs.iter().map(|s| vec![F::zero(); s.len()]).collect(),
        }
    }

    /// Converts every element to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            config: self.config,
            layout: self.layout,
            specs: self.specs.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&x| G::of(x.as_f64())).collect())
                .collect(),
        }
    }
}

impl<F> ParamStore<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Vec<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<F>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(TensorSpec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.index_of(name).map(|i| self.tensors[i].as_slice())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        self.index_of(name).map(move |i| self.tensors[i].as_mut_slice())
    }

    pub fn text_embed(&self) -> &[F] {
        &self.tensors[0]
    }

    pub fn aux_embed(&self) -> &[F] {
        &self.tensors[1]
    }

    pub(crate) fn layer_base(l: usize) -> usize {
        2 + l * PER_LAYER
    }

    pub(crate) fn final_norm_index(&self) -> usize {
        2 + self.config.n_layers * PER_LAYER
    }

    pub fn layer(&self, l: usize) -> LayerWeights<'_, F> {
        let t = &self.tensors[Self::layer_base(l)..Self::layer_base(l) + PER_LAYER];
        LayerWeights {
            attn_norm: &t[0],
            wq: &t[1],
            wk: &t[2],
            wv: &t[3],
            wo: &t[4],
            mlp_norm: &t[5],
            w_gate: &t[6],
            w_up: &t[7],
            w_down: &t[8],
        }
    }

    pub fn final_norm(&self) -> &[F] {
        &self.tensors[self.final_norm_index()]
    }

    /// Output-head pieces as `(first vocab row, tensor index)`. Rows of the
    /// pieces concatenate to the full vocabulary in ID order.
    pub(crate) fn head_parts(&self) -> Vec<(usize, usize)> {
        if self.config.tie_embeddings {
            vec![(0, 0), (self.layout.text_size(), 1)]
        } else {
            vec![(0, self.final_norm_index() + 1)]
        }
    }

    /// `(tensor index, row)` of the input embedding for `id`.
    pub(crate) fn embed_row(&self, id: TokenId) -> (usize, usize) {
        let t = self.layout.text_size();
        let id = id as usize;
        if id < t {
            (0, id)
        } else {
            (1, id - t)
        }
    }

    pub fn same_shape<G>(&self, other: &ParamStore<G>) -> bool {
        self.config == other.config && self.layout == other.layout
    }
}

/// Fresh parameters: every matrix `normal(0, init_std)`, with the residual
/// output projections (`wo`, `w_down`) further scaled by `1/sqrt(2·layers)`,
/// and norm gains at 1.
///
/// With `warm_text`, every tensor is copied from the donor except the
/// auxiliary-table rows of visual IDs and of `[SOI]`, `[EOI]`, `[MASK]` and
/// `PAD`, which keep their fresh values. The donor must have the same
/// configuration and layout.
pub fn init_params<F: Scalar>(
    cfg: &ModelConfig,
    layout: &VocabLayout,
    seed: u64,
    warm_text: Option<&ParamStore<F>>,
) -> Result<ParamStore<F>> {
    let mut params = ParamStore::zeros(*cfg, *layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    for (ts, t) in params.specs.iter().zip(params.tensors.iter_mut()) {
        if !ts.decay {
            t.fill(F::one());
            continue;
        }
        let scale = if ts.name.ends_with(".wo") || ts.name.ends_with(".w_down") {
            residual_scale
        } else {
            1.0
        };
        for x in t.iter_mut() {
            *x = F::of(normal.sample(&mut rng) * scale);
        }
    }
    if let Some(donor) = warm_text {
        if !donor.same_shape(&params) {
            return Err(Error::invalid(
                "warm-start parameters have a different configuration or vocabulary layout",
            ));
        }
        let d = cfg.d_model;
        let t = layout.text_size();
        let kept: Vec<usize> = [Special::Sos, Special::Eos]
            .iter()
            .map(|&s| layout.special(s) as usize - t)
            .collect();
        for (i, (dst, src)) in params.tensors.iter_mut().zip(&donor.tensors).enumerate() {
            if i == 1 {
                for row in kept.iter().copied() {
                    dst[row * d..(row + 1) * d].copy_from_slice(&src[row * d..(row + 1) * d]);
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(params)
}
