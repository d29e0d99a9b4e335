use crate::error::{Error, Result};
use crate::vocab::TokenId;

use super::forward::{forward_row, rmsnorm, Rope};
use super::linalg::{axpy, dot, gemm, linear, Scalar, View};
use super::ParamStore;

/// Incremental decoder over one sequence, caching keys and values per layer.
/// Cloning forks the stream (used for the two guidance streams).
#[derive(Clone)]
pub struct Decoder<'a, F> {
    params: &'a ParamStore<F>,
    rope: std::rc::Rc<Rope<F>>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    ids: Vec<TokenId>,
    logits: Vec<F>,
}

impl<'a, F: Scalar> Decoder<'a, F> {
    pub fn new(params: &'a ParamStore<F>) -> Self {
        let cfg = params.config();
        Self {
            params,
            rope: std::rc::Rc::new(Rope::new(cfg, cfg.max_seq_len)),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            ids: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Next-token logits after the last pushed token (empty before any push).
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn prefill(&mut self, ids: &[TokenId]) -> Result<&[F]> {
        for &id in ids {
            self.push(id)?;
        }
        Ok(&self.logits)
    }

    /// Appends `id` and returns the logits predicting the following token.
    pub fn push(&mut self, id: TokenId) -> Result<&[F]> {
        let p = self.params;
        let cfg = p.config();
        let (d, h, nh, hd) = (cfg.d_model, cfg.mlp_hidden, cfg.n_heads, cfg.head_dim());
        let vocab = p.layout().total_size();
        let pos = self.ids.len();
        if pos >= cfg.max_seq_len {
            return Err(Error::invalid(format!("sequence would exceed max_seq_len {}", cfg.max_seq_len)));
        }
        if id as usize >= vocab {
            return Err(Error::InvalidToken {
                id,
                reason: format!("outside the vocabulary of {vocab}"),
            });
        }
        let eps = F::of(cfg.norm_eps);
        let scale = F::one() / F::of(hd as f64).sqrt();
        let (ti, row) = p.embed_row(id);
        let mut x = p.tensors()[ti][row * d..(row + 1) * d].to_vec();
        let mut r = [F::zero()];
        let mut a = vec![F::zero(); d];
        let mut q = vec![F::zero(); d];
        let mut k = vec![F::zero(); d];
        let mut v = vec![F::zero(); d];
        let mut o = vec![F::zero(); d];
        let mut gate = vec![F::zero(); h];
        let mut up = vec![F::zero(); h];
        let mut scores = vec![F::zero(); pos + 1];
        for li in 0..cfg.n_layers {
            let w = p.layer(li);
            rmsnorm(&x, w.attn_norm, eps, &mut a, &mut r);
            linear(1, d, d, &a, w.wq, &mut q, false);
            linear(1, d, d, &a, w.wk, &mut k, false);
            linear(1, d, d, &a, w.wv, &mut v, false);
            self.rope.apply(&mut q, pos, false);
            self.rope.apply(&mut k, pos, false);
            let keys = &mut self.keys[li];
            let values = &mut self.values[li];
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);
            o.fill(F::zero());
            for head in 0..nh {
                let hs = head * hd;
                let qh = &q[hs..hs + hd];
                let mut max = F::neg_infinity();
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &keys[t * d + hs..t * d + hs + hd]) * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (t, s) in scores.iter().enumerate() {
                    axpy(*s / sum, &values[t * d + hs..t * d + hs + hd], &mut o[hs..hs + hd]);
                }
            }
            linear(1, d, d, &o, w.wo, &mut x, true);
            if !x.iter().all(|z| z.is_finite()) {
                return Err(Error::NumericOverflow { layer: li, site: "attention" });
            }
            rmsnorm(&x, w.mlp_norm, eps, &mut a, &mut r);
            linear(1, d, h, &a, w.w_gate, &mut gate, false);
            linear(1, d, h, &a, w.w_up, &mut up, false);
            for (g, &u) in gate.iter_mut().zip(&up) {
                *g = *g / (F::one() + (-*g).exp()) * u;
            }
            linear(1, h, d, &gate, w.w_down, &mut x, true);
            if !x.iter().all(|z| z.is_finite()) {
                return Err(Error::NumericOverflow { layer: li, site: "mlp" });
            }
        }
        rmsnorm(&x.clone(), p.final_norm(), eps, &mut x, &mut r);
        self.logits.resize(vocab, F::zero());
        for (row0, ti) in p.head_parts() {
            let table = &p.tensors()[ti];
            let n = table.len() / d;
            gemm(1, d, n, View::rm(&x, d), View::tr(table, d), &mut self.logits[row0..], vocab, false);
        }
        if !self.logits.iter().all(|z| z.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: cfg.n_layers,
                site: "head",
            });
        }
        self.ids.push(id);
        Ok(&self.logits)
    }
}

/// Reference for [`Decoder`]: re-runs the full sequence and returns the
/// last position's logits.
pub fn reforward_logits<F: Scalar>(params: &ParamStore<F>, ids: &[TokenId]) -> Result<Vec<F>> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot forward an empty sequence"));
    }
    let vocab = params.layout().total_size();
    let trace = forward_row(params, ids, &vec![0; ids.len()])?;
    Ok(trace.logits()[(ids.len() - 1) * vocab..].to_vec())
}
