use crate::error::{Error, Result};
use crate::prompt::{Modality, PackedBatch};
use crate::vocab::TokenId;

use super::linalg::{axpy, dot, gemm, linear, linear_back_input, linear_back_weight, Scalar, View};
use super::{ModelConfig, ParamStore};

/// Per-position `(first attendable position, rotary position)`.
fn positions(block_starts: &[usize]) -> Vec<usize> {
    block_starts.iter().enumerate().map(|(i, &s)| i - s).collect()
}

pub(crate) struct Rope<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> Rope<F> {
    pub(crate) fn new(cfg: &ModelConfig, max_pos: usize) -> Self {
        let hd = cfg.head_dim();
        let half = hd / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for i in 0..half {
                let theta = p as f64 * cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(F::of(theta.cos()));
                sin.push(F::of(theta.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates each head's consecutive pairs of `x` (one `d`-row) by `pos`.
    pub(crate) fn apply(&self, x: &mut [F], pos: usize, inverse: bool) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in x.chunks_exact_mut(self.half * 2) {
            for i in 0..self.half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = x0 * c[i] - x1 * sn;
                head[2 * i + 1] = x0 * sn + x1 * c[i];
            }
        }
    }
}

/// `out = x / rms(x) * g` per row; `inv` receives `1 / rms(x)`.
pub(crate) fn rmsnorm<F: Scalar>(x: &[F], g: &[F], eps: F, out: &mut [F], inv: &mut [F]) {
    let d = g.len();
    for ((xr, or), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(inv.iter_mut()) {
        let ms = dot(xr, xr) / F::of(d as f64);
        *r = F::one() / (ms + eps).sqrt();
        for ((o, &xi), &gi) in or.iter_mut().zip(xr).zip(g) {
            *o = xi * *r * gi;
        }
    }
}

/// Accumulates the input gradient into `dx` and the gain gradient into `dg`.
fn rmsnorm_back<F: Scalar>(dy: &[F], x: &[F], inv: &[F], g: &[F], dx: &mut [F], dg: &mut [F]) {
    let d = g.len();
    let df = F::of(d as f64);
    for (((dyr, xr), dxr), &r) in dy.chunks_exact(d).zip(x.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(inv) {
        let mut s = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * r;
            s += dyr[j] * g[j] * xr[j];
        }
        let coef = r * r * r * s / df;
        for j in 0..d {
            dxr[j] += r * g[j] * dyr[j] - xr[j] * coef;
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn all_finite<F: Scalar>(x: &[F]) -> bool {
    x.iter().all(|v| v.is_finite())
}

struct LayerCache<F> {
    x: Vec<F>,
    r1: Vec<F>,
    a: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    o: Vec<F>,
    xm: Vec<F>,
    r2: Vec<F>,
    b: Vec<F>,
    gate: Vec<F>,
    up: Vec<F>,
    act: Vec<F>,
}

/// Activations of one packed row, sufficient for an exact reverse pass.
/// [`RowTrace::backward`] consumes it.
pub struct RowTrace<F> {
    ids: Vec<TokenId>,
    block_starts: Vec<usize>,
    pos: Vec<usize>,
    /// Offset of position `p`'s attention row inside one head's slab.
    prob_off: Vec<usize>,
    prob_len: usize,
    layers: Vec<LayerCache<F>>,
    xf: Vec<F>,
    rf: Vec<F>,
    f: Vec<F>,
    logits: Vec<F>,
}

impl<F: Scalar> RowTrace<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row-major `len × total_size`.
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<F> {
        self.logits
    }

    fn validate(params: &ParamStore<F>, ids: &[TokenId], block_starts: &[usize]) -> Result<()> {
        let cfg = params.config();
        if ids.len() != block_starts.len() {
            return Err(Error::invalid("ids and block starts differ in length"));
        }
        if ids.len() > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "row of length {} exceeds max_seq_len {}",
                ids.len(),
                cfg.max_seq_len
            )));
        }
        let total = params.layout().total_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= total) {
            return Err(Error::InvalidToken {
                id,
                reason: format!("outside the vocabulary of {total}"),
            });
        }
        for (i, &s) in block_starts.iter().enumerate() {
            let ok = s <= i && (i == 0 || s == i || s == block_starts[i - 1]);
            if !ok {
                return Err(Error::invalid(format!("block start {s} at position {i} is not contiguous")));
            }
        }
        Ok(())
    }

    /// Accumulates gradients of `sum(dlogits ⊙ logits)` into `grads`.
    pub fn backward(self, params: &ParamStore<F>, dlogits: &[F], grads: &mut ParamStore<F>) {
        let cfg = params.config();
        let (l, d, h) = (self.len(), cfg.d_model, cfg.mlp_hidden);
        let vocab = params.layout().total_size();
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        assert_eq!(dlogits.len(), l * vocab, "dlogits shape");
        assert!(grads.same_shape(params), "gradient store shape");
        if l == 0 {
            return;
        }
        let rope = Rope::<F>::new(cfg, self.pos.iter().max().map_or(0, |&p| p + 1));
        let scale = F::one() / F::of(hd as f64).sqrt();

        let mut df = vec![F::zero(); l * d];
        for (k, (row0, ti)) in params.head_parts().into_iter().enumerate() {
            let table = &params.tensors()[ti];
            let n = table.len() / d;
            let dl = &dlogits[row0..];
            gemm(l, n, d, View { data: dl, rs: vocab, cs: 1 }, View::rm(table, d), &mut df, d, k > 0);
            let dt = &mut grads.tensors_mut()[ti];
            gemm(n, l, d, View { data: dl, rs: 1, cs: vocab }, View::rm(&self.f, d), dt, d, true);
        }
        let fi = params.final_norm_index();
        let mut dx = vec![F::zero(); l * d];
        rmsnorm_back(&df, &self.xf, &self.rf, params.final_norm(), &mut dx, &mut grads.tensors_mut()[fi]);

        let mut dact = vec![F::zero(); l * h];
        let mut dgate = vec![F::zero(); l * h];
        let mut dup = vec![F::zero(); l * h];
        let mut db = vec![F::zero(); l * d];
        let mut dob = vec![F::zero(); l * d];
        let mut dq = vec![F::zero(); l * d];
        let mut dk = vec![F::zero(); l * d];
        let mut dv = vec![F::zero(); l * d];
        let mut da = vec![F::zero(); l * d];
        let max_block = (0..l).map(|p| p - self.block_starts[p] + 1).max().unwrap_or(1);
        let mut dp = vec![F::zero(); max_block];

        for (li, c) in self.layers.iter().enumerate().rev() {
            let w = params.layer(li);
            let base = ParamStore::<F>::layer_base(li);
            let g = grads.tensors_mut();

            // MLP branch: out = xm + act · w_down^T
            linear_back_input(l, h, d, &dx, w.w_down, &mut dact, false);
            linear_back_weight(l, h, d, &dx, &c.act, &mut g[base + 8]);
            for i in 0..l * h {
                let s = sigmoid(c.gate[i]);
                let silu = c.gate[i] * s;
                dup[i] = dact[i] * silu;
                dgate[i] = dact[i] * c.up[i] * s * (F::one() + c.gate[i] * (F::one() - s));
            }
            linear_back_weight(l, d, h, &dgate, &c.b, &mut g[base + 6]);
            linear_back_weight(l, d, h, &dup, &c.b, &mut g[base + 7]);
            linear_back_input(l, d, h, &dgate, w.w_gate, &mut db, false);
            linear_back_input(l, d, h, &dup, w.w_up, &mut db, true);
            rmsnorm_back(&db, &c.xm, &c.r2, w.mlp_norm, &mut dx, &mut g[base + 5]);

            // attention branch: xm = x + o · wo^T
            linear_back_input(l, d, d, &dx, w.wo, &mut dob, false);
            linear_back_weight(l, d, d, &dx, &c.o, &mut g[base + 4]);
            dq.fill(F::zero());
            dk.fill(F::zero());
            dv.fill(F::zero());
            for head in 0..nh {
                let slab = &c.probs[head * self.prob_len..(head + 1) * self.prob_len];
                let hs = head * hd;
                for p in 0..l {
                    let s = self.block_starts[p];
                    let n = p - s + 1;
                    let pr = &slab[self.prob_off[p]..self.prob_off[p] + n];
                    let dop = &dob[p * d + hs..p * d + hs + hd];
                    let mut sum = F::zero();
                    for j in 0..n {
                        let t = s + j;
                        dp[j] = dot(dop, &c.v[t * d + hs..t * d + hs + hd]);
                        sum += pr[j] * dp[j];
                        axpy(pr[j], dop, &mut dv[t * d + hs..t * d + hs + hd]);
                    }
                    for j in 0..n {
                        let t = s + j;
                        let ds = pr[j] * (dp[j] - sum) * scale;
                        axpy(ds, &c.k[t * d + hs..t * d + hs + hd], &mut dq[p * d + hs..p * d + hs + hd]);
                        axpy(ds, &c.q[p * d + hs..p * d + hs + hd], &mut dk[t * d + hs..t * d + hs + hd]);
                    }
                }
            }
            for p in 0..l {
                rope.apply(&mut dq[p * d..(p + 1) * d], self.pos[p], true);
                rope.apply(&mut dk[p * d..(p + 1) * d], self.pos[p], true);
            }
            linear_back_weight(l, d, d, &dq, &c.a, &mut g[base + 1]);
            linear_back_weight(l, d, d, &dk, &c.a, &mut g[base + 2]);
            linear_back_weight(l, d, d, &dv, &c.a, &mut g[base + 3]);
            linear_back_input(l, d, d, &dq, w.wq, &mut da, false);
            linear_back_input(l, d, d, &dk, w.wk, &mut da, true);
            linear_back_input(l, d, d, &dv, w.wv, &mut da, true);
            rmsnorm_back(&da, &c.x, &c.r1, w.attn_norm, &mut dx, &mut g[base]);
        }

        for (p, &id) in self.ids.iter().enumerate() {
            let (ti, row) = params.embed_row(id);
            let t = &mut grads.tensors_mut()[ti];
            axpy(F::one(), &dx[p * d..(p + 1) * d], &mut t[row * d..(row + 1) * d]);
        }
    }
}

/// Runs one packed row. `block_starts[i]` is the first position `i` may
/// attend to; rotary positions restart at each block.
pub fn forward_row<F: Scalar>(params: &ParamStore<F>, ids: &[TokenId], block_starts: &[usize]) -> Result<RowTrace<F>> {
    RowTrace::validate(params, ids, block_starts)?;
    let cfg = params.config();
    let (l, d, h) = (ids.len(), cfg.d_model, cfg.mlp_hidden);
    let vocab = params.layout().total_size();
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let eps = F::of(cfg.norm_eps);
    let pos = positions(block_starts);
    let rope = Rope::<F>::new(cfg, pos.iter().max().map_or(0, |&p| p + 1));
    let scale = F::one() / F::of(hd as f64).sqrt();

    let mut prob_off = Vec::with_capacity(l);
    let mut prob_len = 0;
    for (p, &s) in block_starts.iter().enumerate() {
        prob_off.push(prob_len);
        prob_len += p - s + 1;
    }

    let mut x = vec![F::zero(); l * d];
    for (p, &id) in ids.iter().enumerate() {
        let (ti, row) = params.embed_row(id);
        x[p * d..(p + 1) * d].copy_from_slice(&params.tensors()[ti][row * d..(row + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let w = params.layer(li);
        let mut r1 = vec![F::zero(); l];
        let mut a = vec![F::zero(); l * d];
        rmsnorm(&x, w.attn_norm, eps, &mut a, &mut r1);
        let mut q = vec![F::zero(); l * d];
        let mut k = vec![F::zero(); l * d];
        let mut v = vec![F::zero(); l * d];
        linear(l, d, d, &a, w.wq, &mut q, false);
        linear(l, d, d, &a, w.wk, &mut k, false);
        linear(l, d, d, &a, w.wv, &mut v, false);
        for p in 0..l {
            rope.apply(&mut q[p * d..(p + 1) * d], pos[p], false);
            rope.apply(&mut k[p * d..(p + 1) * d], pos[p], false);
        }
        let mut probs = vec![F::zero(); nh * prob_len];
        let mut o = vec![F::zero(); l * d];
        for head in 0..nh {
            let slab = &mut probs[head * prob_len..(head + 1) * prob_len];
            let hs = head * hd;
            for p in 0..l {
                let s = block_starts[p];
                let n = p - s + 1;
                let pr = &mut slab[prob_off[p]..prob_off[p] + n];
                let qp = &q[p * d + hs..p * d + hs + hd];
                let mut max = F::neg_infinity();
                for j in 0..n {
                    let t = s + j;
                    pr[j] = dot(qp, &k[t * d + hs..t * d + hs + hd]) * scale;
                    max = max.max(pr[j]);
                }
                let mut sum = F::zero();
                for e in pr.iter_mut() {
                    *e = (*e - max).exp();
                    sum += *e;
                }
                let op = &mut o[p * d + hs..p * d + hs + hd];
                for j in 0..n {
                    pr[j] = pr[j] / sum;
                    axpy(pr[j], &v[(s + j) * d + hs..(s + j) * d + hs + hd], op);
                }
            }
        }
        let mut xm = x.clone();
        linear(l, d, d, &o, w.wo, &mut xm, true);
        if !all_finite(&xm) {
            return Err(Error::NumericOverflow { layer: li, site: "attention" });
        }
        let mut r2 = vec![F::zero(); l];
        let mut b = vec![F::zero(); l * d];
        rmsnorm(&xm, w.mlp_norm, eps, &mut b, &mut r2);
        let mut gate = vec![F::zero(); l * h];
        let mut up = vec![F::zero(); l * h];
        linear(l, d, h, &b, w.w_gate, &mut gate, false);
        linear(l, d, h, &b, w.w_up, &mut up, false);
        let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
        let mut out = xm.clone();
        linear(l, h, d, &act, w.w_down, &mut out, true);
        if !all_finite(&out) {
            return Err(Error::NumericOverflow { layer: li, site: "mlp" });
        }
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, out),
            r1,
            a,
            q,
            k,
            v,
            probs,
            o,
            xm,
            r2,
            b,
            gate,
            up,
            act,
        });
    }

    let mut rf = vec![F::zero(); l];
    let mut f = vec![F::zero(); l * d];
    rmsnorm(&x, params.final_norm(), eps, &mut f, &mut rf);
    let mut logits = vec![F::zero(); l * vocab];
    for (row0, ti) in params.head_parts() {
        let table = &params.tensors()[ti];
        let n = table.len() / d;
        gemm(l, d, n, View::rm(&f, d), View::tr(table, d), &mut logits[row0..], vocab, false);
    }
    if !all_finite(&logits) {
        return Err(Error::NumericOverflow {
            layer: cfg.n_layers,
            site: "head",
        });
    }
    Ok(RowTrace {
        ids: ids.to_vec(),
        block_starts: block_starts.to_vec(),
        pos,
        prob_off,
        prob_len,
        layers,
        xf: x,
        rf,
        f,
        logits,
    })
}

/// Logits for every position of every row (`row_len × total_size` each).
pub fn forward<F: Scalar>(params: &ParamStore<F>, batch: &PackedBatch) -> Result<Vec<Vec<F>>> {
    batch
        .rows
        .iter()
        .map(|r| forward_row(params, &r.ids, &r.block_starts()).map(RowTrace::into_logits))
        .collect()
}

/// Summed negative log-likelihood, overall and per modality.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub nll_sum: f64,
    pub count: usize,
    pub modality_nll: [f64; 3],
    pub modality_count: [usize; 3],
}

impl LossStats {
    /// Mean NLL over all targets (NaN when there are none).
    pub fn mean(&self) -> f64 {
        self.nll_sum / self.count as f64
    }

    pub fn modality_mean(&self, m: Modality) -> Option<f64> {
        let n = self.modality_count[m.index()];
        (n > 0).then(|| self.modality_nll[m.index()] / n as f64)
    }

    pub fn merge(&mut self, other: &LossStats) {
        self.nll_sum += other.nll_sum;
        self.count += other.count;
        for m in 0..3 {
            self.modality_nll[m] += other.modality_nll[m];
            self.modality_count[m] += other.modality_count[m];
        }
    }
}

/// Numerically stable `(log-sum-exp, max)` of one logit row.
fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-position `(target, modality index)` for a packed row.
fn row_targets(row: &crate::prompt::PackedRow) -> Vec<Option<(TokenId, Option<usize>)>> {
    let mut out = vec![None; row.ids.len()];
    for s in &row.samples {
        let m = s.kind.modality().map(Modality::index);
        for i in s.start..s.start + s.len - 1 {
            out[i] = Some((row.ids[i + 1], m));
        }
    }
    out
}

fn row_loss<F: Scalar>(
    logits: &[F],
    vocab: usize,
    targets: &[Option<(TokenId, Option<usize>)>],
    stats: &mut LossStats,
    mut dlogits: Option<(&mut [F], F)>,
) {
    for (p, t) in targets.iter().enumerate() {
        let Some((tgt, m)) = *t else { continue };
        let row = &logits[p * vocab..(p + 1) * vocab];
        let lse = log_sum_exp(row);
        let nll = (lse - row[tgt as usize]).as_f64();
        stats.nll_sum += nll;
        stats.count += 1;
        if let Some(m) = m {
            stats.modality_nll[m] += nll;
            stats.modality_count[m] += 1;
        }
        if let Some((dl, inv_n)) = dlogits.as_mut() {
            let dr = &mut dl[p * vocab..(p + 1) * vocab];
            for (g, &z) in dr.iter_mut().zip(row) {
                *g = (z - lse).exp() * *inv_n;
            }
            dr[tgt as usize] = dr[tgt as usize] - *inv_n;
        }
    }
}

/// Loss statistics without gradients. Only the occupied prefix of each row
/// is run; padding attends only to itself and carries no targets.
pub fn batch_loss<F: Scalar>(params: &ParamStore<F>, batch: &PackedBatch) -> Result<LossStats> {
    let vocab = params.layout().total_size();
    let mut stats = LossStats::default();
    for row in &batch.rows {
        let used = row.used_len();
        let trace = forward_row(params, &row.ids[..used], &row.block_starts()[..used])?;
        row_loss(trace.logits(), vocab, &row_targets(row)[..used], &mut stats, None);
    }
    Ok(stats)
}

/// Mean next-token NLL over every target position of the batch, with its
/// exact gradient. Next-token targets stay inside each packed sample.
pub fn loss_and_grads<F: Scalar>(params: &ParamStore<F>, batch: &PackedBatch) -> Result<(LossStats, ParamStore<F>)> {
    let vocab = params.layout().total_size();
    let total = batch.target_count();
    if total == 0 {
        return Err(Error::invalid("batch has no target positions"));
    }
    let inv_n = F::one() / F::of(total as f64);
    let mut grads = params.zeros_like();
    let mut stats = LossStats::default();
    for row in &batch.rows {
        let used = row.used_len();
        let trace = forward_row(params, &row.ids[..used], &row.block_starts()[..used])?;
        let mut dl = vec![F::zero(); used * vocab];
        row_loss(trace.logits(), vocab, &row_targets(row)[..used], &mut stats, Some((&mut dl, inv_n)));
        trace.backward(params, &dl, &mut grads);
    }
    Ok((stats, grads))
}
