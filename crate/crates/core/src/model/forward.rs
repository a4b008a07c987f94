//! Pre-norm causal decoder: RMS norm, multi-head attention, SiLU-gated MLP,
//! learned absolute positions. Every linear layer computes
//! `x W^T + (alpha / r) * dropout(x) A^T B^T`.
//!
//! The backward pass is hand-written and produces gradients for the adapter
//! matrices only. Activation gradients flow through the frozen weights, but
//! no gradient buffer is ever allocated for them.

use std::borrow::Cow;

use ndarray::{s, Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use super::params::{LoraAdapter, Parameters};
use crate::error::{Error, Result};
use crate::seed;

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Adapter-input dropout active, masks drawn from the step seed.
    Train,
    Eval,
}

/// Gradients for each trainable tensor, aligned with
/// [`Parameters::trainable_names`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub tensors: Vec<Array2<f64>>,
}

impl LoraGrads {
    pub fn zeros_like(params: &Parameters) -> Self {
        LoraGrads {
            tensors: params
                .trainables()
                .into_iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &LoraGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            *t *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense weights for one pass; quantized bases are dequantized once here.
struct DenseView<'a> {
    weights: Vec<Cow<'a, Array2<f64>>>,
}

impl<'a> DenseView<'a> {
    fn new(params: &'a Parameters) -> Result<Self> {
        let weights = params
            .linears()
            .into_iter()
            .map(|(_, lin)| lin.weight.dense())
            .collect::<Result<_>>()?;
        Ok(DenseView { weights })
    }
}

struct LinearCache {
    /// Adapter input after dropout; `None` when the layer has no adapter.
    x_drop: Option<Array2<f64>>,
    /// Per-element dropout multiplier (0 or 1/(1-p)).
    mask: Option<Array2<f64>>,
    /// `x_drop A^T`, shape `T x r`.
    h: Option<Array2<f64>>,
}

struct LinearCtx<'p> {
    weight: &'p Array2<f64>,
    adapter: Option<&'p LoraAdapter>,
    /// Canonical linear index, used to derive dropout streams and to locate
    /// gradient slots.
    index: usize,
}

fn dropout_mask(seed: u64, index: usize, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let mut rng = seed::rng_for(seed, "lora.dropout", &[index as u64]);
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn linear_forward(
    ctx: &LinearCtx<'_>,
    x: &Array2<f64>,
    mode: Mode,
    seed: u64,
) -> (Array2<f64>, LinearCache) {
    let mut y = x.dot(&ctx.weight.t());
    let Some(ad) = ctx.adapter else {
        return (
            y,
            LinearCache {
                x_drop: None,
                mask: None,
                h: None,
            },
        );
    };
    let mask = (mode == Mode::Train && ad.dropout > 0.0)
        .then(|| dropout_mask(seed, ctx.index, x.nrows(), x.ncols(), ad.dropout));
    let x_drop = match &mask {
        Some(m) => x * m,
        None => x.clone(),
    };
    let h = x_drop.dot(&ad.a.t());
    y.scaled_add(ad.scale(), &h.dot(&ad.b.t()));
    (
        y,
        LinearCache {
            x_drop: Some(x_drop),
            mask,
            h: Some(h),
        },
    )
}

/// Returns `dL/dx` and accumulates adapter gradients into `grads[slot]`.
fn linear_backward(
    ctx: &LinearCtx<'_>,
    cache: &LinearCache,
    dy: &Array2<f64>,
    grads: &mut [Array2<f64>],
    slot: Option<usize>,
) -> Array2<f64> {
    let mut dx = dy.dot(ctx.weight);
    if let (Some(ad), Some(slot)) = (ctx.adapter, slot) {
        let h = cache.h.as_ref().expect("adapter cache");
        let x_drop = cache.x_drop.as_ref().expect("adapter cache");
        let s = ad.scale();
        // dB = s dy^T h, dh = s dy B, dA = dh^T x_drop
        grads[2 * slot + 1].scaled_add(s, &dy.t().dot(h));
        let dh = dy.dot(&ad.b) * s;
        grads[2 * slot] += &dh.t().dot(x_drop);
        let mut dx_drop = dh.dot(&ad.a);
        if let Some(m) = &cache.mask {
            dx_drop *= m;
        }
        dx += &dx_drop;
    }
    dx
}

fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, &r) in y.rows_mut().into_iter().zip(&inv) {
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v *= r * g);
    }
    (y, inv)
}

fn rmsnorm_backward(
    x: &Array2<f64>,
    inv: &Array1<f64>,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..x.nrows() {
        let r = inv[t];
        let xr = x.row(t);
        let gdy: Array1<f64> = &dy.row(t) * gain;
        let dot = gdy.dot(&xr);
        let coef = r * r * r * dot / d;
        let mut out = dx.row_mut(t);
        Zip::from(&mut out)
            .and(&gdy)
            .and(&xr)
            .for_each(|o, &g, &xv| *o = r * g - coef * xv);
    }
    dx
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct AttnCache {
    /// Softmax weights per head, `T x T`, zero above the diagonal.
    probs: Vec<Array2<f64>>,
}

fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let (t_len, d) = q.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((t_len, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut p = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let qi = qh.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let sc = qi.dot(&kh.row(j)) * scale;
                p[[i, j]] = sc;
                max = max.max(sc);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (p[[i, j]] - max).exp();
                p[[i, j]] = e;
                sum += e;
            }
            let mut oi = out.slice_mut(s![i, h * hd..(h + 1) * hd]);
            for j in 0..=i {
                p[[i, j]] /= sum;
                oi.scaled_add(p[[i, j]], &vh.row(j));
            }
        }
        probs.push(p);
    }
    (out, AttnCache { probs })
}

fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttnCache,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t_len, d) = q.dim();
    let n_heads = cache.probs.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros((t_len, d));
    let mut dk = Array2::zeros((t_len, d));
    let mut dv = Array2::zeros((t_len, d));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh, doh) = (q.slice(cols), k.slice(cols), v.slice(cols), d_out.slice(cols));
        let mut dqh = dq.slice_mut(cols);
        for i in 0..t_len {
            let doi = doh.row(i);
            let dp: Vec<f64> = (0..=i).map(|j| doi.dot(&vh.row(j))).collect();
            let weighted: f64 = (0..=i).map(|j| p[[i, j]] * dp[j]).sum();
            for j in 0..=i {
                let pij = p[[i, j]];
                dv.slice_mut(s![j, h * hd..(h + 1) * hd]).scaled_add(pij, &doi);
                let ds = pij * (dp[j] - weighted) * scale;
                dqh.row_mut(i).scaled_add(ds, &kh.row(j));
                dk.slice_mut(s![j, h * hd..(h + 1) * hd]).scaled_add(ds, &qh.row(i));
            }
        }
    }
    (dq, dk, dv)
}

struct BlockCache {
    x_in: Array2<f64>,
    inv1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    x_mid: Array2<f64>,
    inv2: Array1<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    lin: Vec<LinearCache>,
}

struct Trace {
    blocks: Vec<BlockCache>,
    x_final: Array2<f64>,
    inv_final: Array1<f64>,
    head: LinearCache,
}

struct Pass<'p> {
    params: &'p Parameters,
    dense: DenseView<'p>,
    /// Gradient slot of each linear (adapter ordinal), if it has an adapter.
    slots: Vec<Option<usize>>,
}

impl<'p> Pass<'p> {
    fn new(params: &'p Parameters) -> Result<Self> {
        let mut next = 0;
        let slots = params
            .linears()
            .into_iter()
            .map(|(_, lin)| {
                lin.adapter.as_ref().map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Ok(Pass {
            params,
            dense: DenseView::new(params)?,
            slots,
        })
    }

    fn ctx(&self, index: usize) -> LinearCtx<'_> {
        let lin = if index == self.params.blocks.len() * 7 {
            &self.params.head
        } else {
            self.params.blocks[index / 7].linears()[index % 7]
        };
        LinearCtx {
            weight: &self.dense.weights[index],
            adapter: lin.adapter.as_ref(),
            index,
        }
    }

    fn check_input(&self, tokens: &[u32]) -> Result<()> {
        let cfg = &self.params.config;
        if tokens.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if tokens.len() > cfg.max_sequence_length {
            return Err(Error::Length {
                len: tokens.len(),
                max: cfg.max_sequence_length,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Token {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], mode: Mode, seed: u64) -> Result<(Array2<f64>, Trace)> {
        self.check_input(tokens)?;
        let p = self.params;
        let cfg = &p.config;
        let t_len = tokens.len();
        let mut x = Array2::zeros((t_len, cfg.d_model));
        for (t, &id) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&p.tok_emb.row(id as usize));
            row += &p.pos_emb.row(t);
        }

        let mut blocks = Vec::with_capacity(p.blocks.len());
        for (l, block) in p.blocks.iter().enumerate() {
            let base = 7 * l;
            let mut lin = Vec::with_capacity(7);
            let mut fwd = |i: usize, input: &Array2<f64>| {
                let (y, c) = linear_forward(&self.ctx(base + i), input, mode, seed);
                lin.push(c);
                y
            };
            let x_in = x;
            let (n1, inv1) = rmsnorm(&x_in, &block.attn_norm);
            let q = fwd(0, &n1);
            let k = fwd(1, &n1);
            let v = fwd(2, &n1);
            let (att, attn) = attention(&q, &k, &v, cfg.n_heads);
            let x_mid = &x_in + &fwd(3, &att);
            let (n2, inv2) = rmsnorm(&x_mid, &block.mlp_norm);
            let gate = fwd(4, &n2);
            let up = fwd(5, &n2);
            let hidden = Zip::from(&gate)
                .and(&up)
                .map_collect(|&g, &u| g * sigmoid(g) * u);
            x = &x_mid + &fwd(6, &hidden);
            blocks.push(BlockCache {
                x_in,
                inv1,
                q,
                k,
                v,
                attn,
                x_mid,
                inv2,
                gate,
                up,
                lin,
            });
        }
        let (nf, inv_final) = rmsnorm(&x, &p.final_norm);
        let (logits, head) = linear_forward(&self.ctx(7 * p.blocks.len()), &nf, mode, seed);
        Ok((
            logits,
            Trace {
                blocks,
                x_final: x,
                inv_final,
                head,
            },
        ))
    }

    fn backward(&self, trace: &Trace, d_logits: &Array2<f64>) -> LoraGrads {
        let p = self.params;
        let mut grads = LoraGrads::zeros_like(p);
        let g = &mut grads.tensors;
        let head_idx = 7 * p.blocks.len();
        let d_nf = linear_backward(
            &self.ctx(head_idx),
            &trace.head,
            d_logits,
            g,
            self.slots[head_idx],
        );
        let mut dx = rmsnorm_backward(&trace.x_final, &trace.inv_final, &p.final_norm, &d_nf);

        for (l, (block, c)) in p.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let base = 7 * l;
            let bwd = |i: usize, dy: &Array2<f64>, g: &mut [Array2<f64>]| {
                linear_backward(&self.ctx(base + i), &c.lin[i], dy, g, self.slots[base + i])
            };
            // MLP branch
            let d_hidden = bwd(6, &dx, g);
            let mut d_gate = Array2::zeros(c.gate.raw_dim());
            let mut d_up = Array2::zeros(c.up.raw_dim());
            Zip::from(&mut d_gate)
                .and(&mut d_up)
                .and(&d_hidden)
                .and(&c.gate)
                .and(&c.up)
                .for_each(|dg, du, &dh, &a, &u| {
                    let sg = sigmoid(a);
                    let silu = a * sg;
                    *du = dh * silu;
                    *dg = dh * u * sg * (1.0 + a * (1.0 - sg));
                });
            let d_n2 = bwd(4, &d_gate, g) + bwd(5, &d_up, g);
            let dx_mid = &dx + &rmsnorm_backward(&c.x_mid, &c.inv2, &block.mlp_norm, &d_n2);

            // Attention branch
            let d_att = bwd(3, &dx_mid, g);
            let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &d_att);
            let d_n1 = bwd(0, &dq, g) + bwd(1, &dk, g) + bwd(2, &dv, g);
            dx = &dx_mid + &rmsnorm_backward(&c.x_in, &c.inv1, &block.attn_norm, &d_n1);
        }
        grads
    }
}

/// Logits (`T x vocab_size`) for a token sequence. Eval mode is
/// deterministic and ignores `seed`.
pub fn forward(params: &Parameters, tokens: &[u32], mode: Mode, seed: u64) -> Result<Array2<f64>> {
    let pass = Pass::new(params)?;
    Ok(pass.run(tokens, mode, seed)?.0)
}

/// Forward over a batch, sharing one dequantization of the base weights.
pub fn forward_many(params: &Parameters, inputs: &[&[u32]]) -> Result<Vec<Array2<f64>>> {
    let pass = Pass::new(params)?;
    inputs
        .iter()
        .map(|t| pass.run(t, Mode::Eval, 0).map(|r| r.0))
        .collect()
}

fn log_softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Log-probabilities per row.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        o.assign(&log_softmax_row(row));
    }
    out
}

/// Summed negative log-likelihood over mask-true positions, the number of
/// such positions, and optionally `d(weight * sum)/d logits`.
fn nll(
    logits: &Array2<f64>,
    targets: &[u32],
    mask: &[bool],
    grad_weight: Option<f64>,
) -> Result<(f64, usize, Option<Array2<f64>>)> {
    if targets.len() != mask.len() {
        return Err(Error::Loss(format!(
            "{} targets but {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if targets.len() > logits.nrows() {
        return Err(Error::Loss(format!(
            "{} targets but only {} logit rows",
            targets.len(),
            logits.nrows()
        )));
    }
    let vocab = logits.ncols();
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = grad_weight.map(|_| Array2::zeros(logits.raw_dim()));
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::Token {
                id: target,
                vocab_size: vocab,
            });
        }
        let lp = log_softmax_row(logits.row(t));
        total -= lp[target as usize];
        count += 1;
        if let (Some(gr), Some(w)) = (grad.as_mut(), grad_weight) {
            let mut row = gr.row_mut(t);
            Zip::from(&mut row).and(&lp).for_each(|g, &l| *g = w * l.exp());
            row[target as usize] -= w;
        }
    }
    if count == 0 {
        return Err(Error::Loss("loss mask selects no positions".into()));
    }
    Ok((total, count, grad))
}

/// Mean next-token cross-entropy over mask-true positions. `targets[t]` is
/// the token predicted by logits row `t`.
pub fn loss(logits: &Array2<f64>, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    let (total, count, _) = nll(logits, targets, loss_mask, None)?;
    Ok(total / count as f64)
}

/// Loss and exact adapter gradients of the mean masked loss for one sequence.
pub fn backward(
    params: &Parameters,
    tokens: &[u32],
    targets: &[u32],
    loss_mask: &[bool],
    mode: Mode,
    seed: u64,
) -> Result<(f64, LoraGrads)> {
    let pass = Pass::new(params)?;
    let (logits, trace) = pass.run(tokens, mode, seed)?;
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Loss("loss mask selects no positions".into()));
    }
    let (total, count, d_logits) = nll(&logits, targets, loss_mask, Some(1.0 / count as f64))?;
    let grads = pass.backward(&trace, &d_logits.expect("requested"));
    Ok((total / count as f64, grads))
}

/// Reusable handle for many forward/backward calls against the same
/// parameters (the base is dequantized once).
pub struct Session<'p> {
    pass: Pass<'p>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p Parameters) -> Result<Self> {
        Ok(Session {
            pass: Pass::new(params)?,
        })
    }

    pub fn forward(&self, tokens: &[u32], mode: Mode, seed: u64) -> Result<Array2<f64>> {
        Ok(self.pass.run(tokens, mode, seed)?.0)
    }

    /// Summed masked NLL, its position count, and the gradients of
    /// `weight * sum`.
    pub fn weighted_grads(
        &self,
        tokens: &[u32],
        targets: &[u32],
        loss_mask: &[bool],
        mode: Mode,
        seed: u64,
        weight: f64,
    ) -> Result<(f64, usize, LoraGrads)> {
        let (logits, trace) = self.pass.run(tokens, mode, seed)?;
        let (total, count, d_logits) = nll(&logits, targets, loss_mask, Some(weight))?;
        Ok((total, count, self.pass.backward(&trace, &d_logits.expect("requested"))))
    }

    /// Summed masked NLL and position count, no gradients.
    pub fn nll_sum(
        &self,
        tokens: &[u32],
        targets: &[u32],
        loss_mask: &[bool],
        mode: Mode,
        seed: u64,
    ) -> Result<(f64, usize)> {
        let logits = self.forward(tokens, mode, seed)?;
        let (total, count, _) = nll(&logits, targets, loss_mask, None)?;
        Ok((total, count))
    }
}
