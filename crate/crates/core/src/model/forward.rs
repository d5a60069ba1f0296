//! Forward pass, cross-entropy loss and hand-written backpropagation.

use super::{FreezeMask, LanguageModel, Mode, RMS_EPS};
use crate::data::{Batch, Targets};
use crate::error::{Error, Result};
use crate::numeric::{axpy, matmul_at_acc, matmul_bt_into, matmul_into, Matrix};
use crate::par::{self, Execution};

/// Sequences per work unit; fixed so reductions do not depend on thread count.
const CHUNK: usize = 4;

/// Per-tensor gradients in canonical order; frozen tensors carry none.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: LanguageModel,
    frozen: Vec<bool>,
}

impl Gradients {
    /// All-zero gradients for `model`, with the given tensors frozen.
    pub fn zeros(model: &LanguageModel, freeze: &FreezeMask) -> Self {
        let tied = model.is_tied();
        let frozen = model
            .tensors()
            .iter()
            .map(|(n, _)| freeze.is_frozen(n, tied))
            .collect();
        Gradients {
            grads: model.zeros_like(),
            frozen,
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.iter().find(|(n, _)| n == name).and_then(|(_, g)| g)
    }

    /// `(tensor name, gradient)` in canonical order; `None` for frozen tensors.
    pub fn iter(&self) -> impl Iterator<Item = (String, Option<&[f64]>)> {
        self.grads
            .tensors()
            .into_iter()
            .zip(&self.frozen)
            .map(|((n, g), &f)| (n, (!f).then_some(g)))
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.grads.tensors_mut()
    }

    /// Unfrozen gradients concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.iter()
            .filter_map(|(_, g)| g)
            .flatten()
            .copied()
            .collect()
    }

    /// Global L2 norm over all trainable gradients.
    pub fn norm(&self) -> f64 {
        self.iter()
            .filter_map(|(_, g)| g)
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let n = self.norm();
        if n > max {
            self.scale(max / n);
        }
        n
    }

    fn zero_frozen(&mut self) {
        let frozen = self.frozen.clone();
        for ((_, t), f) in self.grads.tensors_mut().into_iter().zip(frozen) {
            if f {
                t.fill(0.0);
            }
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self
            .grads
            .tensors_mut()
            .into_iter()
            .zip(other.grads.tensors())
        {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, t) in self.grads.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    fn embed_frozen(&self) -> bool {
        self.frozen[0]
    }

    fn output_frozen(&self) -> bool {
        if self.grads.is_tied() {
            self.frozen[0]
        } else {
            self.frozen[1]
        }
    }
}

struct BlockCache {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    c: Vec<f64>,
    x1: Vec<f64>,
    inv2: Vec<f64>,
    b: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    x_out: Vec<f64>,
    inv_f: Vec<f64>,
    hf: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Row-wise RMS norm with gain; returns normalized rows and per-row `1/rms`.
fn rms_norm(x: &[f64], n: usize, d: usize, gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut inv = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv[t] = r;
        for j in 0..d {
            y[t * d + j] = row[j] * r * gain[j];
        }
    }
    (y, inv)
}

/// Backward of `rms_norm`; accumulates the gain gradient into `dgain` when given.
fn rms_norm_back(
    x: &[f64],
    inv: &[f64],
    gain: &[f64],
    dy: &[f64],
    n: usize,
    d: usize,
    mut dgain: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let r = inv[t];
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xr[j] * r;
            }
        }
        let proj: f64 = (0..d).map(|j| dyr[j] * gain[j] * xr[j]).sum();
        let coef = r * r * r * proj / d as f64;
        for j in 0..d {
            dx[t * d + j] = dyr[j] * gain[j] * r - xr[j] * coef;
        }
    }
    dx
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-log softmax(logits)[target]` and the softmax probabilities.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|v| (v - lse).exp()).collect();
    (lse - logits[target], probs)
}

fn run_sequence(m: &LanguageModel, ids: &[u32]) -> SeqCache {
    let d = m.dims.dim;
    let h = m.dims.hidden;
    let n = ids.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = Vec::with_capacity(n * d);
    for &id in ids {
        x.extend_from_slice(m.embed.row(id as usize));
    }
    let mut blocks = Vec::with_capacity(m.blocks.len());
    for blk in &m.blocks {
        let (a, inv1) = rms_norm(&x, n, d, &blk.attn_norm);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        matmul_into(&a, n, d, blk.wq.as_slice(), d, &mut q);
        matmul_into(&a, n, d, blk.wk.as_slice(), d, &mut k);
        matmul_into(&a, n, d, blk.wv.as_slice(), d, &mut v);
        let mut p = vec![0.0; n * n];
        matmul_bt_into(&q, n, d, &k, n, &mut p);
        for row in p.chunks_exact_mut(n) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_in_place(row);
        }
        let mut c = vec![0.0; n * d];
        matmul_into(&p, n, n, &v, d, &mut c);
        let mut o = vec![0.0; n * d];
        matmul_into(&c, n, d, blk.wo.as_slice(), d, &mut o);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

        let (b, inv2) = rms_norm(&x1, n, d, &blk.ffn_norm);
        let mut z = vec![0.0; n * h];
        matmul_into(&b, n, d, blk.w1.as_slice(), h, &mut z);
        for row in z.chunks_exact_mut(h) {
            for (zj, bj) in row.iter_mut().zip(&blk.b1) {
                *zj += bj;
            }
        }
        let u: Vec<f64> = z.iter().map(|&zj| zj * sigmoid(zj)).collect();
        let mut f = vec![0.0; n * d];
        matmul_into(&u, n, h, blk.w2.as_slice(), d, &mut f);
        let mut x2 = x1.clone();
        for t in 0..n {
            for j in 0..d {
                x2[t * d + j] += f[t * d + j] + blk.b2[j];
            }
        }
        blocks.push(BlockCache {
            x_in: std::mem::replace(&mut x, x2),
            inv1,
            a,
            q,
            k,
            v,
            p,
            c,
            x1,
            inv2,
            b,
            z,
            u,
        });
    }
    let (hf, inv_f) = rms_norm(&x, n, d, &m.final_norm);
    SeqCache {
        blocks,
        x_out: x,
        inv_f,
        hf,
    }
}

fn lm_logits(m: &LanguageModel, hf: &[f64], n: usize) -> Vec<f64> {
    let d = m.dims.dim;
    let v = m.dims.vocab;
    let mut logits = vec![0.0; n * v];
    matmul_bt_into(hf, n, d, m.output().as_slice(), v, &mut logits);
    logits
}

fn pooled(hf: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d];
    for row in hf.chunks_exact(d) {
        axpy(1.0, row, &mut p);
    }
    for x in &mut p {
        *x /= n as f64;
    }
    p
}

fn task_logits(m: &LanguageModel, hf: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let head = m.head.as_ref().expect("checked by caller");
    let d = m.dims.dim;
    let pool = pooled(hf, n, d);
    let logits = (0..head.weight.rows())
        .map(|c| crate::numeric::dot(head.weight.row(c), &pool) + head.bias[c])
        .collect();
    (pool, logits)
}

fn validate_inputs(m: &LanguageModel, inputs: &[Vec<u32>], mode: Mode) -> Result<()> {
    if mode == Mode::Task && m.head.is_none() {
        return Err(Error::Config("task mode needs a classifier head".into()));
    }
    let v = m.dims.vocab;
    for (s, ids) in inputs.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::Input {
                position: s,
                reason: "empty sequence".into(),
            });
        }
        if let Some(pos) = ids.iter().position(|&id| id as usize >= v) {
            return Err(Error::Input {
                position: pos,
                reason: format!("sequence {s}: id {} outside vocabulary of {v}", ids[pos]),
            });
        }
    }
    Ok(())
}

/// Logits per sequence: `n×V` in lm mode, `1×C` in task mode. Pure.
pub fn forward(m: &LanguageModel, inputs: &[Vec<u32>], mode: Mode) -> Result<Vec<Matrix>> {
    forward_with(Execution::default(), m, inputs, mode)
}

pub fn forward_with(
    exec: Execution,
    m: &LanguageModel,
    inputs: &[Vec<u32>],
    mode: Mode,
) -> Result<Vec<Matrix>> {
    validate_inputs(m, inputs, mode)?;
    let v = m.dims.vocab;
    Ok(par::map(exec, inputs, |ids| {
        let n = ids.len();
        let cache = run_sequence(m, ids);
        match mode {
            Mode::Lm => Matrix::from_fn(n, v, {
                let l = lm_logits(m, &cache.hf, n);
                move |r, c| l[r * v + c]
            }),
            Mode::Task => {
                let (_, l) = task_logits(m, &cache.hf, n);
                let c = l.len();
                Matrix::from_fn(1, c, |_, j| l[j])
            }
        }
    }))
}

/// Mean loss over the batch without gradients (same reduction as
/// [`loss_and_grads`]).
pub fn batch_loss(m: &LanguageModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    batch.validate_targets(m.dims)?;
    let logits = forward(m, &batch.inputs, batch.mode())?;
    let mut total = 0.0;
    for (s, l) in logits.iter().enumerate() {
        let seq = match &batch.targets {
            Targets::Tokens(t) => {
                let n = l.rows();
                (0..n)
                    .map(|r| cross_entropy(l.row(r), t[s][r] as usize).0)
                    .sum::<f64>()
                    / n as f64
            }
            Targets::Labels(y) => cross_entropy(l.row(0), y[s] as usize).0,
        };
        if !seq.is_finite() {
            return Err(Error::Numerical {
                epoch: None,
                batch: Some(s),
                reason: format!("non-finite loss for sequence {s}"),
            });
        }
        total += seq;
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy over the batch (per-sequence token mean in lm mode)
/// and its gradients. Mode follows the batch's targets.
pub fn loss_and_grads(
    m: &LanguageModel,
    batch: &Batch,
    freeze: &FreezeMask,
) -> Result<(f64, Gradients)> {
    loss_and_grads_with(Execution::default(), m, batch, freeze)
}

pub fn loss_and_grads_with(
    exec: Execution,
    m: &LanguageModel,
    batch: &Batch,
    freeze: &FreezeMask,
) -> Result<(f64, Gradients)> {
    let mode = batch.mode();
    let count = batch.len();
    if count == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    validate_inputs(m, &batch.inputs, mode)?;
    batch.validate_targets(m.dims)?;
    let template = Gradients::zeros(m, freeze);
    let order: Vec<usize> = (0..count).collect();
    let parts = par::map_chunks(exec, &order, CHUNK, |chunk| -> Result<(f64, Gradients)> {
        let mut g = template.clone();
        let mut loss = 0.0;
        for &s in chunk {
            let l = sequence_backward(m, batch, s, &mut g);
            if !l.is_finite() {
                return Err(Error::Numerical {
                    epoch: None,
                    batch: Some(s),
                    reason: format!("non-finite loss for sequence {s}"),
                });
            }
            loss += l;
        }
        Ok((loss, g))
    });
    let mut total = template;
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / count as f64;
    total.scale(inv);
    total.zero_frozen();
    Ok((loss * inv, total))
}

/// Loss of sequence `s` and its gradient contribution (unscaled by batch size).
fn sequence_backward(m: &LanguageModel, batch: &Batch, s: usize, g: &mut Gradients) -> f64 {
    let ids = &batch.inputs[s];
    let n = ids.len();
    let d = m.dims.dim;
    let cache = run_sequence(m, ids);

    let (loss, dhf) = match &batch.targets {
        Targets::Tokens(targets) => {
            let v = m.dims.vocab;
            let mut dl = lm_logits(m, &cache.hf, n);
            let mut loss = 0.0;
            for t in 0..n {
                let row = &mut dl[t * v..(t + 1) * v];
                let (l, probs) = cross_entropy(row, targets[s][t] as usize);
                loss += l;
                row.copy_from_slice(&probs);
                row[targets[s][t] as usize] -= 1.0;
                for x in row.iter_mut() {
                    *x /= n as f64;
                }
            }
            let mut dhf = vec![0.0; n * d];
            matmul_into(&dl, n, v, m.output().as_slice(), d, &mut dhf);
            if !g.output_frozen() {
                let tied = m.is_tied();
                let dst = if tied {
                    g.grads.embed.as_mut_slice()
                } else {
                    g.grads.output.as_mut().expect("untied").as_mut_slice()
                };
                matmul_at_acc(&dl, n, v, &cache.hf, d, dst);
            }
            (loss / n as f64, dhf)
        }
        Targets::Labels(labels) => {
            let (pool, logits) = task_logits(m, &cache.hf, n);
            let (loss, mut dl) = cross_entropy(&logits, labels[s] as usize);
            dl[labels[s] as usize] -= 1.0;
            let head = m.head.as_ref().expect("validated");
            let gh = g.grads.head.as_mut().expect("same structure");
            let mut dpool = vec![0.0; d];
            for (c, &dlc) in dl.iter().enumerate() {
                axpy(dlc, &pool, gh.weight.row_mut(c));
                gh.bias[c] += dlc;
                axpy(dlc, head.weight.row(c), &mut dpool);
            }
            let mut dhf = vec![0.0; n * d];
            for row in dhf.chunks_exact_mut(d) {
                for (x, p) in row.iter_mut().zip(&dpool) {
                    *x = p / n as f64;
                }
            }
            (loss, dhf)
        }
    };

    let mut dx = rms_norm_back(
        &cache.x_out,
        &cache.inv_f,
        &m.final_norm,
        &dhf,
        n,
        d,
        Some(&mut g.grads.final_norm),
    );
    for (bi, blk) in m.blocks.iter().enumerate().rev() {
        dx = block_backward(m, blk, &cache.blocks[bi], &mut g.grads.blocks[bi], dx, n);
    }
    if !g.embed_frozen() {
        for (t, &id) in ids.iter().enumerate() {
            axpy(
                1.0,
                &dx[t * d..(t + 1) * d],
                g.grads.embed.row_mut(id as usize),
            );
        }
    }
    loss
}

/// Backward through one block given `dx2`; returns `dx_in`.
fn block_backward(
    m: &LanguageModel,
    blk: &super::Block,
    c: &BlockCache,
    gb: &mut super::Block,
    dx2: Vec<f64>,
    n: usize,
) -> Vec<f64> {
    let d = m.dims.dim;
    let h = m.dims.hidden;
    let scale = 1.0 / (d as f64).sqrt();

    // Feed-forward branch: x2 = x1 + silu(b W1 + b1) W2 + b2.
    let df = &dx2;
    for row in df.chunks_exact(d) {
        axpy(1.0, row, &mut gb.b2);
    }
    matmul_at_acc(&c.u, n, h, df, d, gb.w2.as_mut_slice());
    let mut du = vec![0.0; n * h];
    matmul_bt_into(df, n, d, blk.w2.as_slice(), h, &mut du);
    let dz: Vec<f64> = du
        .iter()
        .zip(&c.z)
        .map(|(&g, &z)| {
            let s = sigmoid(z);
            g * s * (1.0 + z * (1.0 - s))
        })
        .collect();
    for row in dz.chunks_exact(h) {
        axpy(1.0, row, &mut gb.b1);
    }
    matmul_at_acc(&c.b, n, d, &dz, h, gb.w1.as_mut_slice());
    let mut db = vec![0.0; n * d];
    matmul_bt_into(&dz, n, h, blk.w1.as_slice(), d, &mut db);
    let dnorm2 = rms_norm_back(
        &c.x1,
        &c.inv2,
        &blk.ffn_norm,
        &db,
        n,
        d,
        Some(&mut gb.ffn_norm),
    );
    let dx1: Vec<f64> = dx2.iter().zip(&dnorm2).map(|(a, b)| a + b).collect();

    // Attention branch: x1 = x + softmax(q kᵀ / √d) v Wo.
    let do_ = &dx1;
    matmul_at_acc(&c.c, n, d, do_, d, gb.wo.as_mut_slice());
    let mut dc = vec![0.0; n * d];
    matmul_bt_into(do_, n, d, blk.wo.as_slice(), d, &mut dc);
    let mut dp = vec![0.0; n * n];
    matmul_bt_into(&dc, n, d, &c.v, n, &mut dp);
    let mut dv = vec![0.0; n * d];
    matmul_at_acc(&c.p, n, n, &dc, d, &mut dv);
    let mut ds = dp;
    for t in 0..n {
        let prow = &c.p[t * n..(t + 1) * n];
        let drow = &mut ds[t * n..(t + 1) * n];
        let inner: f64 = prow.iter().zip(drow.iter()).map(|(p, g)| p * g).sum();
        for (g, p) in drow.iter_mut().zip(prow) {
            *g = p * (*g - inner) * scale;
        }
    }
    let mut dq = vec![0.0; n * d];
    matmul_into(&ds, n, n, &c.k, d, &mut dq);
    let mut dk = vec![0.0; n * d];
    matmul_at_acc(&ds, n, n, &c.q, d, &mut dk);

    matmul_at_acc(&c.a, n, d, &dq, d, gb.wq.as_mut_slice());
    matmul_at_acc(&c.a, n, d, &dk, d, gb.wk.as_mut_slice());
    matmul_at_acc(&c.a, n, d, &dv, d, gb.wv.as_mut_slice());
    let mut da = vec![0.0; n * d];
    let mut tmp = vec![0.0; n * d];
    for (dy, w) in [(&dq, &blk.wq), (&dk, &blk.wk), (&dv, &blk.wv)] {
        matmul_bt_into(dy, n, d, w.as_slice(), d, &mut tmp);
        axpy(1.0, &tmp, &mut da);
    }
    let dnorm1 = rms_norm_back(
        &c.x_in,
        &c.inv1,
        &blk.attn_norm,
        &da,
        n,
        d,
        Some(&mut gb.attn_norm),
    );
    dx1.iter().zip(&dnorm1).map(|(a, b)| a + b).collect()
}
