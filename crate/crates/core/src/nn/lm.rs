//! Decoder-only transformer with explicit forward and backward passes.
//!
//! Block: `x += o(attn(norm₁ x))`, then `x += down(silu(gate(h)) ⊙ up(h))` with
//! `h = norm₂ x`. Weights act as `y = x Wᵀ`, activations are row-per-position.

use std::collections::BTreeMap;

use super::arch::{projection_name, LmArch, Projection};
use super::checkpoint::ModelCheckpoint;
use super::ops::{rmsnorm, rmsnorm_backward, silu, silu_grad, softmax_in_place};
use super::NnError;
use crate::linalg::Matrix;

struct LayerIdx {
    attn_norm: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    mlp_norm: usize,
    gate: usize,
    up: usize,
    down: usize,
}

struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    lm_head: usize,
}

impl Layout {
    fn new(model: &ModelCheckpoint, arch: &LmArch) -> Result<Self, NnError> {
        let idx = |n: &str| model.index_of(n).ok_or_else(|| NnError::MissingTensor(n.to_string()));
        let layers = (0..arch.n_layers)
            .map(|l| {
                Ok(LayerIdx {
                    attn_norm: idx(&format!("layer{l}.attn_norm"))?,
                    q: idx(&format!("layer{l}.q"))?,
                    k: idx(&format!("layer{l}.k"))?,
                    v: idx(&format!("layer{l}.v"))?,
                    o: idx(&format!("layer{l}.o"))?,
                    mlp_norm: idx(&format!("layer{l}.mlp_norm"))?,
                    gate: idx(&projection_name(l, Projection::Gate))?,
                    up: idx(&projection_name(l, Projection::Up))?,
                    down: idx(&projection_name(l, Projection::Down))?,
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self {
            tok_emb: idx("tok_emb")?,
            pos_emb: idx("pos_emb")?,
            layers,
            final_norm: idx("final_norm")?,
            lm_head: idx("lm_head")?,
        })
    }
}

pub(crate) struct LayerCache {
    x_in: Matrix,
    inv1: Vec<f64>,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities, index `b * n_heads + head`, each `L × L`.
    probs: Vec<Matrix>,
    attn: Matrix,
    x_mid: Matrix,
    inv2: Vec<f64>,
    pub(crate) h2: Matrix,
    gate_pre: Matrix,
    up_out: Matrix,
    pub(crate) z: Matrix,
}

pub(crate) struct LmCache {
    pub(crate) batch: usize,
    pub(crate) seq_len: usize,
    tokens: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
    x_final: Matrix,
    inv_final: Vec<f64>,
    h_final: Matrix,
}

impl LmCache {
    /// Input rows seen by a projection (all positions).
    pub(crate) fn projection_input(&self, layer: usize, proj: Projection) -> &Matrix {
        let l = &self.layers[layer];
        match proj {
            Projection::Gate | Projection::Up => &l.h2,
            Projection::Down => &l.z,
        }
    }

    /// Residual stream entering block `layer` (or the final norm when `layer == n_layers`).
    pub(crate) fn residual(&self, layer: usize) -> &Matrix {
        self.layers.get(layer).map_or(&self.x_final, |l| &l.x_in)
    }
}

fn check_tokens(arch: &LmArch, seqs: &[Vec<u32>]) -> Result<(usize, usize), NnError> {
    let batch = seqs.len();
    if batch == 0 {
        return Err(NnError::Shape("empty token batch".into()));
    }
    let seq_len = seqs[0].len();
    if seq_len == 0 || seqs.iter().any(|s| s.len() != seq_len) {
        return Err(NnError::Shape("token batch must hold equal, non-zero length sequences".into()));
    }
    if seq_len > arch.context {
        return Err(NnError::ContextOverflow { needed: seq_len, context: arch.context });
    }
    if let Some(&t) = seqs.iter().flatten().find(|&&t| t as usize >= arch.vocab) {
        return Err(NnError::Shape(format!("token id {t} outside vocabulary of {}", arch.vocab)));
    }
    Ok((batch, seq_len))
}

fn finite(m: &Matrix, what: impl FnOnce() -> String) -> Result<(), NnError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(what()))
    }
}

/// Copies the `L × dh` block of one (sequence, head).
fn head_block(m: &Matrix, b: usize, h: usize, seq_len: usize, dh: usize) -> Matrix {
    Matrix::from_fn(seq_len, dh, |t, c| m[(b * seq_len + t, h * dh + c)])
}

fn add_head_block(m: &mut Matrix, block: &Matrix, b: usize, h: usize, seq_len: usize, dh: usize) {
    for t in 0..seq_len {
        let row = m.row_mut(b * seq_len + t);
        for c in 0..dh {
            row[h * dh + c] += block[(t, c)];
        }
    }
}

pub(crate) fn forward(model: &ModelCheckpoint, arch: &LmArch, seqs: &[Vec<u32>]) -> Result<(Matrix, LmCache), NnError> {
    let (batch, seq_len) = check_tokens(arch, seqs)?;
    let lay = Layout::new(model, arch)?;
    let p = |i: usize| &model.tensors[i].value;
    let (d, nh) = (arch.d_model, arch.n_heads);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = batch * seq_len;

    let tokens: Vec<usize> = seqs.iter().flatten().map(|&t| t as usize).collect();
    let mut x = Matrix::zeros(n, d);
    for (r, &tok) in tokens.iter().enumerate() {
        let pos = r % seq_len;
        let (te, pe) = (p(lay.tok_emb).row(tok), p(lay.pos_emb).row(pos));
        for ((o, a), b) in x.row_mut(r).iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(arch.n_layers);
    for (li, l) in lay.layers.iter().enumerate() {
        let (h1, inv1) = rmsnorm(&x, p(l.attn_norm));
        let q = h1.matmul_t(p(l.q))?;
        let k = h1.matmul_t(p(l.k))?;
        let v = h1.matmul_t(p(l.v))?;
        let mut attn = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(batch * nh);
        for b in 0..batch {
            for h in 0..nh {
                let qb = head_block(&q, b, h, seq_len, dh);
                let kb = head_block(&k, b, h, seq_len, dh);
                let vb = head_block(&v, b, h, seq_len, dh);
                let mut s = qb.matmul_t(&kb)?;
                for t in 0..seq_len {
                    let row = s.row_mut(t);
                    row.iter_mut().for_each(|v| *v *= scale);
                    row[t + 1..].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                    softmax_in_place(row);
                }
                let ob = s.matmul(&vb)?;
                add_head_block(&mut attn, &ob, b, h, seq_len, dh);
                probs.push(s);
            }
        }
        let attn_out = attn.matmul_t(p(l.o))?;
        let x_mid = x.add(&attn_out)?;
        let (h2, inv2) = rmsnorm(&x_mid, p(l.mlp_norm));
        let gate_pre = h2.matmul_t(p(l.gate))?;
        let up_out = h2.matmul_t(p(l.up))?;
        let z = Matrix::from_vec(
            n,
            arch.d_mlp,
            gate_pre.as_slice().iter().zip(up_out.as_slice()).map(|(&g, &u)| silu(g) * u).collect(),
        )?;
        let mlp_out = z.matmul_t(p(l.down))?;
        let x_out = x_mid.add(&mlp_out)?;
        finite(&x_out, || format!("layer{li} output"))?;
        layers.push(LayerCache { x_in: x, inv1, h1, q, k, v, probs, attn, x_mid, inv2, h2, gate_pre, up_out, z });
        x = x_out;
    }

    let (h_final, inv_final) = rmsnorm(&x, p(lay.final_norm));
    let logits = h_final.matmul_t(p(lay.lm_head))?;
    finite(&logits, || "logits".to_string())?;
    Ok((logits, LmCache { batch, seq_len, tokens, layers, x_final: x, inv_final, h_final }))
}

/// Gradients w.r.t. all parameters given `dlogits`, plus the output-side
/// gradients of every MLP projection (all positions).
pub(crate) fn backward(
    model: &ModelCheckpoint,
    arch: &LmArch,
    cache: &LmCache,
    dlogits: &Matrix,
) -> Result<(Vec<Matrix>, BTreeMap<String, Matrix>), NnError> {
    let lay = Layout::new(model, arch)?;
    let p = |i: usize| &model.tensors[i].value;
    let mut grads: Vec<Matrix> = model.tensors.iter().map(|t| Matrix::zeros(t.value.rows(), t.value.cols())).collect();
    let mut out_grads = BTreeMap::new();
    let (d, nh) = (arch.d_model, arch.n_heads);
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let (batch, seq_len) = (cache.batch, cache.seq_len);

    grads[lay.lm_head] = dlogits.t_matmul(&cache.h_final)?;
    let dh_final = dlogits.matmul(p(lay.lm_head))?;
    let mut dx = rmsnorm_backward(&cache.x_final, &cache.inv_final, p(lay.final_norm), &dh_final, &mut grads[lay.final_norm]);

    for (li, (l, c)) in lay.layers.iter().zip(&cache.layers).enumerate().rev() {
        // MLP
        grads[l.down] = dx.t_matmul(&c.z)?;
        out_grads.insert(projection_name(li, Projection::Down), dx.clone());
        let dz = dx.matmul(p(l.down))?;
        let mut d_gate = Matrix::zeros(dz.rows(), dz.cols());
        let mut d_up = Matrix::zeros(dz.rows(), dz.cols());
        for (((dg, du), &dzv), (&g, &u)) in d_gate
            .as_mut_slice()
            .iter_mut()
            .zip(d_up.as_mut_slice().iter_mut())
            .zip(dz.as_slice())
            .zip(c.gate_pre.as_slice().iter().zip(c.up_out.as_slice()))
        {
            *du = dzv * silu(g);
            *dg = dzv * u * silu_grad(g);
        }
        grads[l.gate] = d_gate.t_matmul(&c.h2)?;
        grads[l.up] = d_up.t_matmul(&c.h2)?;
        let mut dh2 = d_gate.matmul(p(l.gate))?;
        dh2.axpy(1.0, &d_up.matmul(p(l.up))?)?;
        out_grads.insert(projection_name(li, Projection::Gate), d_gate);
        out_grads.insert(projection_name(li, Projection::Up), d_up);
        let dx_norm2 = rmsnorm_backward(&c.x_mid, &c.inv2, p(l.mlp_norm), &dh2, &mut grads[l.mlp_norm]);
        let dx_mid = dx.add(&dx_norm2)?;

        // attention
        grads[l.o] = dx_mid.t_matmul(&c.attn)?;
        let d_attn = dx_mid.matmul(p(l.o))?;
        let mut dq = Matrix::zeros(dx_mid.rows(), d);
        let mut dk = Matrix::zeros(dx_mid.rows(), d);
        let mut dv = Matrix::zeros(dx_mid.rows(), d);
        for b in 0..batch {
            for h in 0..nh {
                let probs = &c.probs[b * nh + h];
                let d_out = head_block(&d_attn, b, h, seq_len, dh);
                let vb = head_block(&c.v, b, h, seq_len, dh);
                let qb = head_block(&c.q, b, h, seq_len, dh);
                let kb = head_block(&c.k, b, h, seq_len, dh);
                let dp = d_out.matmul_t(&vb)?;
                let dvb = probs.t_matmul(&d_out)?;
                let mut ds = Matrix::zeros(seq_len, seq_len);
                for t in 0..seq_len {
                    let pr = probs.row(t);
                    let dpr = dp.row(t);
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (s, (pv, dpv)) in ds.row_mut(t).iter_mut().zip(pr.iter().zip(dpr)) {
                        *s = pv * (dpv - dot) * scale;
                    }
                }
                add_head_block(&mut dq, &ds.matmul(&kb)?, b, h, seq_len, dh);
                add_head_block(&mut dk, &ds.t_matmul(&qb)?, b, h, seq_len, dh);
                add_head_block(&mut dv, &dvb, b, h, seq_len, dh);
            }
        }
        grads[l.q] = dq.t_matmul(&c.h1)?;
        grads[l.k] = dk.t_matmul(&c.h1)?;
        grads[l.v] = dv.t_matmul(&c.h1)?;
        let mut dh1 = dq.matmul(p(l.q))?;
        dh1.axpy(1.0, &dk.matmul(p(l.k))?)?;
        dh1.axpy(1.0, &dv.matmul(p(l.v))?)?;
        let dx_norm1 = rmsnorm_backward(&c.x_in, &c.inv1, p(l.attn_norm), &dh1, &mut grads[l.attn_norm]);
        dx = dx_mid.add(&dx_norm1)?;
    }

    for (r, &tok) in cache.tokens.iter().enumerate() {
        let pos = r % seq_len;
        let row = dx.row(r);
        for (g, v) in grads[lay.tok_emb].row_mut(tok).iter_mut().zip(row) {
            *g += v;
        }
        for (g, v) in grads[lay.pos_emb].row_mut(pos).iter_mut().zip(row) {
            *g += v;
        }
    }
    for (g, t) in grads.iter().zip(&model.tensors) {
        finite(g, || format!("gradient of {}", t.name))?;
    }
    Ok((grads, out_grads))
}
