//! Residual MLP classifier, the vision-transformer MLP stack in miniature.

use std::collections::BTreeMap;

use super::arch::{projection_name, ClassifierArch, Projection};
use super::checkpoint::ModelCheckpoint;
use super::ops::{rmsnorm, rmsnorm_backward, silu, silu_grad};
use super::NnError;
use crate::linalg::Matrix;

struct BlockIdx {
    norm: usize,
    up: usize,
    down: usize,
}

struct Layout {
    embed: usize,
    blocks: Vec<BlockIdx>,
    final_norm: usize,
    head: usize,
}

impl Layout {
    fn new(model: &ModelCheckpoint, arch: &ClassifierArch) -> Result<Self, NnError> {
        let idx = |n: &str| model.index_of(n).ok_or_else(|| NnError::MissingTensor(n.to_string()));
        let blocks = (0..arch.n_blocks)
            .map(|l| {
                Ok(BlockIdx {
                    norm: idx(&format!("layer{l}.norm"))?,
                    up: idx(&projection_name(l, Projection::Up))?,
                    down: idx(&projection_name(l, Projection::Down))?,
                })
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self { embed: idx("embed")?, blocks, final_norm: idx("final_norm")?, head: idx("head")? })
    }
}

pub(crate) struct BlockCache {
    x_in: Matrix,
    inv: Vec<f64>,
    pub(crate) hn: Matrix,
    up_pre: Matrix,
    pub(crate) act: Matrix,
}

pub(crate) struct ClsCache {
    input: Matrix,
    pub(crate) blocks: Vec<BlockCache>,
    x_final: Matrix,
    inv_final: Vec<f64>,
    h_final: Matrix,
}

impl ClsCache {
    pub(crate) fn projection_input(&self, layer: usize, proj: Projection) -> Option<&Matrix> {
        let b = &self.blocks[layer];
        match proj {
            Projection::Up => Some(&b.hn),
            Projection::Down => Some(&b.act),
            Projection::Gate => None,
        }
    }
}

pub(crate) fn forward(model: &ModelCheckpoint, arch: &ClassifierArch, x: &Matrix) -> Result<(Matrix, ClsCache), NnError> {
    if x.cols() != arch.input_dim {
        return Err(NnError::Shape(format!("features have {} columns, model expects {}", x.cols(), arch.input_dim)));
    }
    if x.rows() == 0 {
        return Err(NnError::Shape("empty feature batch".into()));
    }
    let lay = Layout::new(model, arch)?;
    let p = |i: usize| &model.tensors[i].value;
    let mut h = x.matmul_t(p(lay.embed))?;
    let mut blocks = Vec::with_capacity(arch.n_blocks);
    for (li, b) in lay.blocks.iter().enumerate() {
        let (hn, inv) = rmsnorm(&h, p(b.norm));
        let up_pre = hn.matmul_t(p(b.up))?;
        let act = up_pre.map(silu);
        let out = h.add(&act.matmul_t(p(b.down))?)?;
        if !out.is_finite() {
            return Err(NnError::NonFinite(format!("layer{li} output")));
        }
        blocks.push(BlockCache { x_in: h, inv, hn, up_pre, act });
        h = out;
    }
    let (h_final, inv_final) = rmsnorm(&h, p(lay.final_norm));
    let logits = h_final.matmul_t(p(lay.head))?;
    if !logits.is_finite() {
        return Err(NnError::NonFinite("logits".into()));
    }
    Ok((logits, ClsCache { input: x.clone(), blocks, x_final: h, inv_final, h_final }))
}

pub(crate) fn backward(
    model: &ModelCheckpoint,
    arch: &ClassifierArch,
    cache: &ClsCache,
    dlogits: &Matrix,
) -> Result<(Vec<Matrix>, BTreeMap<String, Matrix>), NnError> {
    let lay = Layout::new(model, arch)?;
    let p = |i: usize| &model.tensors[i].value;
    let mut grads: Vec<Matrix> = model.tensors.iter().map(|t| Matrix::zeros(t.value.rows(), t.value.cols())).collect();
    let mut out_grads = BTreeMap::new();

    grads[lay.head] = dlogits.t_matmul(&cache.h_final)?;
    let dh_final = dlogits.matmul(p(lay.head))?;
    let mut dx = rmsnorm_backward(&cache.x_final, &cache.inv_final, p(lay.final_norm), &dh_final, &mut grads[lay.final_norm]);
    for (li, (b, c)) in lay.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        grads[b.down] = dx.t_matmul(&c.act)?;
        out_grads.insert(projection_name(li, Projection::Down), dx.clone());
        let d_act = dx.matmul(p(b.down))?;
        let d_up = Matrix::from_vec(
            d_act.rows(),
            d_act.cols(),
            d_act.as_slice().iter().zip(c.up_pre.as_slice()).map(|(&g, &u)| g * silu_grad(u)).collect(),
        )?;
        grads[b.up] = d_up.t_matmul(&c.hn)?;
        let dhn = d_up.matmul(p(b.up))?;
        out_grads.insert(projection_name(li, Projection::Up), d_up);
        let dx_norm = rmsnorm_backward(&c.x_in, &c.inv, p(b.norm), &dhn, &mut grads[b.norm]);
        dx = dx.add(&dx_norm)?;
    }
    grads[lay.embed] = dx.t_matmul(&cache.input)?;
    for (g, t) in grads.iter().zip(&model.tensors) {
        if !g.is_finite() {
            return Err(NnError::NonFinite(format!("gradient of {}", t.name)));
        }
    }
    Ok((grads, out_grads))
}
