//! Patch embedding with a learned positional grid, two residual single-head
//! self-attention blocks with ReLU MLPs, mean token pooling and a linear head.
//!
//! The positional grid is fixed at construction, so every input must have the
//! configured spatial size; limited-FoV views have to be zero-padded back to
//! full width before they reach this backbone.

use super::layers::{self, gemm};
use super::ParamTensor;

pub const PATCH: usize = 8;
pub const MODEL_DIM: usize = 32;
pub const MLP_DIM: usize = 64;
pub const BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ToyAttention {
    in_c: usize,
    height: usize,
    width: usize,
    embed_dim: usize,
}

#[derive(Debug, Clone)]
struct BlockTape {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    x1: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionTape {
    patches: Vec<f64>,
    blocks: Vec<BlockTape>,
    pooled: Vec<f64>,
}

// parameter slots
const P_EMBED_W: usize = 0;
const P_EMBED_B: usize = 1;
const P_POS: usize = 2;
const PER_BLOCK: usize = 8;
const fn block_slot(b: usize, i: usize) -> usize {
    3 + b * PER_BLOCK + i
}
const P_HEAD_W: usize = 3 + BLOCKS * PER_BLOCK;
const P_HEAD_B: usize = P_HEAD_W + 1;

impl ToyAttention {
    pub fn new(in_c: usize, height: usize, width: usize, embed_dim: usize) -> Self {
        Self { in_c, height, width, embed_dim }
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn tokens(&self) -> usize {
        (self.height / PATCH) * (self.width / PATCH)
    }

    fn patch_dim(&self) -> usize {
        self.in_c * PATCH * PATCH
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d = MODEL_DIM;
        let mut out = vec![
            ("patch.weight".to_string(), vec![self.patch_dim(), d], self.patch_dim()),
            ("patch.bias".to_string(), vec![d], self.patch_dim()),
            ("pos".to_string(), vec![self.tokens(), d], 0),
        ];
        for b in 0..BLOCKS {
            for name in ["wq", "wk", "wv", "wo"] {
                out.push((format!("block{b}.{name}"), vec![d, d], d));
            }
            out.push((format!("block{b}.mlp1.weight"), vec![d, MLP_DIM], d));
            out.push((format!("block{b}.mlp1.bias"), vec![MLP_DIM], d));
            out.push((format!("block{b}.mlp2.weight"), vec![MLP_DIM, d], MLP_DIM));
            out.push((format!("block{b}.mlp2.bias"), vec![d], MLP_DIM));
        }
        out.push(("head.weight".to_string(), vec![self.embed_dim, d], d));
        out.push(("head.bias".to_string(), vec![self.embed_dim], d));
        out
    }

    fn patchify(&self, input: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let tw = w / PATCH;
        let pd = self.patch_dim();
        let mut out = vec![0.0; self.tokens() * pd];
        for t in 0..self.tokens() {
            let (ty, tx) = (t / tw, t % tw);
            for c in 0..self.in_c {
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        let y = ty * PATCH + py;
                        let x = tx * PATCH + px;
                        out[t * pd + (c * PATCH + py) * PATCH + px] = input[(c * h + y) * w + x];
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[ParamTensor], input: &[f64]) -> (Vec<f64>, AttentionTape) {
        let t = self.tokens();
        let d = MODEL_DIM;
        let patches = self.patchify(input);
        let mut x = params[P_POS].data.clone();
        for row in x.chunks_exact_mut(d) {
            row.iter_mut().zip(&params[P_EMBED_B].data).for_each(|(v, b)| *v += b);
        }
        gemm(t, self.patch_dim(), d, &patches, false, &params[P_EMBED_W].data, false, 1.0, &mut x);

        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(BLOCKS);
        for b in 0..BLOCKS {
            let p = |i: usize| &params[block_slot(b, i)].data;
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            gemm(t, d, d, &x, false, p(0), false, 0.0, &mut q);
            gemm(t, d, d, &x, false, p(1), false, 0.0, &mut k);
            gemm(t, d, d, &x, false, p(2), false, 0.0, &mut v);
            let mut attn = vec![0.0; t * t];
            gemm(t, d, t, &q, false, &k, true, 0.0, &mut attn);
            attn.iter_mut().for_each(|s| *s *= scale);
            layers::softmax_rows_inplace(&mut attn, t);
            let mut o = vec![0.0; t * d];
            gemm(t, t, d, &attn, false, &v, false, 0.0, &mut o);
            let mut x1 = x.clone();
            gemm(t, d, d, &o, false, p(3), false, 1.0, &mut x1);

            let mut hidden = vec![0.0; t * MLP_DIM];
            for row in hidden.chunks_exact_mut(MLP_DIM) {
                row.copy_from_slice(p(5));
            }
            gemm(t, d, MLP_DIM, &x1, false, p(4), false, 1.0, &mut hidden);
            layers::relu_inplace(&mut hidden);
            let mut x2 = x1.clone();
            for row in x2.chunks_exact_mut(d) {
                row.iter_mut().zip(p(7)).for_each(|(v, b)| *v += b);
            }
            gemm(t, MLP_DIM, d, &hidden, false, p(6), false, 1.0, &mut x2);

            blocks.push(BlockTape { x, q, k, v, attn, o, x1, hidden });
            x = x2;
        }

        let mut pooled = vec![0.0; d];
        for row in x.chunks_exact(d) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v / t as f64);
        }
        let y = layers::linear(&params[P_HEAD_W].data, &params[P_HEAD_B].data, &pooled);
        (y, AttentionTape { patches, blocks, pooled })
    }

    pub fn backward(&self, params: &[ParamTensor], tape: &AttentionTape, d_y: &[f64], grads: &mut [Vec<f64>]) {
        let t = self.tokens();
        let d = MODEL_DIM;
        let (lo, hi) = grads.split_at_mut(P_HEAD_B);
        let d_pooled = layers::linear_backward(&params[P_HEAD_W].data, &tape.pooled, d_y, &mut lo[P_HEAD_W], &mut hi[0]);
        let mut d_x: Vec<f64> = (0..t).flat_map(|_| d_pooled.iter().map(|g| g / t as f64)).collect();

        let scale = 1.0 / (d as f64).sqrt();
        for b in (0..BLOCKS).rev() {
            let bt = &tape.blocks[b];
            let p = |i: usize| &params[block_slot(b, i)].data;
            let g = |i: usize| block_slot(b, i);

            // MLP: x2 = x1 + relu(x1·W1 + b1)·W2 + b2
            gemm(MLP_DIM, t, d, &bt.hidden, true, &d_x, false, 1.0, &mut grads[g(6)]);
            for row in d_x.chunks_exact(d) {
                grads[g(7)].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            let mut d_hidden = vec![0.0; t * MLP_DIM];
            gemm(t, d, MLP_DIM, &d_x, false, p(6), true, 0.0, &mut d_hidden);
            layers::relu_backward_inplace(&mut d_hidden, &bt.hidden);
            gemm(d, t, MLP_DIM, &bt.x1, true, &d_hidden, false, 1.0, &mut grads[g(4)]);
            for row in d_hidden.chunks_exact(MLP_DIM) {
                grads[g(5)].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            let mut d_x1 = d_x;
            gemm(t, MLP_DIM, d, &d_hidden, false, p(4), true, 1.0, &mut d_x1);

            // attention: x1 = x + softmax(q·kᵀ·scale)·v·Wo
            gemm(d, t, d, &bt.o, true, &d_x1, false, 1.0, &mut grads[g(3)]);
            let mut d_o = vec![0.0; t * d];
            gemm(t, d, d, &d_x1, false, p(3), true, 0.0, &mut d_o);
            let mut d_attn = vec![0.0; t * t];
            gemm(t, d, t, &d_o, false, &bt.v, true, 0.0, &mut d_attn);
            let mut d_v = vec![0.0; t * d];
            gemm(t, t, d, &bt.attn, true, &d_o, false, 0.0, &mut d_v);
            let mut d_s = layers::softmax_rows_backward(&bt.attn, &d_attn, t);
            d_s.iter_mut().for_each(|v| *v *= scale);
            let mut d_q = vec![0.0; t * d];
            gemm(t, t, d, &d_s, false, &bt.k, false, 0.0, &mut d_q);
            let mut d_k = vec![0.0; t * d];
            gemm(t, t, d, &d_s, true, &bt.q, false, 0.0, &mut d_k);

            gemm(d, t, d, &bt.x, true, &d_q, false, 1.0, &mut grads[g(0)]);
            gemm(d, t, d, &bt.x, true, &d_k, false, 1.0, &mut grads[g(1)]);
            gemm(d, t, d, &bt.x, true, &d_v, false, 1.0, &mut grads[g(2)]);
            let mut d_prev = d_x1;
            gemm(t, d, d, &d_q, false, p(0), true, 1.0, &mut d_prev);
            gemm(t, d, d, &d_k, false, p(1), true, 1.0, &mut d_prev);
            gemm(t, d, d, &d_v, false, p(2), true, 1.0, &mut d_prev);
            d_x = d_prev;
        }

        gemm(self.patch_dim(), t, d, &tape.patches, true, &d_x, false, 1.0, &mut grads[P_EMBED_W]);
        for row in d_x.chunks_exact(d) {
            grads[P_EMBED_B].iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        grads[P_POS].iter_mut().zip(&d_x).for_each(|(a, v)| *a += v);
    }
}
