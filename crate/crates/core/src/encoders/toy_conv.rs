//! Three strided conv blocks, adaptive average pooling onto a coarse grid, and
//! a linear head.
//!
//! | layer | shape                                   |
//! |-------|-----------------------------------------|
//! | conv1 | `in_c → 16`, 3×3, stride 2, pad 1, ReLU |
//! | conv2 | `16 → 32`, 3×3, stride 2, pad 1, ReLU   |
//! | conv3 | `32 → 64`, 3×3, stride 2, pad 1, ReLU   |
//! | pool  | adaptive average onto `gh × gw`         |
//! | head  | `64·gh·gw → embed_dim`                  |
//!
//! The pooling grid keeps coarse layout (which part of the view a feature
//! came from), so nothing about the network is invariant to panorama shifts
//! unless training makes it so. Any input size is accepted.

use super::layers::{self, ConvGeometry};
use super::ParamTensor;

pub const CONV_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ToyConv {
    convs: [ConvGeometry; 3],
    grid: (usize, usize),
    embed_dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvTape {
    // (input h, input w, columns, activated output) per conv layer
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
    final_hw: (usize, usize),
    pooled: Vec<f64>,
}

impl ToyConv {
    pub fn new(in_c: usize, grid: (usize, usize), embed_dim: usize) -> Self {
        let geom = |in_c, out_c| ConvGeometry { in_c, out_c, kernel: 3, stride: 2, pad: 1 };
        Self {
            convs: [
                geom(in_c, CONV_CHANNELS[0]),
                geom(CONV_CHANNELS[0], CONV_CHANNELS[1]),
                geom(CONV_CHANNELS[1], CONV_CHANNELS[2]),
            ],
            grid,
            embed_dim,
        }
    }

    fn head_in(&self) -> usize {
        CONV_CHANNELS[2] * self.grid.0 * self.grid.1
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_c
    }

    /// `(name, shape, fan_in)` in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (i, g) in self.convs.iter().enumerate() {
            let fan_in = g.in_c * g.kernel * g.kernel;
            out.push((format!("conv{}.weight", i + 1), vec![g.out_c, g.in_c, g.kernel, g.kernel], fan_in));
            out.push((format!("conv{}.bias", i + 1), vec![g.out_c], fan_in));
        }
        out.push(("head.weight".into(), vec![self.embed_dim, self.head_in()], self.head_in()));
        out.push(("head.bias".into(), vec![self.embed_dim], self.head_in()));
        out
    }

    /// Unnormalized head output for a planar `in_c×h×w` input.
    pub fn forward(&self, params: &[ParamTensor], input: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvTape) {
        let mut layers_tape = Vec::with_capacity(3);
        let mut x = input.to_vec();
        let (mut ch, mut cw) = (h, w);
        for (i, g) in self.convs.iter().enumerate() {
            let (mut out, cols) = g.forward(&params[2 * i].data, &params[2 * i + 1].data, &x, ch, cw);
            layers::relu_inplace(&mut out);
            layers_tape.push((ch, cw, cols, out.clone()));
            let (oh, ow) = g.output_size(ch, cw);
            x = out;
            ch = oh;
            cw = ow;
        }
        let pooled = layers::adaptive_avg_pool(&x, CONV_CHANNELS[2], ch, cw, self.grid.0, self.grid.1);
        let y = layers::linear(&params[6].data, &params[7].data, &pooled);
        (y, ConvTape { layers: layers_tape, final_hw: (ch, cw), pooled })
    }

    pub fn backward(&self, params: &[ParamTensor], tape: &ConvTape, d_y: &[f64], grads: &mut [Vec<f64>]) {
        let (gw_head, rest) = grads.split_at_mut(7);
        let d_pooled = layers::linear_backward(&params[6].data, &tape.pooled, d_y, &mut gw_head[6], &mut rest[0]);
        let (fh, fw) = tape.final_hw;
        let mut d_x = layers::adaptive_avg_pool_backward(&d_pooled, CONV_CHANNELS[2], fh, fw, self.grid.0, self.grid.1);
        for i in (0..3).rev() {
            let (h, w, cols, out) = &tape.layers[i];
            layers::relu_backward_inplace(&mut d_x, out);
            let (dw, db) = grads[2 * i..2 * i + 2].split_at_mut(1);
            match self.convs[i].backward(&params[2 * i].data, cols, &d_x, *h, *w, &mut dw[0], &mut db[0], i > 0) {
                Some(d_in) => d_x = d_in,
                None => break,
            }
        }
    }
}
