use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{
    avg_pool2, avg_pool2_backward, bce_with_logit, relu_backward, relu_in_place, sigmoid,
    upsample2, upsample2_backward, Conv2d,
};
use super::{check_param_count, init_uniform, seeded, Checkpoint, Tensor, TrainBatch};

/// Encoder widths and input channels. Inputs must have sides divisible by 8.
///
/// Layer order in the parameter vector: `e1 e2 e3` (encoder, 3x3 conv + ReLU +
/// 2x2 mean pool each), then `d3 d2 d1` (3x3 conv + ReLU on the upsampled map
/// concatenated with the matching encoder activation) and a 1x1 `head`
/// producing one logit plane. Each conv stores weights `[out][in][ky][kx]`
/// followed by `out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegArch {
    pub in_channels: usize,
    pub widths: [usize; 3],
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d3: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    head: Conv2d,
}

impl Layers {
    fn new(a: &SegArch) -> Self {
        let [w1, w2, w3] = a.widths;
        let e1 = Conv2d::new(a.in_channels, w1, 3, 0);
        let e2 = Conv2d::new(w1, w2, 3, e1.end());
        let e3 = Conv2d::new(w2, w3, 3, e2.end());
        let d3 = Conv2d::new(2 * w3, w2, 3, e3.end());
        let d2 = Conv2d::new(2 * w2, w1, 3, d3.end());
        let d1 = Conv2d::new(2 * w1, w1, 3, d2.end());
        let head = Conv2d::new(w1, 1, 1, d1.end());
        Self {
            e1,
            e2,
            e3,
            d3,
            d2,
            d1,
            head,
        }
    }

    fn all(&self) -> [Conv2d; 7] {
        [
            self.e1, self.e2, self.e3, self.d3, self.d2, self.d1, self.head,
        ]
    }
}

/// Shared encoder plus segmentation decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    arch: SegArch,
    params: Vec<f64>,
}

struct EncoderTrace {
    h: usize,
    w: usize,
    cols1: Vec<f64>,
    a1: Vec<f64>,
    cols2: Vec<f64>,
    a2: Vec<f64>,
    cols3: Vec<f64>,
    a3: Vec<f64>,
    p3: Vec<f64>,
}

struct DecoderTrace {
    cols_d3: Vec<f64>,
    o3: Vec<f64>,
    cols_d2: Vec<f64>,
    o2: Vec<f64>,
    cols_d1: Vec<f64>,
    o1: Vec<f64>,
    logits: Vec<f64>,
}

impl SegModel {
    pub fn new(arch: SegArch, seed: u64) -> Result<Self> {
        if arch.in_channels == 0 || arch.widths.contains(&0) {
            return Err(Error::domain("network widths must be positive"));
        }
        let layers = Layers::new(&arch);
        let mut params = vec![0.0; layers.head.end()];
        let mut rng = seeded(seed);
        for l in layers.all() {
            init_uniform(
                &mut params[l.offset..l.offset + l.num_weights()],
                l.fan_in(),
                &mut rng,
            );
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &SegArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Length of the encoder prefix of the parameter vector.
    pub fn encoder_len(&self) -> usize {
        Layers::new(&self.arch).e3.end()
    }

    /// Channels and downsampling factor of the encoder output.
    pub fn feature_channels(&self) -> usize {
        self.arch.widths[2]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.arch.in_channels {
            return Err(Error::domain(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels, x.c
            )));
        }
        if x.h % 8 != 0 || x.w % 8 != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::domain(format!(
                "input sides must be positive multiples of 8, got {}x{}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn encode_trace(&self, p: &[f64], l: &Layers, x: &Tensor) -> EncoderTrace {
        let (h, w) = (x.h, x.w);
        let [w1, w2, w3] = self.arch.widths;
        let (mut a1, cols1) = l.e1.forward(p, &x.data, h, w);
        relu_in_place(&mut a1);
        let p1 = avg_pool2(&a1, w1, h, w);
        let (mut a2, cols2) = l.e2.forward(p, &p1, h / 2, w / 2);
        relu_in_place(&mut a2);
        let p2 = avg_pool2(&a2, w2, h / 2, w / 2);
        let (mut a3, cols3) = l.e3.forward(p, &p2, h / 4, w / 4);
        relu_in_place(&mut a3);
        let p3 = avg_pool2(&a3, w3, h / 4, w / 4);
        EncoderTrace {
            h,
            w,
            cols1,
            a1,
            cols2,
            a2,
            cols3,
            a3,
            p3,
        }
    }

    fn decode_trace(&self, p: &[f64], l: &Layers, e: &EncoderTrace) -> DecoderTrace {
        let (h, w) = (e.h, e.w);
        let [w1, w2, w3] = self.arch.widths;
        let mut in3 = upsample2(&e.p3, w3, h / 8, w / 8);
        in3.extend_from_slice(&e.a3);
        let (mut o3, cols_d3) = l.d3.forward(p, &in3, h / 4, w / 4);
        relu_in_place(&mut o3);
        let mut in2 = upsample2(&o3, w2, h / 4, w / 4);
        in2.extend_from_slice(&e.a2);
        let (mut o2, cols_d2) = l.d2.forward(p, &in2, h / 2, w / 2);
        relu_in_place(&mut o2);
        let mut in1 = upsample2(&o2, w1, h / 2, w / 2);
        in1.extend_from_slice(&e.a1);
        let (mut o1, cols_d1) = l.d1.forward(p, &in1, h, w);
        relu_in_place(&mut o1);
        let (logits, _) = l.head.forward(p, &o1, h, w);
        DecoderTrace {
            cols_d3,
            o3,
            cols_d2,
            o2,
            cols_d1,
            o1,
            logits,
        }
    }

    /// Encoder output: `widths[2]` channels at 1/8 resolution.
    pub fn encode_one(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let l = Layers::new(&self.arch);
        let e = self.encode_trace(&self.params, &l, x);
        Ok(Tensor {
            c: self.arch.widths[2],
            h: x.h / 8,
            w: x.w / 8,
            data: e.p3,
        })
    }

    /// Per-pixel logits (one plane) together with the encoder features.
    pub fn forward(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let l = Layers::new(&self.arch);
        let e = self.encode_trace(&self.params, &l, x);
        let d = self.decode_trace(&self.params, &l, &e);
        let feat = Tensor {
            c: self.arch.widths[2],
            h: x.h / 8,
            w: x.w / 8,
            data: e.p3,
        };
        Ok((d.logits, feat))
    }

    /// Sigmoid probabilities per pixel.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0.into_iter().map(sigmoid).collect())
    }

    /// Summed BCE over the pixels of one image, its parameter gradient
    /// accumulated into `grads` with weight `scale`, and the encoder features.
    fn loss_and_grad_one(
        &self,
        p: &[f64],
        l: &Layers,
        x: &Tensor,
        mask: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> (f64, Tensor) {
        let e = self.encode_trace(p, l, x);
        let d = self.decode_trace(p, l, &e);
        let (h, w) = (e.h, e.w);
        let [w1, w2, w3] = self.arch.widths;
        let mut loss = 0.0;
        let mut g_logit = vec![0.0; h * w];
        for i in 0..h * w {
            loss += bce_with_logit(d.logits[i], mask[i]);
            g_logit[i] = scale * (sigmoid(d.logits[i]) - mask[i]);
        }

        let mut g_o1 = l.head.backward(p, &d.o1, &g_logit, h, w, grads);
        relu_backward(&d.o1, &mut g_o1);
        let g_in1 = l.d1.backward(p, &d.cols_d1, &g_o1, h, w, grads);
        let (g_up2, g_a1_skip) = g_in1.split_at(w1 * h * w);
        let mut g_o2 = upsample2_backward(g_up2, w1, h / 2, w / 2);
        relu_backward(&d.o2, &mut g_o2);
        let g_in2 = l.d2.backward(p, &d.cols_d2, &g_o2, h / 2, w / 2, grads);
        let (g_up3, g_a2_skip) = g_in2.split_at(w2 * (h / 2) * (w / 2));
        let mut g_o3 = upsample2_backward(g_up3, w2, h / 4, w / 4);
        relu_backward(&d.o3, &mut g_o3);
        let g_in3 = l.d3.backward(p, &d.cols_d3, &g_o3, h / 4, w / 4, grads);
        let (g_upp3, g_a3_skip) = g_in3.split_at(w3 * (h / 4) * (w / 4));
        let g_p3 = upsample2_backward(g_upp3, w3, h / 8, w / 8);

        let mut g_a3 = avg_pool2_backward(&g_p3, w3, h / 4, w / 4);
        add(&mut g_a3, g_a3_skip);
        relu_backward(&e.a3, &mut g_a3);
        let g_p2 = l.e3.backward(p, &e.cols3, &g_a3, h / 4, w / 4, grads);
        let mut g_a2 = avg_pool2_backward(&g_p2, w2, h / 2, w / 2);
        add(&mut g_a2, g_a2_skip);
        relu_backward(&e.a2, &mut g_a2);
        let g_p1 = l.e2.backward(p, &e.cols2, &g_a2, h / 2, w / 2, grads);
        let mut g_a1 = avg_pool2_backward(&g_p1, w1, h, w);
        add(&mut g_a1, g_a1_skip);
        relu_backward(&e.a1, &mut g_a1);
        l.e1.backward_params(&e.cols1, &g_a1, h, w, grads);

        let feat = Tensor {
            c: w3,
            h: h / 8,
            w: w / 8,
            data: e.p3,
        };
        (loss, feat)
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<()> {
        batch.images.iter().try_for_each(|x| self.check_input(x))
    }

    /// Mean pixel BCE over the batch evaluated at `params` (same layout as
    /// this model's), with its gradient and the encoder features.
    pub fn loss_and_grad_at(
        &self,
        params: &[f64],
        batch: &TrainBatch,
    ) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
        self.check_batch(batch)?;
        check_param_count(params.len(), self.params.len())?;
        let l = Layers::new(&self.arch);
        let total: usize = batch.images.iter().map(Tensor::hw).sum();
        let scale = 1.0 / total as f64;
        let mut grads = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut feats = Vec::with_capacity(batch.len());
        for (x, m) in batch.images.iter().zip(&batch.masks) {
            let (li, f) = self.loss_and_grad_one(params, &l, x, m, scale, &mut grads);
            loss += li;
            feats.push(f);
        }
        Ok((loss * scale, grads, feats))
    }

    pub fn loss_and_grad(&self, batch: &TrainBatch) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
        self.loss_and_grad_at(&self.params, batch)
    }

    pub fn checkpoint(&self) -> Checkpoint<SegArch> {
        Checkpoint::new("seg_model", self.arch, self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<SegArch>) -> Result<Self> {
        let model = Self::new(ck.architecture, 0)?;
        check_param_count(ck.params.len(), model.params.len())?;
        Ok(Self {
            arch: ck.architecture,
            params: ck.params,
        })
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Encoder features for each image.
pub fn encode(model: &SegModel, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images.iter().map(|x| model.encode_one(x)).collect()
}

/// Mean binary cross-entropy over all pixels of the batch.
pub fn seg_loss(model: &SegModel, batch: &TrainBatch) -> Result<f64> {
    let total: usize = batch.images.iter().map(Tensor::hw).sum();
    let mut loss = 0.0;
    for (x, m) in batch.images.iter().zip(&batch.masks) {
        let (logits, _) = model.forward(x)?;
        loss += logits
            .iter()
            .zip(m)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum::<f64>();
    }
    Ok(loss / total as f64)
}
