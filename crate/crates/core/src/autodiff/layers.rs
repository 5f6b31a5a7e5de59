//! Pooling, batch normalization, channel softmax, and the weighted
//! voxel-wise cross-entropy loss.

use crate::{Error, Result};

use super::graph::{accum_with, put_grad, take_grad, BackFn, Graph, Var};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Numerical floor for log-probabilities in the cross-entropy loss.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// Per-channel running statistics of a batch-norm layer. Updated in
/// training mode, consumed in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl Graph {
    /// 2x2x2 max pooling with stride 2. Odd extents are handled as if the
    /// input were padded with -inf (windows clamp at the edge). The
    /// gradient routes to the window argmax, first index winning ties.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let (od, oh, ow) = ((d + 1) / 2, (h + 1) / 2, (w + 1) / 2);
        let mut out = vec![0.0f32; n * c * od * oh * ow];
        let mut argmax = vec![0u32; out.len()];

        let data = self.value(x).data();
        let mut oi = 0usize;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * d * h * w;
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dz in 0..2 {
                                let iz = 2 * z + dz;
                                if iz >= d {
                                    continue;
                                }
                                for dy in 0..2 {
                                    let iy = 2 * y + dy;
                                    if iy >= h {
                                        continue;
                                    }
                                    for dx in 0..2 {
                                        let ix = 2 * xx + dx;
                                        if ix >= w {
                                            continue;
                                        }
                                        let idx = base + (iz * h + iy) * w + ix;
                                        if data[idx] > best {
                                            best = data[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, od, oh, ow], out)?;

        let back = self.wants_grad(&[x]).then(|| {
            let out_id = self.node_count();
            let in_shape = self.value(x).shape().to_vec();
            Box::new(move |_values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out_id);
                accum_with(&mut grads[x.0], &in_shape, |d| {
                    for (gi, &src) in g.data().iter().zip(&argmax) {
                        d[src as usize] += gi;
                    }
                });
                put_grad(grads, out_id, g);
            }) as BackFn
        });
        self.push_op("maxpool3d", value, &[x], back)
    }

    /// Batch normalization over (batch, depth, height, width) per channel.
    ///
    /// Training mode normalizes by batch statistics (population variance)
    /// and updates `stats` with momentum [`BN_MOMENTUM`]; inference mode
    /// normalizes by `stats`.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm parameters must have shape [{c}]"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch(format!("running stats must have {c} channels")));
        }
        let m = n * d * h * w;
        if mode == BnMode::Train && m == 1 {
            return Err(Error::InvalidConfig(
                "batch statistics over a single voxel are undefined".into(),
            ));
        }

        let spatial = d * h * w;
        let data = self.value(x).data();

        // Per-channel mean and inverse stddev used for normalization.
        let (mean, ivar): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for &v in &data[base..base + spatial] {
                            sum += v as f64;
                        }
                    }
                    mean[ch] = sum / m as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for &v in &data[base..base + spatial] {
                            let dv = v as f64 - mean[ch];
                            sq += dv * dv;
                        }
                    }
                    var[ch] = sq / m as f64;
                }
                for ch in 0..c {
                    stats.mean[ch] =
                        ((1.0 - BN_MOMENTUM) * stats.mean[ch] as f64 + BN_MOMENTUM * mean[ch]) as f32;
                    stats.var[ch] =
                        ((1.0 - BN_MOMENTUM) * stats.var[ch] as f64 + BN_MOMENTUM * var[ch]) as f32;
                }
                let ivar = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, ivar)
            }
            BnMode::Eval => {
                let mean = stats.mean.iter().map(|&v| v as f64).collect();
                let ivar =
                    stats.var.iter().map(|&v| 1.0 / (v as f64 + BN_EPS).sqrt()).collect();
                (mean, ivar)
            }
        };

        let gvals = self.value(gamma).data();
        let bvals = self.value(beta).data();
        let mut out = vec![0.0f32; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let (mu, iv) = (mean[ch], ivar[ch]);
                let (ga, be) = (gvals[ch] as f64, bvals[ch] as f64);
                for i in base..base + spatial {
                    let xhat = (data[i] as f64 - mu) * iv;
                    out[i] = (ga * xhat + be) as f32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, d, h, w], out)?;

        let back = self.wants_grad(&[x, gamma, beta]).then(|| {
            let out_id = self.node_count();
            let in_shape = self.value(x).shape().to_vec();
            let (rx, rg, rb) =
                (self.requires_grad(x), self.requires_grad(gamma), self.requires_grad(beta));
            let train = mode == BnMode::Train;
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out_id);
                let data = values[x.0].data();
                let gvals = values[gamma.0].data();

                // Per-channel reductions in f64.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        let (mu, iv) = (mean[ch], ivar[ch]);
                        for i in base..base + spatial {
                            let gi = g.data()[i] as f64;
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * (data[i] as f64 - mu) * iv;
                        }
                    }
                }
                if rg {
                    accum_with(&mut grads[gamma.0], &[c], |d| {
                        for ch in 0..c {
                            d[ch] += sum_gx[ch] as f32;
                        }
                    });
                }
                if rb {
                    accum_with(&mut grads[beta.0], &[c], |d| {
                        for ch in 0..c {
                            d[ch] += sum_g[ch] as f32;
                        }
                    });
                }
                if rx {
                    accum_with(&mut grads[x.0], &in_shape, |dx| {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * spatial;
                                let (mu, iv) = (mean[ch], ivar[ch]);
                                let ga = gvals[ch] as f64;
                                if train {
                                    let mf = m as f64;
                                    for i in base..base + spatial {
                                        let gi = g.data()[i] as f64;
                                        let xhat = (data[i] as f64 - mu) * iv;
                                        let dxi = ga * iv / mf
                                            * (mf * gi - sum_g[ch] - xhat * sum_gx[ch]);
                                        dx[i] += dxi as f32;
                                    }
                                } else {
                                    for i in base..base + spatial {
                                        dx[i] += (g.data()[i] as f64 * ga * iv) as f32;
                                    }
                                }
                            }
                        }
                    });
                }
                put_grad(grads, out_id, g);
            }) as BackFn
        });
        self.push_op("batchnorm3d", value, &[x, gamma, beta], back)
    }

    /// Per-voxel softmax across the channel axis, computed with
    /// max-subtraction for stability.
    pub fn softmax_channel(&mut self, logits: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(logits).dims5()?;
        let spatial = d * h * w;
        let data = self.value(logits).data();
        let mut out = vec![0.0f32; data.len()];
        for b in 0..n {
            let base = b * c * spatial;
            for s in 0..spatial {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(data[base + ch * spatial + s] as f64);
                }
                let mut denom = 0.0f64;
                for ch in 0..c {
                    denom += ((data[base + ch * spatial + s] as f64) - mx).exp();
                }
                for ch in 0..c {
                    out[base + ch * spatial + s] =
                        (((data[base + ch * spatial + s] as f64) - mx).exp() / denom) as f32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, d, h, w], out)?;

        let back = self.wants_grad(&[logits]).then(|| {
            let out_id = self.node_count();
            let shape = self.value(logits).shape().to_vec();
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out_id);
                let p = values[out_id].data();
                accum_with(&mut grads[logits.0], &shape, |d| {
                    for b in 0..n {
                        let base = b * c * spatial;
                        for s in 0..spatial {
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                let i = base + ch * spatial + s;
                                dot += p[i] as f64 * g.data()[i] as f64;
                            }
                            for ch in 0..c {
                                let i = base + ch * spatial + s;
                                d[i] += (p[i] as f64 * (g.data()[i] as f64 - dot)) as f32;
                            }
                        }
                    }
                });
                put_grad(grads, out_id, g);
            }) as BackFn
        });
        self.push_op("softmax_channel", value, &[logits], back)
    }

    /// Weighted voxel-wise cross-entropy over the masked voxels:
    ///
    /// `loss = -(1/sum w) * sum_{v in mask} w[t(v)] * log p_{t(v)}(v)`
    ///
    /// with `p = softmax` over channels and the log floored at
    /// [`LOG_PROB_FLOOR`] (a numerical guard; the gradient uses the smooth
    /// expression). Invariant under uniform scaling of `class_weights`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        class_weights: &[f32],
        mask: &[bool],
    ) -> Result<Var> {
        let [n, c, d, h, w] = self.value(logits).dims5()?;
        let spatial = d * h * w;
        let voxels = n * spatial;
        if targets.len() != voxels || mask.len() != voxels {
            return Err(Error::ShapeMismatch(format!(
                "targets/mask length must be {voxels}, got {}/{}",
                targets.len(),
                mask.len()
            )));
        }
        if class_weights.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "class_weights length {} != channel count {c}",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        if targets.iter().any(|&t| (t as usize) >= c) {
            return Err(Error::ShapeMismatch(format!("target label >= channel count {c}")));
        }

        let data = self.value(logits).data();
        let log_floor = LOG_PROB_FLOOR.ln();
        let mut acc = 0.0f64;
        let mut acc_w = 0.0f64;
        for b in 0..n {
            let base = b * c * spatial;
            for s in 0..spatial {
                let v = b * spatial + s;
                if !mask[v] {
                    continue;
                }
                let lse = logsumexp(data, base + s, c, spatial);
                let t = targets[v] as usize;
                let logp = ((data[base + t * spatial + s] as f64) - lse).max(log_floor);
                let wt = class_weights[t] as f64;
                acc += wt * logp;
                acc_w += wt;
            }
        }
        if acc_w == 0.0 {
            return Err(Error::EmptyLossMask);
        }
        let value = Tensor::scalar((-acc / acc_w) as f32);

        let back = self.wants_grad(&[logits]).then(|| {
            let out_id = self.node_count();
            let shape = self.value(logits).shape().to_vec();
            let targets = targets.to_vec();
            let mask = mask.to_vec();
            let weights: Vec<f64> = class_weights.iter().map(|&w| w as f64).collect();
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out_id);
                let gscale = g.data()[0] as f64;
                let data = values[logits.0].data();
                accum_with(&mut grads[logits.0], &shape, |dl| {
                    for b in 0..n {
                        let base = b * c * spatial;
                        for s in 0..spatial {
                            let v = b * spatial + s;
                            if !mask[v] {
                                continue;
                            }
                            let lse = logsumexp(data, base + s, c, spatial);
                            let t = targets[v] as usize;
                            let scale = gscale * weights[t] / acc_w;
                            for ch in 0..c {
                                let i = base + ch * spatial + s;
                                let p = ((data[i] as f64) - lse).exp();
                                let onehot = (ch == t) as u8 as f64;
                                dl[i] += (scale * (p - onehot)) as f32;
                            }
                        }
                    }
                });
                put_grad(grads, out_id, g);
            }) as BackFn
        });
        let v = self.push_op("weighted_cross_entropy", value, &[logits], back)?;
        self.set_scalar64(v, -acc / acc_w);
        Ok(v)
    }
}

#[inline]
fn logsumexp(data: &[f32], base: usize, c: usize, stride: usize) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for ch in 0..c {
        mx = mx.max(data[base + ch * stride] as f64);
    }
    let mut sum = 0.0f64;
    for ch in 0..c {
        sum += ((data[base + ch * stride] as f64) - mx).exp();
    }
    mx + sum.ln()
}
