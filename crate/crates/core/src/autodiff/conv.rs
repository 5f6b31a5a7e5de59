//! 3-d convolution and transposed convolution, forward and backward.
//!
//! Convolution follows the cross-correlation convention (no kernel flip).
//! The stride-1 path is the training hot spot: it runs on a zero-padded
//! per-sample buffer so the inner x-loops are branch-free and vectorize.
//! `mul_add` is used for its fixed rounding behaviour; results are
//! bit-identical across optimization levels.

use crate::{Error, Result};

use super::graph::{accum_with, put_grad, take_grad, BackFn, Graph, Var};
use super::tensor::Tensor;

/// Zero-pad one (C, D, H, W) sample to (C, D+2p, H+2p, W+2p).
fn pad_sample(src: &[f32], c: usize, d: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    let (dp, hp, wp) = (d + 2 * p, h + 2 * p, w + 2 * p);
    let mut dst = vec![0.0f32; c * dp * hp * wp];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ch * d + z) * h + y) * w;
                let t = ((ch * dp + z + p) * hp + y + p) * wp + p;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    dst
}

/// orow[x] += w0*irow[x] + w1*irow[x+1] + w2*irow[x+2]
#[inline]
fn axpy_row_k3(orow: &mut [f32], irow: &[f32], w: &[f32]) {
    let n = orow.len();
    let (i0, i1, i2) = (&irow[..n], &irow[1..n + 1], &irow[2..n + 2]);
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    for x in 0..n {
        orow[x] = w2.mul_add(i2[x], w1.mul_add(i1[x], w0.mul_add(i0[x], orow[x])));
    }
}

/// orow[x] += sum_kx wrow[kx] * irow[x + kx], any kernel width.
#[inline]
fn axpy_row(orow: &mut [f32], irow: &[f32], wrow: &[f32]) {
    if wrow.len() == 3 {
        return axpy_row_k3(orow, irow, wrow);
    }
    let n = orow.len();
    for (kx, &wv) in wrow.iter().enumerate() {
        let ir = &irow[kx..kx + n];
        for x in 0..n {
            orow[x] = wv.mul_add(ir[x], orow[x]);
        }
    }
}

/// Dot product with eight independent lanes combined in a fixed order.
#[inline]
fn dot_rows(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            let j = i * 8 + l;
            acc[l] = a[j].mul_add(b[j], acc[l]);
        }
    }
    let mut tail = 0.0f32;
    for j in chunks * 8..a.len() {
        tail = a[j].mul_add(b[j], tail);
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub d: [usize; 3],
    pub o: [usize; 3],
}

fn conv_dims(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let [n, cin, d, h, w] = input.dims5()?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::ShapeMismatch(format!("conv weight shape {ws:?} must be cubic 5-d")));
    }
    let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "input channels {cin} != weight input channels {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("zero stride".into()));
    }
    if pad >= k {
        return Err(Error::InvalidConfig(format!("padding {pad} must be < kernel {k}")));
    }
    Ok(ConvDims {
        n,
        cin,
        cout,
        k,
        d: [d, h, w],
        o: [out_extent(d, k, stride, pad)?, out_extent(h, k, stride, pad)?, out_extent(w, k, stride, pad)?],
    })
}

pub(crate) fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let cd = conv_dims(input, weight, stride, pad)?;
    if bias.shape() != [cd.cout] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} != [{}]",
            bias.shape(),
            cd.cout
        )));
    }
    let [d, h, w] = cd.d;
    let [od, oh, ow] = cd.o;
    let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    let k = cd.k;
    let mut out = vec![0.0f32; cd.n * cd.cout * od * oh * ow];

    for n in 0..cd.n {
        let ibuf = pad_sample(
            &input.data()[n * cd.cin * d * h * w..(n + 1) * cd.cin * d * h * w],
            cd.cin,
            d,
            h,
            w,
            pad,
        );
        for oc in 0..cd.cout {
            let obase = ((n * cd.cout) + oc) * od * oh * ow;
            out[obase..obase + od * oh * ow].fill(bias.data()[oc]);
            for ic in 0..cd.cin {
                let wbase = (oc * cd.cin + ic) * k * k * k;
                if stride == 1 {
                    for z in 0..od {
                        for y in 0..oh {
                            let orow = obase + (z * oh + y) * ow;
                            for kz in 0..k {
                                for ky in 0..k {
                                    let irow = ((ic * dp + z + kz) * hp + y + ky) * wp;
                                    let wrow = wbase + (kz * k + ky) * k;
                                    axpy_row(
                                        &mut out[orow..orow + ow],
                                        &ibuf[irow..irow + ow + k - 1],
                                        &weight.data()[wrow..wrow + k],
                                    );
                                }
                            }
                        }
                    }
                } else {
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut acc = out[obase + (z * oh + y) * ow + x];
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iv = ibuf[((ic * dp + z * stride + kz) * hp
                                                + y * stride
                                                + ky)
                                                * wp
                                                + x * stride
                                                + kx];
                                            let wv =
                                                weight.data()[wbase + (kz * k + ky) * k + kx];
                                            acc = wv.mul_add(iv, acc);
                                        }
                                    }
                                }
                                out[obase + (z * oh + y) * ow + x] = acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cd.n, cd.cout, od, oh, ow], out)
}

fn conv3d_grad_bias(g: &Tensor, cout: usize) -> Tensor {
    let [n, _, od, oh, ow] = g.dims5().expect("5-d grad");
    let spatial = od * oh * ow;
    let mut gb = vec![0.0f32; cout];
    for oc in 0..cout {
        let mut acc = 0.0f64;
        for b in 0..n {
            let base = (b * cout + oc) * spatial;
            for &v in &g.data()[base..base + spatial] {
                acc += v as f64;
            }
        }
        gb[oc] = acc as f32;
    }
    Tensor::new(vec![cout], gb).expect("bias grad shape")
}

fn conv3d_grad_weight(
    input: &Tensor,
    g: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, cin, d, h, w] = input.dims5().expect("5-d input");
    let [_, cout, od, oh, ow] = g.dims5().expect("5-d grad");
    let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    let mut acc = vec![0.0f64; cout * cin * k * k * k];

    for b in 0..n {
        let ibuf = pad_sample(
            &input.data()[b * cin * d * h * w..(b + 1) * cin * d * h * w],
            cin,
            d,
            h,
            w,
            pad,
        );
        for oc in 0..cout {
            let gbase = (b * cout + oc) * od * oh * ow;
            for ic in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let slot = ((oc * cin + ic) * k * k + kz * k + ky) * k + kx;
                            let mut s = 0.0f64;
                            if stride == 1 {
                                for z in 0..od {
                                    for y in 0..oh {
                                        let grow = gbase + (z * oh + y) * ow;
                                        let irow =
                                            ((ic * dp + z + kz) * hp + y + ky) * wp + kx;
                                        s += dot_rows(
                                            &g.data()[grow..grow + ow],
                                            &ibuf[irow..irow + ow],
                                        ) as f64;
                                    }
                                }
                            } else {
                                for z in 0..od {
                                    for y in 0..oh {
                                        for x in 0..ow {
                                            let gv =
                                                g.data()[gbase + (z * oh + y) * ow + x] as f64;
                                            let iv = ibuf[((ic * dp + z * stride + kz) * hp
                                                + y * stride
                                                + ky)
                                                * wp
                                                + x * stride
                                                + kx]
                                                as f64;
                                            s += gv * iv;
                                        }
                                    }
                                }
                            }
                            acc[slot] += s;
                        }
                    }
                }
            }
        }
    }
    let data: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![cout, cin, k, k, k], data).expect("weight grad shape")
}

fn conv3d_grad_input(
    weight: &Tensor,
    g: &Tensor,
    in_dims: [usize; 5],
    stride: usize,
    pad: usize,
    out: &mut [f32],
) {
    let [n, cin, d, h, w] = in_dims;
    let ws = weight.shape();
    let (cout, k) = (ws[0], ws[2]);
    let [_, _, od, oh, ow] = g.dims5().expect("5-d grad");

    if stride == 1 {
        // Full correlation with the flipped kernel over a padded grad buffer.
        assert!(k <= 8, "kernel extent {k} unsupported");
        let q = k - 1 - pad;
        let (dq, hq, wq) = (od + 2 * q, oh + 2 * q, ow + 2 * q);
        for b in 0..n {
            let gbuf = pad_sample(
                &g.data()[b * cout * od * oh * ow..(b + 1) * cout * od * oh * ow],
                cout,
                od,
                oh,
                ow,
                q,
            );
            for ic in 0..cin {
                let obase = (b * cin + ic) * d * h * w;
                for oc in 0..cout {
                    let wbase = (oc * cin + ic) * k * k * k;
                    for kz in 0..k {
                        for ky in 0..k {
                            // Flipped kernel row, reversed in x.
                            let wrow = wbase + ((k - 1 - kz) * k + (k - 1 - ky)) * k;
                            let mut wflip = [0.0f32; 8];
                            for kx in 0..k {
                                wflip[kx] = weight.data()[wrow + k - 1 - kx];
                            }
                            for z in 0..d {
                                for y in 0..h {
                                    let orow = obase + (z * h + y) * w;
                                    let grow = ((oc * dq + z + kz) * hq + y + ky) * wq;
                                    axpy_row(
                                        &mut out[orow..orow + w],
                                        &gbuf[grow..grow + w + k - 1],
                                        &wflip[..k],
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        // Scatter form for strided convolutions.
        for b in 0..n {
            for oc in 0..cout {
                let gbase = (b * cout + oc) * od * oh * ow;
                for ic in 0..cin {
                    let obase = (b * cin + ic) * d * h * w;
                    let wbase = (oc * cin + ic) * k * k * k;
                    for z in 0..od {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = g.data()[gbase + (z * oh + y) * ow + x];
                                for kz in 0..k {
                                    let iz = z * stride + kz;
                                    if iz < pad || iz >= d + pad {
                                        continue;
                                    }
                                    for ky in 0..k {
                                        let iy = y * stride + ky;
                                        if iy < pad || iy >= h + pad {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = x * stride + kx;
                                            if ix < pad || ix >= w + pad {
                                                continue;
                                            }
                                            let wv =
                                                weight.data()[wbase + (kz * k + ky) * k + kx];
                                            out[obase
                                                + ((iz - pad) * h + (iy - pad)) * w
                                                + (ix - pad)] += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 3-d cross-correlation with bias. Cubic kernels; "same" output needs
    /// stride 1 with pad = (k-1)/2.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv3d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;

        let back = self.wants_grad(&[input, weight, bias]).then(|| {
            let out = self.next_id();
            let in_shape = self.value(input).shape().to_vec();
            let w_shape = self.value(weight).shape().to_vec();
            let b_shape = self.value(bias).shape().to_vec();
            let (ri, rw, rb) = (
                self.requires_grad(input),
                self.requires_grad(weight),
                self.requires_grad(bias),
            );
            let k = w_shape[2];
            let cout = w_shape[0];
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                if rb {
                    let gb = conv3d_grad_bias(&g, cout);
                    accum_with(&mut grads[bias.0], &b_shape, |d| {
                        for (o, &v) in d.iter_mut().zip(gb.data()) {
                            *o += v;
                        }
                    });
                }
                if rw {
                    let gw = conv3d_grad_weight(&values[input.0], &g, k, stride, padding);
                    accum_with(&mut grads[weight.0], &w_shape, |d| {
                        for (o, &v) in d.iter_mut().zip(gw.data()) {
                            *o += v;
                        }
                    });
                }
                if ri {
                    let dims = [in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]];
                    accum_with(&mut grads[input.0], &in_shape, |d| {
                        conv3d_grad_input(&values[weight.0], &g, dims, stride, padding, d);
                    });
                }
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("conv3d", value, &[input, weight, bias], back)
    }

    /// Transposed 3-d convolution, the adjoint of a stride-2 conv3d.
    /// Weight layout is (in_channels, out_channels, k, k, k); only
    /// stride 2 is supported. Output extent is (in-1)*2 + k.
    pub fn conv_transpose3d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        if stride != 2 {
            return Err(Error::InvalidConfig(format!("conv_transpose3d stride {stride} != 2")));
        }
        let value = conv_transpose3d_forward(self.value(input), self.value(weight), stride)?;

        let back = self.wants_grad(&[input, weight]).then(|| {
            let out = self.next_id();
            let in_shape = self.value(input).shape().to_vec();
            let w_shape = self.value(weight).shape().to_vec();
            let (ri, rw) = (self.requires_grad(input), self.requires_grad(weight));
            Box::new(move |values: &[Tensor], grads: &mut [Option<Tensor>]| {
                let g = take_grad(grads, out);
                if rw {
                    let gw = conv_transpose3d_grad_weight(&values[input.0], &g, &w_shape, stride);
                    accum_with(&mut grads[weight.0], &w_shape, |d| {
                        for (o, &v) in d.iter_mut().zip(gw.data()) {
                            *o += v;
                        }
                    });
                }
                if ri {
                    accum_with(&mut grads[input.0], &in_shape, |d| {
                        conv_transpose3d_grad_input(&values[weight.0], &g, &in_shape, stride, d);
                    });
                }
                put_grad(grads, out, g);
            }) as BackFn
        });
        self.push_op("conv_transpose3d", value, &[input, weight], back)
    }

    fn next_id(&self) -> usize {
        self.node_count()
    }
}

pub(crate) fn conv_transpose3d_forward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let [n, cin, d, h, w] = input.dims5()?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose weight shape {ws:?} must be cubic 5-d"
        )));
    }
    let (wcin, cout, k) = (ws[0], ws[1], ws[2]);
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "input channels {cin} != weight input channels {wcin}"
        )));
    }
    let (od, oh, ow) = ((d - 1) * stride + k, (h - 1) * stride + k, (w - 1) * stride + k);
    let mut out = vec![0.0f32; n * cout * od * oh * ow];

    for b in 0..n {
        for ic in 0..cin {
            let ibase = (b * cin + ic) * d * h * w;
            for oc in 0..cout {
                let obase = (b * cout + oc) * od * oh * ow;
                let wbase = (ic * cout + oc) * k * k * k;
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let iv = input.data()[ibase + (z * h + y) * w + x];
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = weight.data()[wbase + (kz * k + ky) * k + kx];
                                        let idx = obase
                                            + ((z * stride + kz) * oh + y * stride + ky) * ow
                                            + x * stride
                                            + kx;
                                        out[idx] = wv.mul_add(iv, out[idx]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, od, oh, ow], out)
}

fn conv_transpose3d_grad_input(
    weight: &Tensor,
    g: &Tensor,
    in_shape: &[usize],
    stride: usize,
    out: &mut [f32],
) {
    let (n, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let ws = weight.shape();
    let (cout, k) = (ws[1], ws[2]);
    let [_, _, od, oh, ow] = g.dims5().expect("5-d grad");
    for b in 0..n {
        for ic in 0..cin {
            let obase = (b * cin + ic) * d * h * w;
            for oc in 0..cout {
                let gbase = (b * cout + oc) * od * oh * ow;
                let wbase = (ic * cout + oc) * k * k * k;
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = out[obase + (z * h + y) * w + x];
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let gv = g.data()[gbase
                                            + ((z * stride + kz) * oh + y * stride + ky) * ow
                                            + x * stride
                                            + kx];
                                        let wv = weight.data()[wbase + (kz * k + ky) * k + kx];
                                        acc = wv.mul_add(gv, acc);
                                    }
                                }
                            }
                            out[obase + (z * h + y) * w + x] = acc;
                        }
                    }
                }
            }
        }
    }
}

fn conv_transpose3d_grad_weight(
    input: &Tensor,
    g: &Tensor,
    w_shape: &[usize],
    stride: usize,
) -> Tensor {
    let [n, cin, d, h, w] = input.dims5().expect("5-d input");
    let (cout, k) = (w_shape[1], w_shape[2]);
    let [_, _, od, oh, ow] = g.dims5().expect("5-d grad");
    let mut acc = vec![0.0f64; cin * cout * k * k * k];
    for b in 0..n {
        for ic in 0..cin {
            let ibase = (b * cin + ic) * d * h * w;
            for oc in 0..cout {
                let gbase = (b * cout + oc) * od * oh * ow;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let slot = ((ic * cout + oc) * k * k + kz * k + ky) * k + kx;
                            let mut s = 0.0f64;
                            for z in 0..d {
                                for y in 0..h {
                                    for x in 0..w {
                                        let iv = input.data()[ibase + (z * h + y) * w + x] as f64;
                                        let gv = g.data()[gbase
                                            + ((z * stride + kz) * oh + y * stride + ky) * ow
                                            + x * stride
                                            + kx]
                                            as f64;
                                        s += iv * gv;
                                    }
                                }
                            }
                            acc[slot] += s;
                        }
                    }
                }
            }
        }
    }
    let data: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    Tensor::new(w_shape.to_vec(), data).expect("weight grad shape")
}
