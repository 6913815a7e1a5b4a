//! Layer operations: dense, convolution, activation, pooling.

use crate::error::{Error, Result};

use super::graph::{slot, ConvGeom, Node, Op};
use super::scalar::{gemm, MatRef};
use super::{Graph, Scalar, Var};

/// (channel count, elements per channel slice) with channels on axis 1.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, 1),
        _ => (shape[1], shape[2..].iter().product()),
    }
}

impl<T: Scalar> Graph<T> {
    /// `out[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::dim(format!("linear: input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); batch * out];
        gemm(
            MatRef::new(self.value(x), batch, inp),
            MatRef::new(self.value(w), out, inp).t(),
            T::zero(),
            &mut y,
        );
        let b = self.value(bias);
        for row in y.chunks_mut(out) {
            for (v, &bo) in row.iter_mut().zip(b) {
                *v = *v + bo;
            }
        }
        self.push(vec![batch, out], y, Op::Linear { x, w, b: bias })
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `kernel: [F, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim(format!("conv2d: input {xs:?}, kernel {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d: stride must be at least 1"));
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > ph || ks[3] > pw {
            return Err(Error::dim(format!(
                "conv2d: kernel {}x{} larger than padded input {ph}x{pw}",
                ks[2], ks[3]
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h: (ph - ks[2]) / stride + 1,
            out_w: (pw - ks[3]) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let (patch, plane, span) = (geom.patch(), geom.out_plane(), geom.batch * geom.out_plane());
        // [F, B * plane], then permuted to [B, F, plane].
        let mut tmp = vec![T::zero(); geom.filters * span];
        gemm(
            MatRef::new(self.value(kernel), geom.filters, patch),
            MatRef::new(&cols, patch, span),
            T::zero(),
            &mut tmp,
        );
        let mut y = vec![T::zero(); tmp.len()];
        for f in 0..geom.filters {
            for b in 0..geom.batch {
                let src = &tmp[f * span + b * plane..f * span + (b + 1) * plane];
                y[(b * geom.filters + f) * plane..(b * geom.filters + f + 1) * plane].copy_from_slice(src);
            }
        }
        self.push(
            vec![geom.batch, geom.filters, geom.out_h, geom.out_w],
            y,
            Op::Conv2d {
                x,
                k: kernel,
                geom,
                cols,
            },
        )
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, inner) = channel_layout(self.shape(x));
        if self.shape(x).len() < 2 || self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "channel_bias: input {:?}, bias {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut y = self.value(x).to_vec();
        for (p, plane) in y.chunks_mut(inner.max(1)).enumerate() {
            let bc = b[p % c];
            plane.iter_mut().for_each(|v| *v = *v + bc);
        }
        self.push(self.shape(x).to_vec(), y, Op::ChannelBias { x, b: bias })
    }

    /// `x` where positive, `slope * x` otherwise. `slope` holds one value per
    /// channel (axis 1) or a single shared value.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (c, inner) = channel_layout(self.shape(x));
        let a = self.value(slope);
        if a.len() != 1 && (a.len() != c || self.shape(x).len() < 2) {
            return Err(Error::dim(format!(
                "prelu: {} slopes for input {:?}",
                a.len(),
                self.shape(x)
            )));
        }
        let per_channel = a.len() != 1;
        let mut y = self.value(x).to_vec();
        for (p, plane) in y.chunks_mut(inner.max(1)).enumerate() {
            let s = if per_channel { a[p % c] } else { a[0] };
            for v in plane {
                if *v <= T::zero() {
                    *v = s * *v;
                }
            }
        }
        self.push(self.shape(x).to_vec(), y, Op::Prelu { x, slope })
    }

    /// Window maximum over `[B, C, H, W]`. The gradient goes to the first
    /// (lowest linear index) maximal element of each window.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim(format!("maxpool2d: input {s:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::usage("maxpool2d: window and stride must be positive"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window > h || window > w {
            return Err(Error::dim(format!("maxpool2d: window {window} exceeds input {h}x{w}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xs = self.value(x);
        let mut y = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..window {
                        for dj in 0..window {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![b, c, oh, ow], y, Op::MaxPool { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!("reshape {:?} into {shape:?}", self.shape(x))));
        }
        let y = self.value(x).to_vec();
        self.push(shape.to_vec(), y, Op::Reshape { x })
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let lead = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[lead, rest])
    }
}

/// Output columns `j0..j1` whose input column `oj * stride + kj - padding`
/// falls inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let j0 = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let limit = g.width + g.padding; // need oj * stride + kj < limit
    let j1 = if limit > kj {
        (limit - kj).div_ceil(g.stride).min(g.out_w)
    } else {
        0
    };
    (j0.min(j1), j1)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, span) = (g.out_plane(), g.batch * g.out_plane());
    let mut cols = vec![T::zero(); g.patch() * span];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * span..(row + 1) * span];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    let (j0, j1) = valid_cols(g, kj);
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - pad;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                        if g.stride == 1 && j0 < j1 {
                            let s0 = j0 + kj - g.padding;
                            dst_row[j0..j1].copy_from_slice(&src_row[s0..s0 + (j1 - j0)]);
                        } else {
                            for oj in j0..j1 {
                                dst_row[oj] = src_row[oj * g.stride + kj - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (plane, span) = (g.out_plane(), g.batch * g.out_plane());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * span..(row + 1) * span];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    let (j0, j1) = valid_cols(g, kj);
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - pad;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ii as usize * g.width..][..g.width];
                        let src_row = &src[oi * g.out_w..(oi + 1) * g.out_w];
                        for oj in j0..j1 {
                            let d = &mut dst_row[oj * g.stride + kj - g.padding];
                            *d = *d + src_row[oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    (x, w, b): (Var, Var, Var),
    xv: &[T],
    wv: &[T],
    g: &[T],
    (batch, inp, out): (usize, usize, usize),
) {
    if let Some(gx) = slot(adj, nodes, x) {
        gemm(MatRef::new(g, batch, out), MatRef::new(wv, out, inp), T::one(), gx);
    }
    if let Some(gw) = slot(adj, nodes, w) {
        gemm(
            MatRef::new(g, batch, out).t(),
            MatRef::new(xv, batch, inp),
            T::one(),
            gw,
        );
    }
    if let Some(gb) = slot(adj, nodes, b) {
        for row in g.chunks(out) {
            for (d, &s) in gb.iter_mut().zip(row) {
                *d = *d + s;
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    k: Var,
    kv: &[T],
    cols: &[T],
    g: &[T],
    geom: &ConvGeom,
) {
    let (patch, plane, span) = (geom.patch(), geom.out_plane(), geom.batch * geom.out_plane());
    // Gradient of the [F, B * plane] intermediate.
    let mut gt = vec![T::zero(); geom.filters * span];
    for b in 0..geom.batch {
        for f in 0..geom.filters {
            let src = &g[(b * geom.filters + f) * plane..][..plane];
            gt[f * span + b * plane..][..plane].copy_from_slice(src);
        }
    }
    if let Some(gk) = slot(adj, nodes, k) {
        gemm(
            MatRef::new(&gt, geom.filters, span),
            MatRef::new(cols, patch, span).t(),
            T::one(),
            gk,
        );
    }
    if nodes[x.0].requires_grad {
        let mut gcols = vec![T::zero(); patch * span];
        gemm(
            MatRef::new(kv, geom.filters, patch).t(),
            MatRef::new(&gt, geom.filters, span),
            T::zero(),
            &mut gcols,
        );
        if let Some(gx) = slot(adj, nodes, x) {
            col2im_add(&gcols, geom, gx);
        }
    }
}
