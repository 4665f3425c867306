//! Spatial operators: transposed convolution, bilinear sampling, RoI grids
//! and sinusoidal position embeddings.
//!
//! Sampling convention: grid sample `(row i, col j)` sits at continuous
//! coordinate `(x = j, y = i)`. Points outside `[0, W-1] x [0, H-1]` are
//! clamped to the border and receive no coordinate gradient. Normalized
//! coordinates `u in [0, 1]` map to pixels as `u * W - 0.5`, so the centre of
//! pixel `j` is `(j + 0.5) / W`.

use super::linalg::{gemm, MatRef};
use super::tape::{GradSink, Op, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Boxes narrower than this are widened to it and counted in diagnostics.
pub const MIN_BOX_EXTENT: f64 = 1e-6;

/// Bilinear interpolation stencil for one point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dwx: [f64; 4],
    pub dwy: [f64; 4],
}

fn locate(v: f64, n: usize) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let hi = (n - 1) as f64;
    let inside = if (0.0..=hi).contains(&v) { 1.0 } else { 0.0 };
    let c = v.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

impl Tap {
    /// Stencil at pixel coordinate `(x, y)` on an `h x w` grid.
    pub(crate) fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, gx) = locate(x, w);
        let (y0, y1, fy, gy) = locate(y, h);
        Tap {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dwx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
            dwy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
        }
    }
}

pub(crate) struct ConvTransposeSaved {
    x: usize,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvTransposeSaved {
    /// Calls `f(input_pixel, col, output_flat)` for every in-range tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.h * self.stride, self.w * self.stride);
        let kk = self.k * self.k;
        for i in 0..self.h {
            for j in 0..self.w {
                let p = i * self.w + j;
                for co in 0..self.c_out {
                    for ky in 0..self.k {
                        let y = (i * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= oh as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let x = (j * self.stride + kx) as isize - self.pad as isize;
                            if x < 0 || x >= ow as isize {
                                continue;
                            }
                            f(p, co * kk + ky * self.k + kx, (co * oh + y as usize) * ow + x as usize);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        let ncol = self.c_out * self.k * self.k;
        let hw = self.h * self.w;
        let mut dcols = vec![0.0; hw * ncol];
        self.for_each_tap(|p, col, o| dcols[p * ncol + col] = g[o]);
        let vx = sink.value(self.x).data();
        let vk = sink.value(self.kernel).data();
        let dc = MatRef::row_major(&dcols, hw, ncol);
        if let Some(dx) = sink.slot(self.x) {
            gemm(MatRef::row_major(vk, self.c_in, ncol), dc.t(), 1.0, dx);
        }
        if let Some(dk) = sink.slot(self.kernel) {
            gemm(MatRef::row_major(vx, self.c_in, hw), dc, 1.0, dk);
        }
    }
}

pub(crate) struct RoiGridSaved {
    boxv: usize,
    out_h: usize,
    out_w: usize,
    map_h: usize,
    map_w: usize,
    mirror: bool,
    w_clamped: bool,
    h_clamped: bool,
}

impl RoiGridSaved {
    fn col(&self, j: usize) -> usize {
        if self.mirror {
            self.out_w - 1 - j
        } else {
            j
        }
    }

    pub(crate) fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        let Some(db) = sink.slot(self.boxv) else {
            return;
        };
        let (mw, mh) = (self.map_w as f64, self.map_h as f64);
        for i in 0..self.out_h {
            for j in 0..self.out_w {
                let p = i * self.out_w + j;
                let (gx, gy) = (g[2 * p], g[2 * p + 1]);
                let fj = (self.col(j) as f64 + 0.5) / self.out_w as f64;
                let fi = (i as f64 + 0.5) / self.out_h as f64;
                db[0] += gx * mw;
                db[1] += gy * mh;
                if !self.w_clamped {
                    db[2] += gx * mw * (fj - 0.5);
                }
                if !self.h_clamped {
                    db[3] += gy * mh * (fi - 0.5);
                }
            }
        }
    }
}

fn sinusoid_freqs(dim: usize) -> Vec<f64> {
    let q = dim / 4;
    (0..q)
        .map(|i| std::f64::consts::TAU / 10000f64.powf(i as f64 / q as f64))
        .collect()
}

impl Tape {
    /// Transposed 2-D convolution of `x[C, H, W]` with `kernel[C, C_out, k, k]`.
    ///
    /// Padding is `(k - stride) / 2`, so the output is exactly
    /// `[C_out, stride*H, stride*W]`; `k - stride` must be even and non-negative.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let (vx, vk) = (&self.nodes[ix].value, &self.nodes[ik].value);
        let &[c_in, h, w] = vx.shape() else {
            return Err(Error::invalid("conv_transpose2d", format!("input must be C x H x W, got {:?}", vx.shape())));
        };
        let &[kc, c_out, k, k2] = vk.shape() else {
            return Err(Error::invalid("conv_transpose2d", format!("kernel must be C x C_out x k x k, got {:?}", vk.shape())));
        };
        if kc != c_in {
            return Err(Error::shape("conv_transpose2d", vx.shape(), vk.shape()));
        }
        if stride == 0 || k != k2 || k < stride || (k - stride) % 2 != 0 {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("kernel {k}x{k2} incompatible with stride {stride}"),
            ));
        }
        let saved = ConvTransposeSaved {
            x: ix,
            kernel: ik,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad: (k - stride) / 2,
        };
        let ncol = c_out * k * k;
        let mut cols = vec![0.0; h * w * ncol];
        gemm(
            MatRef::row_major(vx.data(), c_in, h * w).t(),
            MatRef::row_major(vk.data(), c_in, ncol),
            0.0,
            &mut cols,
        );
        let (oh, ow) = (h * stride, w * stride);
        let mut out = vec![0.0; c_out * oh * ow];
        saved.for_each_tap(|p, col, o| out[o] += cols[p * ncol + col]);
        let t = Tensor::new([c_out, oh, ow], out)?;
        Ok(self.push(t, Op::ConvTranspose2d(saved), &[ix, ik]))
    }

    /// Bilinear samples of `map[C, H, W]` at pixel coordinates `points[P, 2]`
    /// (columns are `x`, `y`). Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let (im, ip) = (self.check(map)?, self.check(points)?);
        let (vm, vp) = (&self.nodes[im].value, &self.nodes[ip].value);
        let &[c, h, w] = vm.shape() else {
            return Err(Error::invalid("bilinear_sample", format!("map must be C x H x W, got {:?}", vm.shape())));
        };
        let &[p, 2] = vp.shape() else {
            return Err(Error::invalid("bilinear_sample", format!("points must be P x 2, got {:?}", vp.shape())));
        };
        let (md, pd) = (vm.data(), vp.data());
        let mut out = vec![0.0; p * c];
        for q in 0..p {
            let tap = Tap::new(pd[2 * q], pd[2 * q + 1], h, w);
            for ch in 0..c {
                let m = &md[ch * h * w..(ch + 1) * h * w];
                out[q * c + ch] = (0..4).map(|t| tap.w[t] * m[tap.idx[t]]).sum();
            }
        }
        let t = Tensor::new([p, c], out)?;
        Ok(self.push(t, Op::BilinearSample { map: im, points: ip }, &[im, ip]))
    }

    /// Sampling grid for a normalized `(cx, cy, w, h)` box over an
    /// `map_h x map_w` map: one pixel-space point per output bin centre,
    /// row-major. With `mirror` the columns are visited right to left.
    pub fn roi_grid(
        &mut self,
        boxv: Var,
        out_h: usize,
        out_w: usize,
        map_h: usize,
        map_w: usize,
        mirror: bool,
    ) -> Result<Var> {
        let ib = self.check(boxv)?;
        let vb = &self.nodes[ib].value;
        if vb.numel() != 4 {
            return Err(Error::invalid("roi_grid", format!("box must have 4 values, got {:?}", vb.shape())));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("roi_grid", "empty output grid"));
        }
        let b = vb.data();
        let w_clamped = b[2] < MIN_BOX_EXTENT;
        let h_clamped = b[3] < MIN_BOX_EXTENT;
        let bw = b[2].max(MIN_BOX_EXTENT);
        let bh = b[3].max(MIN_BOX_EXTENT);
        let saved = RoiGridSaved {
            boxv: ib,
            out_h,
            out_w,
            map_h,
            map_w,
            mirror,
            w_clamped,
            h_clamped,
        };
        let mut pts = Vec::with_capacity(out_h * out_w * 2);
        for i in 0..out_h {
            for j in 0..out_w {
                let fj = (saved.col(j) as f64 + 0.5) / out_w as f64;
                let fi = (i as f64 + 0.5) / out_h as f64;
                let nx = b[0] + bw * (fj - 0.5);
                let ny = b[1] + bh * (fi - 0.5);
                pts.push(nx * map_w as f64 - 0.5);
                pts.push(ny * map_h as f64 - 0.5);
            }
        }
        if w_clamped || h_clamped {
            self.diagnostics.degenerate_boxes += 1;
        }
        let t = Tensor::new([out_h * out_w, 2], pts)?;
        Ok(self.push(t, Op::RoiGrid(saved), &[ib]))
    }

    /// Differentiable RoIAlign: crops `map[C, H, W]` inside a normalized box
    /// to `[C, out_h, out_w]`, one bilinear sample per bin.
    pub fn roi_align(&mut self, map: Var, boxv: Var, out_h: usize, out_w: usize, mirror: bool) -> Result<Var> {
        let shape = self.shape(map).to_vec();
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::invalid("roi_align", format!("map must be C x H x W, got {shape:?}")));
        };
        let grid = self.roi_grid(boxv, out_h, out_w, h, w, mirror)?;
        let s = self.bilinear_sample(map, grid)?;
        let t = self.transpose(s)?;
        self.reshape(t, &[c, out_h, out_w])
    }

    /// Sinusoidal embedding of normalized 2-D points `[K, 2]` into `[K, dim]`:
    /// the first half encodes `x`, the second `y`, as interleaved sin/cos
    /// pairs with frequencies `2 pi / 10000^(i / (dim/4))`.
    pub fn sinusoidal_embed(&mut self, points: Var, dim: usize) -> Result<Var> {
        let ip = self.check(points)?;
        let vp = &self.nodes[ip].value;
        let &[k, 2] = vp.shape() else {
            return Err(Error::invalid("sinusoidal_embed", format!("points must be K x 2, got {:?}", vp.shape())));
        };
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::invalid("sinusoidal_embed", format!("dim {dim} must be a positive multiple of 4")));
        }
        let freqs = sinusoid_freqs(dim);
        let q = freqs.len();
        let mut out = vec![0.0; k * dim];
        for r in 0..k {
            for a in 0..2 {
                let p = vp.data()[2 * r + a];
                for (i, f) in freqs.iter().enumerate() {
                    out[r * dim + a * 2 * q + 2 * i] = (p * f).sin();
                    out[r * dim + a * 2 * q + 2 * i + 1] = (p * f).cos();
                }
            }
        }
        let t = Tensor::new([k, dim], out)?;
        Ok(self.push(t, Op::SinusoidalEmbed { points: ip, dim }, &[ip]))
    }
}

pub(super) fn bilinear_backward(map: usize, points: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let vm = sink.value(map);
    let vp = sink.value(points);
    let (c, h, w) = (vm.shape()[0], vm.shape()[1], vm.shape()[2]);
    let p = vp.shape()[0];
    let pd = vp.data();
    let taps: Vec<Tap> = (0..p).map(|q| Tap::new(pd[2 * q], pd[2 * q + 1], h, w)).collect();
    if let Some(dm) = sink.slot(map) {
        for (q, tap) in taps.iter().enumerate() {
            for ch in 0..c {
                let gv = g[q * c + ch];
                for t in 0..4 {
                    dm[ch * h * w + tap.idx[t]] += tap.w[t] * gv;
                }
            }
        }
    }
    if let Some(dp) = sink.slot(points) {
        let md = vm.data();
        for (q, tap) in taps.iter().enumerate() {
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let gv = g[q * c + ch];
                let m = &md[ch * h * w..(ch + 1) * h * w];
                for t in 0..4 {
                    gx += gv * tap.dwx[t] * m[tap.idx[t]];
                    gy += gv * tap.dwy[t] * m[tap.idx[t]];
                }
            }
            dp[2 * q] += gx;
            dp[2 * q + 1] += gy;
        }
    }
}

pub(super) fn sinusoid_backward(points: usize, dim: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let vp = sink.value(points).data();
    let freqs = sinusoid_freqs(dim);
    let q = freqs.len();
    if let Some(dp) = sink.slot(points) {
        for r in 0..dp.len() / 2 {
            for a in 0..2 {
                let p = vp[2 * r + a];
                for (i, f) in freqs.iter().enumerate() {
                    let gs = g[r * dim + a * 2 * q + 2 * i];
                    let gc = g[r * dim + a * 2 * q + 2 * i + 1];
                    dp[2 * r + a] += f * (gs * (p * f).cos() - gc * (p * f).sin());
                }
            }
        }
    }
}
