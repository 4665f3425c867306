use super::tape::{GradSink, Op, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let (vx, vg, vb) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let c = *vx.shape().last().unwrap_or(&1);
        if vx.ndim() == 0 || vg.numel() != c {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        if vb.numel() != c {
            return Err(Error::shape("layer_norm", vx.shape(), vb.shape()));
        }
        let rows = vx.numel() / c;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            &[ix, ig, ib],
        ))
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.ndim() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape: v.shape().to_vec(),
            });
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let len = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x: ix, outer, len, inner }, &[ix]))
    }
}

pub(super) fn layer_norm_backward(
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let vg = sink.value(gamma).data();
    let c = vg.len();
    let rows = inv_std.len();
    if let Some(dx) = sink.slot(x) {
        for r in 0..rows {
            let gr = &g[r * c..(r + 1) * c];
            let hr = &xhat[r * c..(r + 1) * c];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..c {
                let dh = gr[j] * vg[j];
                m1 += dh;
                m2 += dh * hr[j];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            for j in 0..c {
                let dh = gr[j] * vg[j];
                dx[r * c + j] += inv_std[r] * (dh - m1 - hr[j] * m2);
            }
        }
    }
    if let Some(dg) = sink.slot(gamma) {
        for r in 0..rows {
            for j in 0..c {
                dg[j] += g[r * c + j] * xhat[r * c + j];
            }
        }
    }
    if let Some(db) = sink.slot(beta) {
        for r in 0..rows {
            for j in 0..c {
                db[j] += g[r * c + j];
            }
        }
    }
}

pub(super) fn softmax_backward(
    x: usize,
    outer: usize,
    len: usize,
    inner: usize,
    y: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    if let Some(dx) = sink.slot(x) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
    }
}
