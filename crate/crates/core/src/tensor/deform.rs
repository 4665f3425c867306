//! Fused multi-scale deformable sampling core.
//!
//! For query `q`, head `h`, level `l` and point `p` the sampling location is
//! `phi_l(ref_q) + offset_{q,h,l,p}`, where `phi_l` maps normalized
//! coordinates to level-`l` pixels (`u * W_l - 0.5`) and offsets are in
//! level pixels. The head's channel slice of each value map is bilinearly
//! sampled there and accumulated with weight `attn_{q,h,l,p}`.

use super::spatial::Tap;
use super::tape::{GradSink, Op, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

pub(crate) struct DeformSaved {
    values: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    refs: usize,
    offsets: usize,
    attn: usize,
    heads: usize,
    points: usize,
    channels: usize,
}

impl DeformSaved {
    fn locations(&self, refs: &[f64], offsets: &[f64], q: usize, h: usize, l: usize, p: usize) -> (f64, f64) {
        let levels = self.shapes.len();
        let (lh, lw) = self.shapes[l];
        let o = ((q * self.heads + h) * levels + l) * self.points + p;
        let x = refs[2 * q] * lw as f64 - 0.5 + offsets[2 * o];
        let y = refs[2 * q + 1] * lh as f64 - 0.5 + offsets[2 * o + 1];
        (x, y)
    }

    pub(crate) fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        let levels = self.shapes.len();
        let d = self.channels / self.heads;
        let c = self.channels;
        let refs = sink.value(self.refs).data();
        let offsets = sink.value(self.offsets).data();
        let attn = sink.value(self.attn).data();
        let k = refs.len() / 2;
        let n = k * self.heads * levels * self.points;
        let mut d_attn = vec![0.0; n];
        let mut d_loc = vec![0.0; 2 * n];
        let mut d_values: Vec<Option<Vec<f64>>> = self
            .values
            .iter()
            .map(|&v| sink.slot(v).map(|s| vec![0.0; s.len()]))
            .collect();
        for q in 0..k {
            for h in 0..self.heads {
                let gq = &g[q * c + h * d..q * c + (h + 1) * d];
                for l in 0..levels {
                    let (lh, lw) = self.shapes[l];
                    let v = sink.value(self.values[l]).data();
                    for p in 0..self.points {
                        let o = ((q * self.heads + h) * levels + l) * self.points + p;
                        let (x, y) = self.locations(refs, offsets, q, h, l, p);
                        let tap = Tap::new(x, y, lh, lw);
                        let a = attn[o];
                        let (mut ga, mut gx, mut gy) = (0.0, 0.0, 0.0);
                        for t in 0..4 {
                            let row = &v[tap.idx[t] * c + h * d..tap.idx[t] * c + (h + 1) * d];
                            let dot: f64 = row.iter().zip(gq).map(|(v, g)| v * g).sum();
                            ga += tap.w[t] * dot;
                            gx += tap.dwx[t] * dot;
                            gy += tap.dwy[t] * dot;
                            if let Some(dv) = d_values[l].as_mut() {
                                let dst = &mut dv[tap.idx[t] * c + h * d..tap.idx[t] * c + (h + 1) * d];
                                let s = a * tap.w[t];
                                dst.iter_mut().zip(gq).for_each(|(dv, g)| *dv += s * g);
                            }
                        }
                        d_attn[o] += ga;
                        d_loc[2 * o] += a * gx;
                        d_loc[2 * o + 1] += a * gy;
                    }
                }
            }
        }
        for (l, dv) in d_values.into_iter().enumerate() {
            if let (Some(dv), Some(slot)) = (dv, sink.slot(self.values[l])) {
                slot.iter_mut().zip(&dv).for_each(|(s, d)| *s += d);
            }
        }
        if let Some(da) = sink.slot(self.attn) {
            da.iter_mut().zip(&d_attn).for_each(|(s, d)| *s += d);
        }
        if let Some(doff) = sink.slot(self.offsets) {
            doff.iter_mut().zip(&d_loc).for_each(|(s, d)| *s += d);
        }
        if let Some(dr) = sink.slot(self.refs) {
            for q in 0..k {
                for h in 0..self.heads {
                    for l in 0..levels {
                        let (lh, lw) = self.shapes[l];
                        for p in 0..self.points {
                            let o = ((q * self.heads + h) * levels + l) * self.points + p;
                            dr[2 * q] += d_loc[2 * o] * lw as f64;
                            dr[2 * q + 1] += d_loc[2 * o + 1] * lh as f64;
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Multi-scale deformable sampling.
    ///
    /// * `values[l]`: `[H_l * W_l, C]` value map (row-major pixels), with
    ///   `shapes[l] = (H_l, W_l)`;
    /// * `refs`: `[K, 2]` normalized reference points;
    /// * `offsets`: `[K, heads * L * P * 2]` pixel offsets;
    /// * `attn`: `[K, heads * L * P]` attention weights (already normalized).
    ///
    /// Returns `[K, C]`; head `h` owns channels `h*C/heads .. (h+1)*C/heads`.
    pub fn ms_deform_attn(
        &mut self,
        values: &[Var],
        shapes: &[(usize, usize)],
        refs: Var,
        offsets: Var,
        attn: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        const OP: &str = "ms_deform_attn";
        if values.len() != shapes.len() || values.is_empty() {
            return Err(Error::invalid(
                OP,
                format!("{} value levels but {} declared shapes", values.len(), shapes.len()),
            ));
        }
        let value_ids = values.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let (ir, io, ia) = (self.check(refs)?, self.check(offsets)?, self.check(attn)?);
        let c = self.nodes[value_ids[0]].value.shape().get(1).copied().unwrap_or(0);
        for (&id, &(h, w)) in value_ids.iter().zip(shapes) {
            let s = self.nodes[id].value.shape();
            if s != [h * w, c] {
                return Err(Error::shape(OP, s, &[h * w, c]));
            }
        }
        if heads == 0 || c % heads != 0 || points == 0 {
            return Err(Error::invalid(OP, format!("{c} channels, {heads} heads, {points} points")));
        }
        let k = self.nodes[ir].value.shape()[0];
        let levels = shapes.len();
        let n = heads * levels * points;
        if self.nodes[ir].value.shape() != [k, 2] {
            return Err(Error::shape(OP, self.nodes[ir].value.shape(), &[k, 2]));
        }
        if self.nodes[io].value.shape() != [k, 2 * n] {
            return Err(Error::shape(OP, self.nodes[io].value.shape(), &[k, 2 * n]));
        }
        if self.nodes[ia].value.shape() != [k, n] {
            return Err(Error::shape(OP, self.nodes[ia].value.shape(), &[k, n]));
        }
        let saved = DeformSaved {
            values: value_ids.clone(),
            shapes: shapes.to_vec(),
            refs: ir,
            offsets: io,
            attn: ia,
            heads,
            points,
            channels: c,
        };
        let d = c / heads;
        let refs_d = self.nodes[ir].value.data();
        let off_d = self.nodes[io].value.data();
        let attn_d = self.nodes[ia].value.data();
        let mut out = vec![0.0; k * c];
        for q in 0..k {
            for h in 0..heads {
                let dst = q * c + h * d;
                for l in 0..levels {
                    let (lh, lw) = shapes[l];
                    let v = self.nodes[value_ids[l]].value.data();
                    for p in 0..points {
                        let o = ((q * heads + h) * levels + l) * points + p;
                        let (x, y) = saved.locations(refs_d, off_d, q, h, l, p);
                        let tap = Tap::new(x, y, lh, lw);
                        for t in 0..4 {
                            let s = attn_d[o] * tap.w[t];
                            let row = &v[tap.idx[t] * c + h * d..tap.idx[t] * c + (h + 1) * d];
                            out[dst..dst + d].iter_mut().zip(row).for_each(|(o, v)| *o += s * v);
                        }
                    }
                }
            }
        }
        let t = Tensor::new([k, c], out)?;
        let mut inputs = value_ids;
        inputs.extend([ir, io, ia]);
        Ok(self.push(t, Op::MsDeformAttn(saved), &inputs))
    }
}
