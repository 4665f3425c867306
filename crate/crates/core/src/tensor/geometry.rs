//! Rigid-body operators: axis-angle rotations, kinematic chains, linear
//! blend skinning and pinhole projection.

use std::sync::Arc;

use super::tape::{GradSink, Op, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Below this angle Rodrigues falls back to `I + [aa]x`.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Minimum camera-space depth used by [`Tape::project`].
pub const MIN_DEPTH: f64 = 1e-4;

/// Parent index of the kinematic root.
pub const ROOT_PARENT: usize = usize::MAX;

type M3 = [[f64; 3]; 3];

fn skew(v: [f64; 3]) -> M3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mm(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn mv(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn mtv(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[0][i] * v[0] + a[1][i] * v[1] + a[2][i] * v[2])
}

fn load3(d: &[f64]) -> [f64; 3] {
    [d[0], d[1], d[2]]
}

fn load_m3(d: &[f64], stride: usize) -> M3 {
    [0, 1, 2].map(|r| [d[r * stride], d[r * stride + 1], d[r * stride + 2]])
}

/// Rotation matrix for an axis-angle vector.
pub fn rodrigues_matrix(aa: [f64; 3]) -> M3 {
    let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if theta < SMALL_ANGLE {
        let k = skew(aa);
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += k[i][j];
            }
        }
        return r;
    }
    let k = skew(aa.map(|a| a / theta));
    let k2 = mm(&k, &k);
    let (s, c) = theta.sin_cos();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    r
}

/// `dR/d aa_i` for `i = 0..3`.
fn rodrigues_jacobian(aa: [f64; 3], r: &M3) -> [M3; 3] {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
    let mut out = [[[0.0; 3]; 3]; 3];
    if t2.sqrt() < SMALL_ANGLE {
        for (i, o) in out.iter_mut().enumerate() {
            let mut e = [0.0; 3];
            e[i] = 1.0;
            *o = skew(e);
        }
        return out;
    }
    let vx = skew(aa);
    for (i, o) in out.iter_mut().enumerate() {
        // (I - R) e_i is column i of I - R
        let col = [0, 1, 2].map(|r_| (if r_ == i { 1.0 } else { 0.0 }) - r[r_][i]);
        let cross = [
            aa[1] * col[2] - aa[2] * col[1],
            aa[2] * col[0] - aa[0] * col[2],
            aa[0] * col[1] - aa[1] * col[0],
        ];
        let sc = skew(cross);
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = (aa[i] * vx[a][b] + sc[a][b]) / t2;
            }
        }
        *o = mm(&m, r);
    }
    out
}

impl Tape {
    /// Axis-angle rows `[n, 3]` to rotation matrices `[n, 3, 3]`.
    pub fn rodrigues(&mut self, aa: Var) -> Result<Var> {
        let ia = self.check(aa)?;
        let v = &self.nodes[ia].value;
        let &[n, 3] = v.shape() else {
            return Err(Error::invalid("rodrigues", format!("expected n x 3, got {:?}", v.shape())));
        };
        let mut out = Vec::with_capacity(9 * n);
        for row in v.data().chunks(3) {
            let r = rodrigues_matrix(load3(row));
            out.extend(r.iter().flatten());
        }
        let t = Tensor::new([n, 3, 3], out)?;
        Ok(self.push(t, Op::Rodrigues(ia), &[ia]))
    }

    /// Chains rigid transforms down a kinematic tree.
    ///
    /// `rest`: `[J, 3]` rest joint positions; `rots`: `[J, 3, 3]` local
    /// rotations; `parents[j] < j` with `parents[0] == ROOT_PARENT`. Returns
    /// global transforms `[J, 3, 4]` (`[R | t]`, `t` being the posed joint).
    pub fn forward_kinematics(&mut self, rest: Var, rots: Var, parents: Arc<[usize]>) -> Result<Var> {
        let (ir, io) = (self.check(rest)?, self.check(rots)?);
        let (vr, vo) = (&self.nodes[ir].value, &self.nodes[io].value);
        let j = parents.len();
        if vr.shape() != [j, 3] {
            return Err(Error::shape("forward_kinematics", vr.shape(), &[j, 3]));
        }
        if vo.shape() != [j, 3, 3] {
            return Err(Error::shape("forward_kinematics", vo.shape(), &[j, 3, 3]));
        }
        validate_parents(&parents)?;
        let rd = vr.data();
        let od = vo.data();
        let mut out = vec![0.0; j * 12];
        for k in 0..j {
            let rk = load_m3(&od[9 * k..], 3);
            let (r, t) = if k == 0 {
                (rk, load3(&rd[0..3]))
            } else {
                let p = parents[k];
                let gp = load_m3(&out[12 * p..], 4);
                let tp = [out[12 * p + 3], out[12 * p + 7], out[12 * p + 11]];
                let bone = [0, 1, 2].map(|a| rd[3 * k + a] - rd[3 * p + a]);
                let rb = mv(&gp, bone);
                (mm(&gp, &rk), [0, 1, 2].map(|a| rb[a] + tp[a]))
            };
            for a in 0..3 {
                out[12 * k + 4 * a..12 * k + 4 * a + 3].copy_from_slice(&r[a]);
                out[12 * k + 4 * a + 3] = t[a];
            }
        }
        let t = Tensor::new([j, 3, 4], out)?;
        Ok(self.push(
            t,
            Op::ForwardKinematics {
                rest: ir,
                rots: io,
                parents,
            },
            &[ir, io],
        ))
    }

    /// Linear blend skinning: `v' = sum_j w_vj (R_j (v - rest_j) + t_j)`.
    ///
    /// `verts`: `[V, 3]`; `transforms`: `[J, 3, 4]` global transforms from
    /// [`Tape::forward_kinematics`]; `rest`: `[J, 3]`; `weights`: `[V, J]`.
    pub fn lbs(&mut self, verts: Var, transforms: Var, rest: Var, weights: Arc<Tensor>) -> Result<Var> {
        let (iv, it, ir) = (self.check(verts)?, self.check(transforms)?, self.check(rest)?);
        let (vv, vt, vr) = (&self.nodes[iv].value, &self.nodes[it].value, &self.nodes[ir].value);
        let (&[nv, 3], &[nj, 3, 4]) = (vv.shape(), vt.shape()) else {
            return Err(Error::shape("lbs", vv.shape(), vt.shape()));
        };
        if vr.shape() != [nj, 3] || weights.shape() != [nv, nj] {
            return Err(Error::shape("lbs", weights.shape(), &[nv, nj]));
        }
        let rel = relative_transforms(vt.data(), vr.data(), nj);
        let wd = weights.data();
        let mut out = vec![0.0; nv * 3];
        for v in 0..nv {
            let blend = blend_row(&wd[v * nj..(v + 1) * nj], &rel);
            let p = load3(&vv.data()[3 * v..]);
            for a in 0..3 {
                out[3 * v + a] = blend[4 * a] * p[0] + blend[4 * a + 1] * p[1] + blend[4 * a + 2] * p[2] + blend[4 * a + 3];
            }
        }
        let t = Tensor::new([nv, 3], out)?;
        Ok(self.push(
            t,
            Op::Lbs {
                verts: iv,
                transforms: it,
                rest: ir,
                weights,
            },
            &[iv, it, ir],
        ))
    }

    /// Pinhole projection of `x[n, 3]` after adding the world-to-camera
    /// translation `offset`. Depths below [`MIN_DEPTH`] are clamped (and
    /// counted in diagnostics); the clamped depth carries no gradient.
    pub fn project(&mut self, x: Var, focal: [f64; 2], principal: [f64; 2], offset: [f64; 3]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let &[n, 3] = v.shape() else {
            return Err(Error::invalid("project", format!("expected n x 3, got {:?}", v.shape())));
        };
        let mut out = Vec::with_capacity(2 * n);
        let mut clamped = Vec::with_capacity(n);
        for row in v.data().chunks(3) {
            let p = [0, 1, 2].map(|a| row[a] + offset[a]);
            let c = p[2] < MIN_DEPTH;
            let z = p[2].max(MIN_DEPTH);
            clamped.push(c);
            out.push(focal[0] * p[0] / z + principal[0]);
            out.push(focal[1] * p[1] / z + principal[1]);
        }
        self.diagnostics.clamped_depths += clamped.iter().filter(|&&c| c).count();
        let t = Tensor::new([n, 2], out)?;
        Ok(self.push(
            t,
            Op::Project {
                x: ix,
                fx: focal[0],
                fy: focal[1],
                offset,
                clamped,
            },
            &[ix],
        ))
    }
}

fn validate_parents(parents: &[usize]) -> Result<()> {
    if parents.first() != Some(&ROOT_PARENT) {
        return Err(Error::invalid("forward_kinematics", "joint 0 must be the root"));
    }
    if let Some(j) = (1..parents.len()).find(|&j| parents[j] >= j) {
        return Err(Error::invalid(
            "forward_kinematics",
            format!("parent of joint {j} is {}, not topologically ordered", parents[j]),
        ));
    }
    Ok(())
}

/// Per-joint `[R | t - R rest]`, 12 values each.
fn relative_transforms(global: &[f64], rest: &[f64], nj: usize) -> Vec<f64> {
    let mut rel = global.to_vec();
    for j in 0..nj {
        let r = load_m3(&global[12 * j..], 4);
        let rr = mv(&r, load3(&rest[3 * j..]));
        for a in 0..3 {
            rel[12 * j + 4 * a + 3] -= rr[a];
        }
    }
    rel
}

fn blend_row(w: &[f64], rel: &[f64]) -> [f64; 12] {
    let mut b = [0.0; 12];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            for k in 0..12 {
                b[k] += wj * rel[12 * j + k];
            }
        }
    }
    b
}

pub(super) fn rodrigues_backward(aa: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let va = sink.value(aa).data();
    let Some(da) = sink.slot(aa) else {
        return;
    };
    for (n, row) in va.chunks(3).enumerate() {
        let a = load3(row);
        let r = rodrigues_matrix(a);
        let jac = rodrigues_jacobian(a, &r);
        let gr = &g[9 * n..9 * n + 9];
        for i in 0..3 {
            da[3 * n + i] += (0..9).map(|k| gr[k] * jac[i][k / 3][k % 3]).sum::<f64>();
        }
    }
}

pub(super) fn fk_backward(rest: usize, rots: usize, parents: &[usize], out: &[f64], g: &[f64], sink: &mut GradSink<'_>) {
    let rd = sink.value(rest).data();
    let od = sink.value(rots).data();
    let nj = parents.len();
    let mut dg = g.to_vec();
    let mut drot = vec![0.0; 9 * nj];
    let mut drest = vec![0.0; 3 * nj];
    for k in (0..nj).rev() {
        let dr = load_m3(&dg[12 * k..], 4);
        let dt = [dg[12 * k + 3], dg[12 * k + 7], dg[12 * k + 11]];
        if k == 0 {
            for a in 0..3 {
                for b in 0..3 {
                    drot[3 * a + b] += dr[a][b];
                }
                drest[a] += dt[a];
            }
            continue;
        }
        let p = parents[k];
        let gp = load_m3(&out[12 * p..], 4);
        let rk = load_m3(&od[9 * k..], 3);
        // R_k: G_p^T dR
        for a in 0..3 {
            for b in 0..3 {
                drot[9 * k + 3 * a + b] += (0..3).map(|c| gp[c][a] * dr[c][b]).sum::<f64>();
            }
        }
        let bone = [0, 1, 2].map(|a| rd[3 * k + a] - rd[3 * p + a]);
        for a in 0..3 {
            for b in 0..3 {
                let v = (0..3).map(|c| dr[a][c] * rk[b][c]).sum::<f64>() + dt[a] * bone[b];
                dg[12 * p + 4 * a + b] += v;
            }
            dg[12 * p + 4 * a + 3] += dt[a];
        }
        let gtd = mtv(&gp, dt);
        for a in 0..3 {
            drest[3 * k + a] += gtd[a];
            drest[3 * p + a] -= gtd[a];
        }
    }
    if let Some(d) = sink.slot(rots) {
        d.iter_mut().zip(&drot).for_each(|(d, v)| *d += v);
    }
    if let Some(d) = sink.slot(rest) {
        d.iter_mut().zip(&drest).for_each(|(d, v)| *d += v);
    }
}

pub(super) fn lbs_backward(
    verts: usize,
    transforms: usize,
    rest: usize,
    weights: &Tensor,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let vv = sink.value(verts).data();
    let vt = sink.value(transforms).data();
    let vr = sink.value(rest).data();
    let nj = vr.len() / 3;
    let nv = vv.len() / 3;
    let wd = weights.data();
    let rel = relative_transforms(vt, vr, nj);
    let mut dverts = vec![0.0; 3 * nv];
    let mut drel = vec![0.0; 12 * nj];
    for v in 0..nv {
        let w = &wd[v * nj..(v + 1) * nj];
        let blend = blend_row(w, &rel);
        let gv = load3(&g[3 * v..]);
        let p = load3(&vv[3 * v..]);
        for b in 0..3 {
            dverts[3 * v + b] += (0..3).map(|a| blend[4 * a + b] * gv[a]).sum::<f64>();
        }
        let mut dblend = [0.0; 12];
        for a in 0..3 {
            for b in 0..3 {
                dblend[4 * a + b] = gv[a] * p[b];
            }
            dblend[4 * a + 3] = gv[a];
        }
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                for k in 0..12 {
                    drel[12 * j + k] += wj * dblend[k];
                }
            }
        }
    }
    // rel = [R | t - R rest]
    let mut dglobal = drel.clone();
    let mut drest = vec![0.0; 3 * nj];
    for j in 0..nj {
        let r = load_m3(&vt[12 * j..], 4);
        let dtr = [drel[12 * j + 3], drel[12 * j + 7], drel[12 * j + 11]];
        let rj = load3(&vr[3 * j..]);
        for a in 0..3 {
            for b in 0..3 {
                dglobal[12 * j + 4 * a + b] -= dtr[a] * rj[b];
            }
        }
        let rt = mtv(&r, dtr);
        for a in 0..3 {
            drest[3 * j + a] -= rt[a];
        }
    }
    if let Some(d) = sink.slot(verts) {
        d.iter_mut().zip(&dverts).for_each(|(d, v)| *d += v);
    }
    if let Some(d) = sink.slot(transforms) {
        d.iter_mut().zip(&dglobal).for_each(|(d, v)| *d += v);
    }
    if let Some(d) = sink.slot(rest) {
        d.iter_mut().zip(&drest).for_each(|(d, v)| *d += v);
    }
}

pub(super) fn project_backward(
    x: usize,
    fx: f64,
    fy: f64,
    offset: [f64; 3],
    clamped: &[bool],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let vx = sink.value(x).data();
    let Some(dx) = sink.slot(x) else {
        return;
    };
    for (n, row) in vx.chunks(3).enumerate() {
        let p = [0, 1, 2].map(|a| row[a] + offset[a]);
        let z = p[2].max(MIN_DEPTH);
        let (gu, gv) = (g[2 * n], g[2 * n + 1]);
        dx[3 * n] += gu * fx / z;
        dx[3 * n + 1] += gv * fy / z;
        if !clamped[n] {
            dx[3 * n + 2] -= (gu * fx * p[0] + gv * fy * p[1]) / (z * z);
        }
    }
}
