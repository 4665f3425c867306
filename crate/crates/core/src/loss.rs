//! Camera projection and the composite L1 training objective.

use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, ParamVars, SmplxParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Pinhole camera. Points are moved into the camera frame by adding
/// `offset` before projecting, so `t = 0` puts the body in view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub offset: [f64; 3],
}

impl CameraModel {
    /// `fx = fy = 5000 * H / 256`, principal point at the image centre, and
    /// an offset that frames a body whose rest bounds are `lo..hi` (meters)
    /// inside `fill` of the image.
    pub fn framing(h: usize, w: usize, lo: [f64; 3], hi: [f64; 3], fill: f64) -> Self {
        let f = 5000.0 * h as f64 / 256.0;
        let depth = f * ((hi[0] - lo[0]) / (fill * w as f64)).max((hi[1] - lo[1]) / (fill * h as f64));
        Self {
            focal: [f, f],
            principal: [w as f64 / 2.0, h as f64 / 2.0],
            offset: [-(lo[0] + hi[0]) / 2.0, -(lo[1] + hi[1]) / 2.0, depth - (lo[2] + hi[2]) / 2.0],
        }
    }

    /// Camera framing a template's rest mesh in 70% of an `h x w` image.
    pub fn for_template(template: &BodyTemplate, h: usize, w: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in template.vertices.data().chunks(3) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self::framing(h, w, lo, hi, 0.7)
    }

    /// Projects `[n, 3]` world points to `[n, 2]` pixels.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = self.project_var(&mut tape, v)?;
        Ok(tape.value(p).clone())
    }

    pub fn project_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.project(x, self.focal, self.principal, self.offset)
    }
}

/// Per-term weights of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub smplx: f64,
    pub kpt3d: f64,
    pub kpt2d: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smplx: 1.0,
            kpt3d: 1.0,
            kpt2d: 1.0,
            bbox: 1.0,
        }
    }
}

/// Supervision targets for one person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: SmplxParams,
    /// `[J, 3]` meters.
    pub kpt3d: Option<Tensor>,
    /// `[J, 2]` pixels.
    pub kpt2d: Option<Tensor>,
    pub visible: Vec<bool>,
    /// Left hand, right hand, face as `(cx, cy, w, h)` normalized.
    pub boxes: Option<[[f64; 4]; 3]>,
    /// `[V, 3]` meters.
    pub mesh: Option<Tensor>,
}

/// Mean-reduced term values (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub smplx: f64,
    pub kpt3d: f64,
    pub kpt2d: f64,
    pub bbox: f64,
}

pub struct LossOutput {
    pub total: Var,
    pub terms: LossBreakdown,
}

fn mean_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Weighted sum of mean-L1 terms: 182 parameters, 3D joints, visible
/// projected joints and the three component boxes. Terms with zero weight
/// are skipped entirely.
///
/// `params` is the flat `[182]` prediction; `boxes` is `[3, 4]`.
pub fn loss_total(
    tape: &mut Tape,
    template: &BodyTemplate,
    params: Var,
    boxes: Option<Var>,
    gt: &GroundTruth,
    cam: &CameraModel,
    w: &LossWeights,
) -> Result<LossOutput> {
    let mut terms = LossBreakdown::default();
    let mut parts: Vec<Var> = Vec::new();
    if w.smplx != 0.0 {
        let target = tape.constant(Tensor::new([SmplxParams::DIM], gt.params.to_vec())?);
        let p = tape.reshape(params, &[SmplxParams::DIM])?;
        let l = mean_l1(tape, p, target)?;
        terms.smplx = tape.value(l).item();
        parts.push(tape.scale(l, w.smplx)?);
    }
    if w.kpt3d != 0.0 || w.kpt2d != 0.0 {
        let pv = ParamVars::from_flat(tape, params)?;
        let joints = template.joints_vars(tape, &pv)?;
        if w.kpt3d != 0.0 {
            let target = gt.kpt3d.clone().ok_or(Error::MissingField("kpt3d"))?;
            let target = tape.constant(target);
            let l = mean_l1(tape, joints, target)?;
            terms.kpt3d = tape.value(l).item();
            parts.push(tape.scale(l, w.kpt3d)?);
        }
        if w.kpt2d != 0.0 {
            let target = gt.kpt2d.as_ref().ok_or(Error::MissingField("kpt2d"))?;
            let j = template.num_joints();
            if gt.visible.len() != j {
                return Err(Error::shape("loss_total visibility", &[gt.visible.len()], &[j]));
            }
            let vis: Vec<usize> = (0..j).filter(|&k| gt.visible[k]).collect();
            if !vis.is_empty() {
                let proj = cam.project_var(tape, joints)?;
                let index: Vec<usize> = vis.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
                let sel = tape.gather(proj, index.clone(), &[vis.len(), 2])?;
                let tgt = Tensor::new([vis.len(), 2], index.iter().map(|&i| target.data()[i]).collect())?;
                let tgt = tape.constant(tgt);
                let l = mean_l1(tape, sel, tgt)?;
                terms.kpt2d = tape.value(l).item();
                parts.push(tape.scale(l, w.kpt2d)?);
            }
        }
    }
    if w.bbox != 0.0 {
        let pb = boxes.ok_or(Error::MissingField("predicted boxes"))?;
        let gb = gt.boxes.ok_or(Error::MissingField("boxes"))?;
        let target = tape.constant(Tensor::new([3, 4], gb.iter().flatten().copied().collect())?);
        let pb = tape.reshape(pb, &[3, 4])?;
        let l = mean_l1(tape, pb, target)?;
        terms.bbox = tape.value(l).item();
        parts.push(tape.scale(l, w.bbox)?);
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &p in &parts[1.min(parts.len())..] {
        total = tape.add(total, p)?;
    }
    terms.total = tape.value(total).item();
    Ok(LossOutput { total, terms })
}
