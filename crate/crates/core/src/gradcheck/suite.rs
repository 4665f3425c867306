//! Registered finite-difference suites, one per differentiable operation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check, rng, uniform, weighted_sum, FD_STEP};
use crate::body::{BodyTemplate, SmplxParams, TemplateConfig};
use crate::error::{Error, Result};
use crate::loss::{loss_total, CameraModel, GroundTruth, LossWeights};
use crate::model::decoder;
use crate::tensor::{OpKind, Tape, Tensor};

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Random instances per operation.
pub const INSTANCES: usize = 10;

/// Names accepted by [`run`], in report order.
pub const OPS: [&str; 14] = [
    "matmul",
    "layer_norm",
    "softmax",
    "gelu",
    "conv_transpose2d",
    "bilinear_sample",
    "roi_align",
    "soft_argmax",
    "deform_attn",
    "rodrigues",
    "forward_kinematics",
    "lbs",
    "projection",
    "loss_total",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }
}

/// Runs the named suites (all of them for an empty list). `fault` corrupts
/// the backward pass of one op kind on every checked tape.
pub fn run(ops: &[&str], fault: Option<OpKind>, seed: u64) -> Result<SuiteReport> {
    let selected: Vec<&str> = if ops.is_empty() { OPS.to_vec() } else { ops.to_vec() };
    if let Some(bad) = selected.iter().find(|o| !OPS.contains(o)) {
        return Err(Error::invalid("gradcheck", format!("unknown op {bad}; known: {}", OPS.join(", "))));
    }
    let mut fixtures = Fixtures::default();
    let mut reports = Vec::with_capacity(selected.len());
    for (k, name) in OPS.iter().enumerate().filter(|(_, o)| selected.contains(o)) {
        let mut worst: f64 = 0.0;
        for i in 0..INSTANCES {
            let s = seed.wrapping_mul(1_000_003).wrapping_add((k * 100 + i) as u64);
            let e = instance(name, s, fault, &mut fixtures)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        reports.push(OpReport {
            op: name.to_string(),
            instances: INSTANCES,
            max_rel_err: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(SuiteReport {
        step: FD_STEP,
        tolerance: TOLERANCE,
        ops: reports,
    })
}

#[derive(Default)]
struct Fixtures {
    template: Option<BodyTemplate>,
}

impl Fixtures {
    fn template(&mut self) -> Result<&BodyTemplate> {
        if self.template.is_none() {
            self.template = Some(BodyTemplate::toy(&TemplateConfig::small(), 1)?);
        }
        Ok(self.template.as_ref().expect("just set"))
    }
}

/// True when every coordinate on an axis longer than one cell keeps
/// `margin` from the integer lattice, so no difference stencil crosses a
/// kink of the bilinear interpolant.
fn clear_of_edges(points: &Tensor, h: usize, w: usize, margin: f64) -> bool {
    points.data().chunks(2).all(|p| {
        (w == 1 || (p[0] - p[0].round()).abs() > margin) && (h == 1 || (p[1] - p[1].round()).abs() > margin)
    })
}

fn instance(name: &str, seed: u64, fault: Option<OpKind>, fx: &mut Fixtures) -> Result<f64> {
    let mut r = rng(seed);
    let res = match name {
        "matmul" => {
            let a = uniform(&mut r, &[4, 5], -1.0, 1.0);
            let b = uniform(&mut r, &[5, 3], -1.0, 1.0);
            check(&[a, b], FD_STEP, fault, |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let q = t.matmul_t(v[0], p, true, false)?;
                let s = t.sum(p)?;
                let w = weighted_sum(t, q, seed)?;
                t.add(s, w)
            })?
        }
        "layer_norm" => {
            let x = uniform(&mut r, &[3, 6], -2.0, 2.0);
            let g = uniform(&mut r, &[6], 0.5, 1.5);
            let b = uniform(&mut r, &[6], -0.5, 0.5);
            check(&[x, g, b], FD_STEP, fault, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(t, y, seed)
            })?
        }
        "softmax" => {
            let x = uniform(&mut r, &[4, 5], -3.0, 3.0);
            let axis = (seed % 2) as usize;
            check(&[x], FD_STEP, fault, |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, seed)
            })?
        }
        "gelu" => {
            let x = uniform(&mut r, &[3, 7], -4.0, 4.0);
            check(&[x], FD_STEP, fault, |t, v| {
                let y = t.gelu(v[0])?;
                weighted_sum(t, y, seed)
            })?
        }
        "conv_transpose2d" => {
            let stride = [1, 2, 4][(seed % 3) as usize];
            let k = stride + 2;
            let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            let w = uniform(&mut r, &[2, 3, k, k], -1.0, 1.0);
            check(&[x, w], FD_STEP, fault, |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], stride)?;
                weighted_sum(t, y, seed)
            })?
        }
        "bilinear_sample" => {
            let (h, w) = (r.gen_range(1..6), r.gen_range(2..7));
            let map = uniform(&mut r, &[3, h, w], -1.0, 1.0);
            let pts = loop {
                let p = uniform(&mut r, &[6, 2], -1.0, w.max(h) as f64);
                if clear_of_edges(&p, h, w, 0.02) {
                    break p;
                }
            };
            check(&[map, pts], FD_STEP, fault, |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                weighted_sum(t, y, seed)
            })?
        }
        "roi_align" => {
            let (h, w) = (r.gen_range(4..9), r.gen_range(4..9));
            let mirror = seed % 2 == 1;
            let map = uniform(&mut r, &[2, h, w], -1.0, 1.0);
            let boxv = loop {
                let b = Tensor::new(
                    [4],
                    vec![r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.2..0.6), r.gen_range(0.2..0.6)],
                )?;
                let mut t = Tape::new();
                let bv = t.constant(b.clone());
                let g = t.roi_grid(bv, 3, 2, h, w, mirror)?;
                if clear_of_edges(t.value(g), h, w, 0.05) {
                    break b;
                }
            };
            check(&[map, boxv], FD_STEP, fault, |t, v| {
                let y = t.roi_align(v[0], v[1], 3, 2, mirror)?;
                weighted_sum(t, y, seed)
            })?
        }
        "soft_argmax" => {
            let logits = uniform(&mut r, &[12, 5], -2.0, 2.0);
            check(&[logits], FD_STEP, fault, |t, v| {
                let p = decoder::soft_argmax(t, v[0], 3, 4)?;
                weighted_sum(t, p, seed)
            })?
        }
        "deform_attn" => {
            let heads = 1 + (seed % 2) as usize;
            let levels = 1 + (seed % 3) as usize;
            let points = [1, 2, 4][((seed / 3) % 3) as usize];
            let (k, d) = (3, 2);
            let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (r.gen_range(1..5), r.gen_range(1..5))).collect();
            let n = heads * levels * points;
            let (refs, offsets) = loop {
                let refs = uniform(&mut r, &[k, 2], 0.0, 1.0);
                let off = uniform(&mut r, &[k, 2 * n], -1.5, 1.5);
                let mut clear = true;
                for q in 0..k {
                    for o in 0..n {
                        let (lh, lw) = shapes[(o / points) % levels];
                        let p = Tensor::new(
                            [1, 2],
                            vec![
                                refs.at(&[q, 0]) * lw as f64 - 0.5 + off.at(&[q, 2 * o]),
                                refs.at(&[q, 1]) * lh as f64 - 0.5 + off.at(&[q, 2 * o + 1]),
                            ],
                        )?;
                        clear &= clear_of_edges(&p, lh, lw, 0.02);
                    }
                }
                if clear {
                    break (refs, off);
                }
            };
            let attn = uniform(&mut r, &[k, n], 0.0, 1.0);
            let mut inputs = vec![refs, offsets, attn];
            inputs.extend(shapes.iter().map(|&(h, w)| uniform(&mut r, &[h * w, heads * d], -1.0, 1.0)));
            check(&inputs, FD_STEP, fault, |t, v| {
                let y = t.ms_deform_attn(&v[3..], &shapes, v[0], v[1], v[2], heads, points)?;
                weighted_sum(t, y, seed)
            })?
        }
        "rodrigues" => {
            let mut aa = uniform(&mut r, &[5, 3], -3.0, 3.0);
            // One near-identity row exercises the small-angle branch.
            for x in &mut aa.data_mut()[..3] {
                *x *= 1e-2;
            }
            check(&[aa], FD_STEP, fault, |t, v| {
                let y = t.rodrigues(v[0])?;
                weighted_sum(t, y, seed)
            })?
        }
        "forward_kinematics" => {
            let tpl = fx.template()?;
            let aa = uniform(&mut r, &[tpl.num_joints(), 3], -1.5, 1.5);
            let parents = tpl.parents.clone();
            check(&[aa, tpl.rest_joints.clone()], FD_STEP, fault, |t, v| {
                let rots = t.rodrigues(v[0])?;
                let g = t.forward_kinematics(v[1], rots, parents.clone())?;
                weighted_sum(t, g, seed)
            })?
        }
        "lbs" => {
            let tpl = fx.template()?;
            let j = tpl.num_joints();
            let tr = uniform(&mut r, &[j, 3, 4], -1.0, 1.0);
            let rest = tpl.rest_joints.clone();
            let weights = tpl.skin_weights.clone();
            check(&[(*tpl.vertices).clone(), tr, rest], FD_STEP, fault, |t, v| {
                let y = t.lbs(v[0], v[1], v[2], weights.clone())?;
                weighted_sum(t, y, seed)
            })?
        }
        "projection" => {
            let mut x = uniform(&mut r, &[6, 3], -0.5, 0.5);
            for i in 0..6 {
                x.data_mut()[3 * i + 2] += 3.0;
            }
            check(&[x], FD_STEP, fault, |t, v| {
                let y = t.project(v[0], [500.0, 520.0], [24.0, 32.0], [0.0, 0.1, 1.0])?;
                weighted_sum(t, y, seed)
            })?
        }
        "loss_total" => {
            let tpl = fx.template()?.clone();
            let cam = CameraModel::for_template(&tpl, 64, 48);
            let (pred, boxes, gt) = loss_instance(&tpl, &cam, &mut r)?;
            check(&[pred, boxes], FD_STEP, fault, |t, v| {
                Ok(loss_total(t, &tpl, v[0], Some(v[1]), &gt, &cam, &LossWeights::default())?.total)
            })?
        }
        _ => return Err(Error::invalid("gradcheck", format!("unknown op {name}"))),
    };
    Ok(res.max_rel_err)
}

/// Prediction, boxes and targets whose L1 residuals all stay clear of zero.
fn loss_instance(tpl: &BodyTemplate, cam: &CameraModel, r: &mut impl Rng) -> Result<(Tensor, Tensor, GroundTruth)> {
    loop {
        let gt_p: Vec<f64> = (0..SmplxParams::DIM).map(|_| r.gen_range(-0.5..0.5)).collect();
        let gt_p = SmplxParams::from_slice(&gt_p)?;
        let m = tpl.forward(&gt_p)?;
        let kpt2d = cam.project(&m.joints)?;
        let mut visible = vec![true; tpl.num_joints()];
        let hidden = r.gen_range(0..visible.len());
        visible[hidden] = false;
        let pred: Vec<f64> = gt_p
            .to_vec()
            .iter()
            .map(|x| x + if r.gen_bool(0.5) { 0.3 } else { -0.3 } + r.gen_range(-0.05..0.05))
            .collect();
        let pm = tpl.forward(&SmplxParams::from_slice(&pred)?)?;
        let p2 = cam.project(&pm.joints)?;
        let min3 = pm.joints.data().iter().zip(m.joints.data()).map(|(a, b)| (a - b).abs()).fold(f64::MAX, f64::min);
        let min2 = p2.data().iter().zip(kpt2d.data()).map(|(a, b)| (a - b).abs()).fold(f64::MAX, f64::min);
        if min3 < 1e-2 || min2 < 0.5 {
            continue;
        }
        let gt_boxes = [[0.3, 0.4, 0.1, 0.1], [0.7, 0.4, 0.1, 0.1], [0.5, 0.2, 0.15, 0.15]];
        let boxes: Vec<f64> = gt_boxes.iter().flatten().map(|x| x + r.gen_range(0.05..0.2)).collect();
        let gt = GroundTruth {
            params: gt_p,
            kpt3d: Some(m.joints),
            kpt2d: Some(kpt2d),
            visible,
            boxes: Some(gt_boxes),
            mesh: Some(m.vertices),
        };
        return Ok((Tensor::new([SmplxParams::DIM], pred)?, Tensor::new([3, 4], boxes)?, gt));
    }
}
