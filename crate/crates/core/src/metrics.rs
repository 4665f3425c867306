//! Evaluation: similarity (Procrustes) alignment, mesh/joint errors in
//! millimeters, detection F1 and F1-normalized errors.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, Component};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y ≈ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub s: f64,
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    /// Rank-deficient cross-covariance or zero source variance.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.s * (0..3).map(|k| self.r[i][k] * p[k]).sum::<f64>() + self.t[i])
    }
}

fn centroid(x: &[[f64; 3]]) -> Vector3<f64> {
    x.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(*p)) / x.len() as f64
}

/// Least-squares similarity transform mapping `x` onto `y` (Umeyama).
/// The smallest singular direction is sign-corrected so `det R = +1`.
pub fn procrustes_align(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<Similarity> {
    const OP: &str = "procrustes_align";
    if x.len() != y.len() {
        return Err(Error::shape(OP, &[x.len(), 3], &[y.len(), 3]));
    }
    if x.len() < 3 {
        return Err(Error::invalid(OP, format!("need at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (centroid(x), centroid(y));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, q) in x.iter().zip(y) {
        let a = Vector3::from(*p) - mx;
        let b = Vector3::from(*q) - my;
        cov += b * a.transpose();
        var_x += a.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // nalgebra sorts singular values in descending order.
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale_ref = d[0].max(f64::MIN_POSITIVE);
    let degenerate = var_x <= 1e-300 || d[1] <= 1e-12 * scale_ref;
    let s = if var_x > 1e-300 { (d[0] + d[1] + sign[(2, 2)] * d[2]) / var_x } else { 1.0 };
    let t = my - s * r * mx;
    Ok(Similarity {
        s,
        r: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        t: [t[0], t[1], t[2]],
        degenerate,
    })
}

fn rows(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn mean_dist(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum::<f64>()
        / a.len() as f64
}

/// Mean Euclidean error and the same after similarity alignment of `pred`
/// onto `gt` (meters). The aligned error is the best of the Umeyama
/// solution, the identity and the centroid shift. All three are feasible
/// alignments, so the result never exceeds the raw error, and the shift keeps
/// nearly collinear point sets exact under pure translation.
pub fn aligned_errors(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("aligned_errors", &[pred.len(), 3], &[gt.len(), 3]));
    }
    let raw = mean_dist(pred, gt);
    if pred.len() < 3 {
        return Ok((raw, raw));
    }
    let sim = procrustes_align(pred, gt)?;
    let aligned: Vec<[f64; 3]> = pred.iter().map(|&p| sim.apply(p)).collect();
    let (mp, mg) = (centroid(pred), centroid(gt));
    let shifted: Vec<[f64; 3]> = pred.iter().map(|p| std::array::from_fn(|i| p[i] - mp[i] + mg[i])).collect();
    Ok((raw, mean_dist(&aligned, gt).min(mean_dist(&shifted, gt)).min(raw)))
}

/// Millimeter errors for one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub mpvpe: f64,
    pub pa_mpvpe: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

impl ErrorSet {
    fn scaled(self, k: f64) -> Self {
        Self {
            mpvpe: self.mpvpe * k,
            pa_mpvpe: self.pa_mpvpe * k,
            mpjpe: self.mpjpe * k,
            pa_mpjpe: self.pa_mpjpe * k,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            mpvpe: self.mpvpe + o.mpvpe,
            pa_mpvpe: self.pa_mpvpe + o.pa_mpvpe,
            mpjpe: self.mpjpe + o.mpjpe,
            pa_mpjpe: self.pa_mpjpe + o.pa_mpjpe,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeshErrors {
    pub all: ErrorSet,
    pub body: ErrorSet,
    /// Mean of left and right hand errors.
    pub hands: ErrorSet,
    pub face: ErrorSet,
}

fn subset(x: &[[f64; 3]], idx: &[usize]) -> Vec<[f64; 3]> {
    idx.iter().map(|&i| x[i]).collect()
}

fn component_errors(
    pv: &[[f64; 3]],
    gv: &[[f64; 3]],
    pj: &[[f64; 3]],
    gj: &[[f64; 3]],
    verts: &[usize],
    joints: &[usize],
) -> Result<ErrorSet> {
    if verts.is_empty() || joints.is_empty() {
        return Err(Error::invalid("mesh_errors", "empty component mask"));
    }
    let (v, pa_v) = aligned_errors(&subset(pv, verts), &subset(gv, verts))?;
    let (j, pa_j) = aligned_errors(&subset(pj, joints), &subset(gj, joints))?;
    Ok(ErrorSet {
        mpvpe: v,
        pa_mpvpe: pa_v,
        mpjpe: j,
        pa_mpjpe: pa_j,
    }
    .scaled(1000.0))
}

/// Per-component errors in millimeters. PA variants align each component
/// separately.
pub fn mesh_errors(
    pred_v: &Tensor,
    gt_v: &Tensor,
    pred_j: &Tensor,
    gt_j: &Tensor,
    template: &BodyTemplate,
) -> Result<MeshErrors> {
    if pred_v.shape() != gt_v.shape() || pred_v.shape() != [template.num_vertices(), 3] {
        return Err(Error::shape("mesh_errors", pred_v.shape(), gt_v.shape()));
    }
    if pred_j.shape() != gt_j.shape() || pred_j.shape() != [template.num_joints(), 3] {
        return Err(Error::shape("mesh_errors", pred_j.shape(), gt_j.shape()));
    }
    let (pv, gv, pj, gj) = (rows(pred_v), rows(gt_v), rows(pred_j), rows(gt_j));
    let part = |c: Component| {
        component_errors(&pv, &gv, &pj, &gj, &template.vertex_mask(c), &BodyTemplate::joint_mask(c))
    };
    let all_v: Vec<usize> = (0..pv.len()).collect();
    let all_j: Vec<usize> = (0..pj.len()).collect();
    Ok(MeshErrors {
        all: component_errors(&pv, &gv, &pj, &gj, &all_v, &all_j)?,
        body: part(Component::Body)?,
        hands: part(Component::LeftHand)?.plus(part(Component::RightHand)?).scaled(0.5),
        face: part(Component::Face)?,
    })
}

/// Detection matching outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct F1Match {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// `(pred, gt)` index pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching of root positions within `radius`: candidate
/// pairs are taken in order of distance, ties broken by `(pred, gt)` index.
pub fn f1_match(pred: &[[f64; 3]], gt: &[[f64; 3]], radius: f64) -> Result<F1Match> {
    if !(radius > 0.0) {
        return Err(Error::invalid("f1_match", format!("radius {radius} must be positive")));
    }
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = mean_dist(&[*p], &[*g]);
            if d <= radius {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    let (precision, recall) = counts_to_pr(pairs.len(), pred.len(), gt.len());
    Ok(F1Match {
        f1: harmonic(precision, recall),
        precision,
        recall,
        pairs,
    })
}

fn counts_to_pr(matched: usize, n_pred: usize, n_gt: usize) -> (f64, f64) {
    let p = if n_pred > 0 { matched as f64 / n_pred as f64 } else { 0.0 };
    let r = if n_gt > 0 { matched as f64 / n_gt as f64 } else { 0.0 };
    (p, r)
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// F1-normalized error; `None` when `f1` is not in `(0, 1]`.
pub fn nmve(error_mm: f64, f1: f64) -> Option<f64> {
    (f1 > 0.0 && f1 <= 1.0).then(|| error_mm / f1)
}

/// Mean absolute parameter error per group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors {
    /// `{theta_body, beta, t}`.
    pub body: f64,
    /// Both hands' rotations.
    pub hands: f64,
    /// `{theta_jaw, phi}`.
    pub face: f64,
}

impl ParamErrors {
    pub fn between(pred: &crate::body::SmplxParams, gt: &crate::body::SmplxParams) -> Self {
        use crate::body::SmplxParams as P;
        let (a, b) = (pred.to_vec(), gt.to_vec());
        let l1 = |r: std::ops::Range<usize>| r.clone().map(|i| (a[i] - b[i]).abs()).sum::<f64>() / r.len() as f64;
        let hand_end = P::BODY_DIM + 2 * P::HAND_DIM;
        Self {
            body: l1(0..P::BODY_DIM),
            hands: l1(P::BODY_DIM..hand_end),
            face: l1(hand_end..P::DIM),
        }
    }
}

/// Aggregated evaluation results. Errors are in millimeters; `nmve`/`nmje`
/// are `null` when F1 is zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub all: ErrorSet,
    pub body: ErrorSet,
    pub hands: ErrorSet,
    pub face: ErrorSet,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub nmve: Option<f64>,
    pub nmje: Option<f64>,
    pub param_l1: ParamErrors,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Order-fixed accumulator over evaluated samples.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    n: usize,
    sum: MeshErrors,
    params: ParamErrors,
    matched: usize,
    n_pred: usize,
    n_gt: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, e: &MeshErrors, p: &ParamErrors, det: &F1Match, n_pred: usize, n_gt: usize) {
        self.n += 1;
        self.sum.all = self.sum.all.plus(e.all);
        self.sum.body = self.sum.body.plus(e.body);
        self.sum.hands = self.sum.hands.plus(e.hands);
        self.sum.face = self.sum.face.plus(e.face);
        self.params.body += p.body;
        self.params.hands += p.hands;
        self.params.face += p.face;
        self.matched += det.pairs.len();
        self.n_pred += n_pred;
        self.n_gt += n_gt;
    }

    pub fn finish(&self) -> MetricsReport {
        let k = if self.n > 0 { 1.0 / self.n as f64 } else { 0.0 };
        let (precision, recall) = counts_to_pr(self.matched, self.n_pred, self.n_gt);
        let f1 = harmonic(precision, recall);
        let all = self.sum.all.scaled(k);
        MetricsReport {
            samples: self.n,
            all,
            body: self.sum.body.scaled(k),
            hands: self.sum.hands.scaled(k),
            face: self.sum.face.scaled(k),
            f1,
            precision,
            recall,
            nmve: nmve(all.mpvpe, f1),
            nmje: nmve(all.mpjpe, f1),
            param_l1: ParamErrors {
                body: self.params.body * k,
                hands: self.params.hands * k,
                face: self.params.face * k,
            },
        }
    }
}
