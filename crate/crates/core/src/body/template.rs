//! Procedural toy template: tube rings around a 53-joint humanoid skeleton in
//! an A-pose, with a sphere head. The construction is mirror-symmetric about
//! the `x = 0` plane.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BodyTemplate, Component, HEAD, JAW_JOINT, LHAND_START, L_WRIST, NUM_BETAS, NUM_BODY_JOINTS, NUM_EXPRESSION,
    NUM_HAND_JOINTS, NUM_JOINTS, RHAND_START, R_WRIST,
};
use crate::error::{Error, Result};
use crate::tensor::geometry::ROOT_PARENT;
use crate::tensor::Tensor;

pub const MIN_VERTICES_PER_JOINT: usize = 4;

/// Vertex budgets (upper bounds) per component and the ring resolution.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemplateConfig {
    pub body_vertices: usize,
    /// Per hand.
    pub hand_vertices: usize,
    pub face_vertices: usize,
    /// Vertices per ring; even, at least 4.
    pub ring_size: usize,
    /// Hand size multiplier (1 is roughly anthropometric).
    pub hand_scale: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            body_vertices: 720,
            hand_vertices: 300,
            face_vertices: 150,
            ring_size: 6,
            hand_scale: 2.0,
        }
    }
}

impl TemplateConfig {
    /// Smallest budget that still gives each joint its own ring.
    pub fn small() -> Self {
        Self {
            body_vertices: 88,
            hand_vertices: 60,
            face_vertices: 12,
            ring_size: 4,
            hand_scale: 2.0,
        }
    }
}

const BODY_PARENTS: [usize; NUM_BODY_JOINTS] =
    [ROOT_PARENT, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];

/// Right-side body joints with their left counterparts.
const BODY_PAIRS: [(usize, usize); 8] = [(2, 1), (5, 4), (8, 7), (11, 10), (14, 13), (17, 16), (19, 18), (21, 20)];

fn parents() -> Vec<usize> {
    let mut p = BODY_PARENTS.to_vec();
    for (start, wrist) in [(LHAND_START, L_WRIST), (RHAND_START, R_WRIST)] {
        for f in 0..5 {
            let base = start + 3 * f;
            p.extend([wrist, base, base + 1]);
        }
    }
    p.push(HEAD);
    debug_assert_eq!(p.len(), NUM_JOINTS);
    p
}

pub(crate) fn joint_component(j: usize) -> Component {
    match j {
        _ if j < LHAND_START => Component::Body,
        _ if j < RHAND_START => Component::LeftHand,
        _ if j < JAW_JOINT => Component::RightHand,
        _ => Component::Face,
    }
}

/// Counterpart joint under `x -> -x`.
fn mirror_joint(j: usize) -> usize {
    if let Some(&(r, l)) = BODY_PAIRS.iter().find(|&&(r, l)| r == j || l == j) {
        return if j == r { l } else { r };
    }
    match joint_component(j) {
        Component::LeftHand => j + NUM_HAND_JOINTS,
        Component::RightHand => j - NUM_HAND_JOINTS,
        _ => j,
    }
}

/// Rest joint positions (meters) with the pelvis at the origin.
fn skeleton(hand_scale: f64) -> Vec<[f64; 3]> {
    let mut j = vec![[0.0; 3]; NUM_JOINTS];
    let centre: [(usize, [f64; 3]); 6] = [
        (0, [0.0, 0.0, 0.0]),
        (3, [0.0, -0.11, 0.0]),
        (6, [0.0, -0.24, 0.0]),
        (9, [0.0, -0.30, 0.0]),
        (12, [0.0, -0.50, 0.0]),
        (15, [0.0, -0.60, 0.0]),
    ];
    // Left side (+x); the right side is its mirror image.
    let left: [(usize, [f64; 3]); 6] = [
        (1, [0.09, 0.08, 0.0]),
        (4, [0.10, 0.48, 0.0]),
        (7, [0.10, 0.88, 0.0]),
        (10, [0.11, 0.94, -0.12]),
        (13, [0.07, -0.42, 0.0]),
        (16, [0.17, -0.44, 0.0]),
    ];
    for (k, p) in centre.into_iter().chain(left) {
        j[k] = p;
    }
    // A-pose: the arm and hand hang at ARM_DROP below the horizontal.
    let (sn, cs) = ARM_DROP.sin_cos();
    let turn = |d: [f64; 3]| [d[0] * cs - d[1] * sn, d[0] * sn + d[1] * cs, d[2]];
    let along = |a: [f64; 3], d: [f64; 3], s: f64| {
        let d = turn(d);
        [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
    };
    j[18] = along(j[16], [0.26, 0.0, 0.0], 1.0);
    j[20] = along(j[18], [0.25, 0.0, 0.0], 1.0);
    let s = hand_scale;
    let w = j[L_WRIST];
    let add = |a: [f64; 3], d: [f64; 3]| along(a, d, s);
    // SMPL-X finger order: index, middle, pinky, ring, thumb.
    for (f, dy) in [-0.03, -0.01, 0.03, 0.01].into_iter().enumerate() {
        let b = LHAND_START + 3 * f;
        j[b] = add(w, [0.09, dy, 0.0]);
        j[b + 1] = add(j[b], [0.04, 0.0, 0.0]);
        j[b + 2] = add(j[b + 1], [0.03, 0.0, 0.0]);
    }
    let b = LHAND_START + 12;
    j[b] = add(w, [0.03, -0.035, -0.02]);
    j[b + 1] = add(j[b], [0.025, -0.02, 0.0]);
    j[b + 2] = add(j[b + 1], [0.025, -0.01, 0.0]);
    j[JAW_JOINT] = [0.0, -0.55, -0.07];
    for k in 0..NUM_JOINTS {
        let m = mirror_joint(k);
        if m != k && joint_component(k) != Component::LeftHand && !BODY_PAIRS.iter().any(|&(_, l)| l == k) {
            j[k] = [-j[m][0], j[m][1], j[m][2]];
        }
    }
    j
}

fn ring_radius(j: usize, hand_scale: f64) -> f64 {
    match j {
        0 | 3 | 6 | 9 => 0.12,
        1 | 2 => 0.08,
        4 | 5 => 0.06,
        7 | 8 => 0.045,
        10 | 11 => 0.04,
        12 | 13 | 14 => 0.05,
        15 => 0.07,
        16 | 17 => 0.05,
        18 | 19 => 0.04,
        20 | 21 => 0.035,
        JAW_JOINT => 0.03,
        _ => 0.009 * hand_scale,
    }
}

const ARM_DROP: f64 = 40.0 * PI / 180.0;
const HEAD_RADIUS: f64 = 0.1;
const HEAD_CENTRE_OFFSET: [f64; 3] = [0.0, -0.05, 0.0];

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Orthonormal pair spanning the plane normal to `d`. Reflection-consistent:
/// mirroring `d` mirrors the pair up to sign.
fn ring_basis(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let d = unit(d);
    let reference = if d[2].abs() > 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let u = unit(cross(d, reference));
    let w = cross(d, u);
    (u, w)
}

struct Builder {
    n: usize,
    verts: Vec<[f64; 3]>,
    radial: Vec<[f64; 3]>,
    girth: Vec<f64>,
    labels: Vec<Component>,
    skin: Vec<Vec<(usize, f64)>>,
    faces: Vec<[u32; 3]>,
}

impl Builder {
    /// Appends a ring; returns the index of its first vertex.
    fn ring(&mut self, c: [f64; 3], d: [f64; 3], r: f64, label: Component, skin: &[(usize, f64)]) -> usize {
        let start = self.verts.len();
        let (u, w) = ring_basis(d);
        for k in 0..self.n {
            let a = 2.0 * PI * k as f64 / self.n as f64;
            let (s, co) = a.sin_cos();
            let dir = [0, 1, 2].map(|i| co * u[i] + s * w[i]);
            self.verts.push([0, 1, 2].map(|i| c[i] + r * dir[i]));
            self.radial.push(dir);
            self.girth.push(r);
            self.labels.push(label);
            self.skin.push(skin.to_vec());
        }
        start
    }

    fn bridge(&mut self, a: usize, b: usize) {
        let n = self.n;
        for k in 0..n {
            let k1 = (k + 1) % n;
            let (a0, a1, b0, b1) = ((a + k) as u32, (a + k1) as u32, (b + k) as u32, (b + k1) as u32);
            self.faces.push([a0, b0, a1]);
            self.faces.push([a1, b0, b1]);
        }
    }
}

/// Deterministic per-feature RNG shared by mirror partners.
fn feature_rng(seed: u64, key: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(key);
    r
}

impl BodyTemplate {
    /// Builds the procedural template. Budgets are upper bounds: every joint
    /// gets one ring, leaf joints get a tip ring, and remaining vertices are
    /// spent on extra rings along the longest bones.
    pub fn toy(cfg: &TemplateConfig, seed: u64) -> Result<Self> {
        const OP: &str = "make_toy_template";
        let n = cfg.ring_size;
        if n < MIN_VERTICES_PER_JOINT || n % 2 != 0 {
            return Err(Error::invalid(OP, format!("ring_size {n} must be even and at least 4")));
        }
        if !(cfg.hand_scale > 0.0 && cfg.hand_scale.is_finite()) {
            return Err(Error::invalid(OP, "hand_scale must be positive"));
        }
        let parents = parents();
        let joints = skeleton(cfg.hand_scale);
        let mut children = vec![0usize; NUM_JOINTS];
        for &p in &parents[1..] {
            children[p] += 1;
        }
        let count = |c: Component| (0..NUM_JOINTS).filter(|&j| joint_component(j) == c).count();
        let budget = |c: Component| match c {
            Component::Body => cfg.body_vertices,
            Component::LeftHand | Component::RightHand => cfg.hand_vertices,
            Component::Face => cfg.face_vertices,
        };
        for c in Component::ALL {
            // The face also needs at least one head-sphere ring.
            let min = (count(c) + usize::from(c == Component::Face)) * n;
            if budget(c) < min {
                return Err(Error::invalid(
                    OP,
                    format!("{c:?} budget {} below minimum {min} ({n} vertices per joint ring)", budget(c)),
                ));
            }
        }

        // Ring allocation per component, in vertex-ring units.
        let mut tips = vec![false; NUM_JOINTS];
        let mut mids = vec![0usize; NUM_JOINTS];
        let mut head_rings = 1;
        for c in Component::ALL {
            let mut free = budget(c) / n - count(c) - usize::from(c == Component::Face);
            // Tips for leaves (mirror partners get identical treatment
            // because the left and right hand budgets are equal).
            for j in (0..NUM_JOINTS).filter(|&j| joint_component(j) == c && children[j] == 0) {
                if free > 0 {
                    tips[j] = true;
                    free -= 1;
                }
            }
            if c == Component::Face {
                head_rings += free;
                continue;
            }
            let bones: Vec<usize> = (1..NUM_JOINTS).filter(|&j| joint_component(j) == c).collect();
            // Body pairs receive rings together, allocated via the lower index.
            while free > 0 {
                let best = bones
                    .iter()
                    .copied()
                    .filter(|&j| {
                        let m = mirror_joint(j);
                        c != Component::Body || m == j || (m > j && free >= 2)
                    })
                    .max_by(|&a, &b| {
                        let ka = norm(sub(joints[a], joints[parents[a]])) / (mids[a] + 1) as f64;
                        let kb = norm(sub(joints[b], joints[parents[b]])) / (mids[b] + 1) as f64;
                        ka.total_cmp(&kb).then(b.cmp(&a))
                    });
                let Some(j) = best else { break };
                mids[j] += 1;
                free -= 1;
                let m = mirror_joint(j);
                if c == Component::Body && m != j {
                    mids[m] += 1;
                    free -= 1;
                }
            }
        }

        let mut b = Builder {
            n,
            verts: Vec::new(),
            radial: Vec::new(),
            girth: Vec::new(),
            labels: Vec::new(),
            skin: Vec::new(),
            faces: Vec::new(),
        };
        let mut joint_ring = vec![0usize; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let c = joint_component(j);
            let mut rng = feature_rng(seed, mirror_joint(j).min(j) as u64);
            let jitter = |rng: &mut ChaCha8Rng| 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
            let r_j = ring_radius(j, cfg.hand_scale) * jitter(&mut rng);
            if j == 0 {
                joint_ring[0] = b.ring(joints[0], [0.0, 1.0, 0.0], r_j, c, &[(0, 1.0)]);
                continue;
            }
            let p = parents[j];
            let d = sub(joints[j], joints[p]);
            let r_p = ring_radius(p, cfg.hand_scale);
            let mut prev = joint_ring[p];
            for i in 0..mids[j] {
                let s = (i + 1) as f64 / (mids[j] + 1) as f64;
                let centre = [0, 1, 2].map(|a| joints[p][a] + s * d[a]);
                let r = (r_p + s * (r_j - r_p)) * jitter(&mut rng);
                let ring = b.ring(centre, d, r, c, &[(p, 1.0)]);
                b.bridge(prev, ring);
                prev = ring;
            }
            joint_ring[j] = b.ring(joints[j], d, r_j, c, &[(p, 0.5), (j, 0.5)]);
            b.bridge(prev, joint_ring[j]);
            if tips[j] {
                let len = 0.5 * norm(d);
                let dir = unit(d);
                let centre = [0, 1, 2].map(|a| joints[j][a] + len * dir[a]);
                let tip = b.ring(centre, d, 0.6 * r_j, c, &[(j, 1.0)]);
                b.bridge(joint_ring[j], tip);
            }
        }
        // Head sphere: latitude rings about the vertical axis, bottom to top.
        let hc = [0, 1, 2].map(|a| joints[HEAD][a] + HEAD_CENTRE_OFFSET[a]);
        let mut prev = joint_ring[HEAD];
        for i in 0..head_rings {
            let polar = PI * (i + 1) as f64 / (head_rings + 1) as f64;
            let (s, co) = polar.sin_cos();
            let centre = [hc[0], hc[1] + HEAD_RADIUS * co, hc[2]];
            let start = b.verts.len();
            b.ring(centre, [0.0, 1.0, 0.0], HEAD_RADIUS * s, Component::Face, &[(HEAD, 1.0)]);
            for k in 0..n {
                let v = b.verts[start + k];
                b.radial[start + k] = unit(sub(v, hc));
                b.girth[start + k] = HEAD_RADIUS;
            }
            b.bridge(prev, start);
            prev = start;
        }

        let v_count = b.verts.len();
        let mut skin = vec![0.0; v_count * NUM_JOINTS];
        for (v, row) in b.skin.iter().enumerate() {
            for &(j, w) in row {
                skin[v * NUM_JOINTS + j] += w;
            }
        }
        for j in 0..NUM_JOINTS {
            let skinned = (0..v_count).filter(|&v| skin[v * NUM_JOINTS + j] > 0.0).count();
            if skinned < MIN_VERTICES_PER_JOINT {
                return Err(Error::invalid(OP, format!("joint {j} has only {skinned} skinned vertices")));
            }
        }
        let mut regressor = vec![0.0; NUM_JOINTS * v_count];
        for j in 0..NUM_JOINTS {
            for k in 0..n {
                regressor[j * v_count + joint_ring[j] + k] = 1.0 / n as f64;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0d7);
        let mut shape_dirs = vec![0.0; 3 * v_count * NUM_BETAS];
        let fields: Vec<[f64; 4]> = (2..NUM_BETAS).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        for (v, p) in b.verts.iter().enumerate() {
            let row = |a: usize, k: usize| (3 * v + a) * NUM_BETAS + k;
            for a in 0..3 {
                shape_dirs[row(a, 0)] = 0.08 * p[a];
                shape_dirs[row(a, 1)] = 0.3 * b.girth[v] * b.radial[v][a];
            }
            for (i, f) in fields.iter().enumerate() {
                let phase = |o: f64| (4.0 * f[0] * p[1] + 8.0 * f[1] * p[0] * p[0] + 4.0 * f[2] * p[2] + f[3] + o).sin();
                shape_dirs[row(0, i + 2)] = 0.05 * p[0] * phase(0.0);
                shape_dirs[row(1, i + 2)] = 0.01 * phase(1.0);
                shape_dirs[row(2, i + 2)] = 0.01 * phase(2.0);
            }
        }
        let mut expr_dirs = vec![0.0; 3 * v_count * NUM_EXPRESSION];
        let coeffs: Vec<[f64; 4]> =
            (0..NUM_EXPRESSION).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        for (v, p) in b.verts.iter().enumerate() {
            if b.labels[v] != Component::Face {
                continue;
            }
            let q = sub(*p, hc).map(|x| x / HEAD_RADIUS);
            for (k, f) in coeffs.iter().enumerate() {
                let phase = |o: f64| (3.0 * f[0] * q[1] + 2.0 * f[1] * q[0] * q[0] + 3.0 * f[2] * q[2] + f[3] + o).sin();
                let row = |a: usize| (3 * v + a) * NUM_EXPRESSION + k;
                expr_dirs[row(0)] = 0.01 * q[0] * phase(0.0);
                expr_dirs[row(1)] = 0.01 * phase(1.0);
                expr_dirs[row(2)] = 0.01 * phase(2.0);
            }
        }

        let vertices = Tensor::new([v_count, 3], b.verts.iter().flatten().copied().collect())?;
        BodyTemplate::assemble(RawTemplate {
            vertices,
            faces: b.faces,
            shape_dirs: Tensor::new([3 * v_count, NUM_BETAS], shape_dirs)?,
            expr_dirs: Tensor::new([3 * v_count, NUM_EXPRESSION], expr_dirs)?,
            joint_regressor: Tensor::new([NUM_JOINTS, v_count], regressor)?,
            skin_weights: Tensor::new([v_count, NUM_JOINTS], skin)?,
            parents,
            vertex_labels: b.labels,
        })
    }
}

pub(crate) struct RawTemplate {
    pub vertices: Tensor,
    pub faces: Vec<[u32; 3]>,
    pub shape_dirs: Tensor,
    pub expr_dirs: Tensor,
    pub joint_regressor: Tensor,
    pub skin_weights: Tensor,
    pub parents: Vec<usize>,
    pub vertex_labels: Vec<Component>,
}

impl BodyTemplate {
    /// Derives rest joints and joint-level blendshapes, then validates.
    pub(crate) fn assemble(raw: RawTemplate) -> Result<Self> {
        let (j, v) = (raw.joint_regressor.shape()[0], raw.vertices.shape()[0]);
        if raw.joint_regressor.shape() != [j, v] || raw.shape_dirs.shape() != [3 * v, NUM_BETAS] {
            return Err(Error::Format("regressor or blendshape dimensions".into()));
        }
        if raw.expr_dirs.shape() != [3 * v, NUM_EXPRESSION] {
            return Err(Error::Format("expression blendshape dimensions".into()));
        }
        let rest_joints = regress(&raw.joint_regressor, &raw.vertices);
        let k = NUM_BETAS + NUM_EXPRESSION;
        let mut jd = vec![0.0; 3 * j * k];
        let reg = raw.joint_regressor.data();
        for r in 0..j {
            for (vi, &w) in reg[r * v..(r + 1) * v].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    let dst = &mut jd[(3 * r + a) * k..(3 * r + a + 1) * k];
                    let row = 3 * vi + a;
                    let sd = &raw.shape_dirs.data()[row * NUM_BETAS..(row + 1) * NUM_BETAS];
                    let ed = &raw.expr_dirs.data()[row * NUM_EXPRESSION..(row + 1) * NUM_EXPRESSION];
                    for (d, s) in dst.iter_mut().zip(sd.iter().chain(ed)) {
                        *d += w * s;
                    }
                }
            }
        }
        let tpl = BodyTemplate {
            vertices: Arc::new(raw.vertices),
            faces: raw.faces,
            shape_dirs: Arc::new(raw.shape_dirs),
            expr_dirs: Arc::new(raw.expr_dirs),
            joint_regressor: Arc::new(raw.joint_regressor),
            skin_weights: Arc::new(raw.skin_weights),
            parents: raw.parents.into(),
            rest_joints: rest_joints.clone(),
            vertex_labels: raw.vertex_labels,
            rest_joints_shared: Arc::new(rest_joints),
            joint_dirs: Arc::new(Tensor::new([3 * j, k], jd)?),
        };
        tpl.validate()?;
        Ok(tpl)
    }
}

/// `regressor [J, V] * vertices [V, 3]`.
pub(crate) fn regress(regressor: &Tensor, vertices: &Tensor) -> Tensor {
    let (j, v) = (regressor.shape()[0], regressor.shape()[1]);
    Tensor::from_fn([j, 3], |i| {
        let (r, a) = (i / 3, i % 3);
        (0..v).map(|k| regressor.data()[r * v + k] * vertices.data()[3 * k + a]).sum()
    })
}
