//! SMPL-X-style parametric body: blendshapes, axis-angle kinematic tree and
//! linear blend skinning.
//!
//! Joint layout (53 joints): `0..22` body (0 is the pelvis/root, rotated by
//! the global orientation), `22..37` left hand, `37..52` right hand, `52`
//! jaw. Coordinates follow the camera convention: `x` right, `y` down, `z`
//! away from the camera; the rest pose faces the camera, so the body's left
//! side is at `+x`.

mod io;
mod params;
mod template;

use std::sync::Arc;

pub use io::{parse_obj, read_obj, write_obj};
pub use params::{mirror_axis_angle, ParamVars, SmplxParams};
pub use template::{TemplateConfig, MIN_VERTICES_PER_JOINT};

pub use crate::tensor::geometry::rodrigues_matrix as rodrigues;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_BODY_JOINTS: usize = 22;
pub const NUM_HAND_JOINTS: usize = 15;
pub const NUM_JOINTS: usize = NUM_BODY_JOINTS + 2 * NUM_HAND_JOINTS + 1;
pub const NUM_BETAS: usize = 10;
pub const NUM_EXPRESSION: usize = 10;
pub const LHAND_START: usize = NUM_BODY_JOINTS;
pub const RHAND_START: usize = LHAND_START + NUM_HAND_JOINTS;
pub const JAW_JOINT: usize = RHAND_START + NUM_HAND_JOINTS;
pub const PELVIS: usize = 0;
pub const NECK: usize = 12;
pub const HEAD: usize = 15;
pub const L_WRIST: usize = 20;
pub const R_WRIST: usize = 21;

/// Body part a vertex or joint is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Component {
    Body,
    LeftHand,
    RightHand,
    Face,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Body, Component::LeftHand, Component::RightHand, Component::Face];

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Immutable parametric body model assets.
#[derive(Clone, Debug)]
pub struct BodyTemplate {
    /// `[V, 3]` rest vertices (meters).
    pub vertices: Arc<Tensor>,
    pub faces: Vec<[u32; 3]>,
    /// `[V * 3, NUM_BETAS]`, i.e. `V x 3 x 10` row-major.
    pub shape_dirs: Arc<Tensor>,
    /// `[V * 3, NUM_EXPRESSION]`; nonzero only on face vertices.
    pub expr_dirs: Arc<Tensor>,
    /// `[J, V]`, rows sum to one.
    pub joint_regressor: Arc<Tensor>,
    /// `[V, J]`, non-negative rows summing to one.
    pub skin_weights: Arc<Tensor>,
    /// `parents[0] == ROOT_PARENT`, `parents[j] < j`.
    pub parents: Arc<[usize]>,
    /// `[J, 3]` rest joints, `joint_regressor * vertices`.
    pub rest_joints: Tensor,
    /// Component label per vertex.
    pub vertex_labels: Vec<Component>,
    rest_joints_shared: Arc<Tensor>,
    /// `[J * 3, NUM_BETAS + NUM_EXPRESSION]`: regressor applied to both
    /// blendshape bases.
    joint_dirs: Arc<Tensor>,
}

/// Posed mesh in the world frame (translation applied).
#[derive(Clone, Debug, PartialEq)]
pub struct MeshOutput {
    /// `[V, 3]`
    pub vertices: Tensor,
    /// `[J, 3]`
    pub joints: Tensor,
}

/// Tape handles for a posed mesh.
#[derive(Clone, Copy, Debug)]
pub struct MeshVars {
    pub vertices: Var,
    pub joints: Var,
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Radius of the smallest centroid-centred sphere holding every rest
    /// vertex.
    pub fn bounding_radius(&self) -> f64 {
        let v = self.vertices.data();
        let n = self.num_vertices() as f64;
        let c: [f64; 3] = std::array::from_fn(|a| v.iter().skip(a).step_by(3).sum::<f64>() / n);
        v.chunks(3)
            .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Vertex indices of one component.
    pub fn vertex_mask(&self, c: Component) -> Vec<usize> {
        (0..self.num_vertices()).filter(|&v| self.vertex_labels[v] == c).collect()
    }

    /// Joint indices used to score one component: the 22 body joints; the
    /// wrist plus 15 finger joints per hand; neck, head and jaw for the face.
    pub fn joint_mask(c: Component) -> Vec<usize> {
        match c {
            Component::Body => (0..NUM_BODY_JOINTS).collect(),
            Component::LeftHand => std::iter::once(L_WRIST).chain(LHAND_START..RHAND_START).collect(),
            Component::RightHand => std::iter::once(R_WRIST).chain(RHAND_START..JAW_JOINT).collect(),
            Component::Face => vec![NECK, HEAD, JAW_JOINT],
        }
    }

    /// Checks the structural invariants of the assets.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let j = self.num_joints();
        let fail = |m: String| Err(Error::Format(m));
        if self.vertices.shape() != [v, 3] {
            return fail(format!("vertices shape {:?}", self.vertices.shape()));
        }
        if self.shape_dirs.shape() != [3 * v, NUM_BETAS] || self.expr_dirs.shape() != [3 * v, NUM_EXPRESSION] {
            return fail("blendshape dimensions".into());
        }
        if self.joint_regressor.shape() != [j, v] || self.skin_weights.shape() != [v, j] {
            return fail("regressor/skinning dimensions".into());
        }
        if self.parents[0] != crate::tensor::geometry::ROOT_PARENT || (1..j).any(|k| self.parents[k] >= k) {
            return fail("kinematic tree is not topologically ordered".into());
        }
        for (name, t) in [("joint_regressor", &self.joint_regressor), ("skin_weights", &self.skin_weights)] {
            let cols = t.shape()[1];
            for (r, row) in t.data().chunks(cols).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return fail(format!("{name} row {r} sums to {s}"));
                }
                if name == "skin_weights" && row.iter().any(|&w| w < 0.0) {
                    return fail(format!("negative skinning weight in row {r}"));
                }
            }
        }
        if self.vertex_labels.len() != v || self.rest_joints.shape() != [j, 3] {
            return fail("labels or rest joints size".into());
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= v) {
            return fail("face index out of range".into());
        }
        Ok(())
    }

    /// Shaped rest vertices `[V, 3]` and rest joints `[J, 3]`.
    pub fn shape_blend(&self, tape: &mut Tape, beta: Var, phi: Var) -> Result<(Var, Var)> {
        let v = self.num_vertices();
        if tape.value(beta).numel() != NUM_BETAS {
            return Err(Error::shape("shape_blend", tape.shape(beta), &[NUM_BETAS]));
        }
        if tape.value(phi).numel() != NUM_EXPRESSION {
            return Err(Error::shape("shape_blend", tape.shape(phi), &[NUM_EXPRESSION]));
        }
        let base = tape.constant_shared(self.vertices.clone());
        let sd = tape.constant_shared(self.shape_dirs.clone());
        let ed = tape.constant_shared(self.expr_dirs.clone());
        let b = tape.reshape(beta, &[NUM_BETAS, 1])?;
        let p = tape.reshape(phi, &[NUM_EXPRESSION, 1])?;
        let ds = tape.matmul(sd, b)?;
        let de = tape.matmul(ed, p)?;
        let d = tape.add(ds, de)?;
        let d = tape.reshape(d, &[v, 3])?;
        let verts = tape.add(base, d)?;
        let joints = self.shape_blend_joints(tape, beta, phi)?;
        Ok((verts, joints))
    }

    /// Rest joints `[J, 3]` for the given shape and expression, without
    /// touching the vertices.
    pub fn shape_blend_joints(&self, tape: &mut Tape, beta: Var, phi: Var) -> Result<Var> {
        let b = tape.reshape(beta, &[NUM_BETAS])?;
        let p = tape.reshape(phi, &[NUM_EXPRESSION])?;
        let coeffs = tape.concat(&[b, p], 0)?;
        let coeffs = tape.reshape(coeffs, &[NUM_BETAS + NUM_EXPRESSION, 1])?;
        let dirs = tape.constant_shared(self.joint_dirs.clone());
        let d = tape.matmul(dirs, coeffs)?;
        let d = tape.reshape(d, &[self.num_joints(), 3])?;
        let base = tape.constant_shared(self.rest_joints_shared.clone());
        tape.add(base, d)
    }

    /// Posed joints `[J, 3]` only (no skinning); bitwise equal to the joints
    /// of [`Self::forward_vars`].
    pub fn joints_vars(&self, tape: &mut Tape, p: &ParamVars) -> Result<Var> {
        let rest = self.shape_blend_joints(tape, p.beta, p.phi)?;
        let aa = tape.concat(&[p.theta_body, p.theta_lhand, p.theta_rhand, p.theta_jaw], 0)?;
        let rots = tape.rodrigues(aa)?;
        let transforms = tape.forward_kinematics(rest, rots, self.parents.clone())?;
        let posed = tape.narrow(transforms, 2, 3, 1)?;
        let posed = tape.reshape(posed, &[self.num_joints(), 3])?;
        let t = tape.reshape(p.t, &[3])?;
        tape.add_bias(posed, t)
    }

    /// Differentiable forward pass: blendshapes, per-joint Rodrigues,
    /// forward kinematics, skinning, then global translation.
    pub fn forward_vars(&self, tape: &mut Tape, p: &ParamVars) -> Result<MeshVars> {
        let (verts, rest) = self.shape_blend(tape, p.beta, p.phi)?;
        let aa = tape.concat(&[p.theta_body, p.theta_lhand, p.theta_rhand, p.theta_jaw], 0)?;
        let rots = tape.rodrigues(aa)?;
        let transforms = tape.forward_kinematics(rest, rots, self.parents.clone())?;
        let posed_joints = tape.narrow(transforms, 2, 3, 1)?;
        let posed_joints = tape.reshape(posed_joints, &[self.num_joints(), 3])?;
        let posed_verts = tape.lbs(verts, transforms, rest, self.skin_weights.clone())?;
        let t = tape.reshape(p.t, &[3])?;
        Ok(MeshVars {
            vertices: tape.add_bias(posed_verts, t)?,
            joints: tape.add_bias(posed_joints, t)?,
        })
    }

    /// Non-differentiable convenience wrapper around [`Self::forward_vars`].
    pub fn forward(&self, params: &SmplxParams) -> Result<MeshOutput> {
        let mut tape = Tape::new();
        let pv = ParamVars::constant(&mut tape, params)?;
        let m = self.forward_vars(&mut tape, &pv)?;
        Ok(MeshOutput {
            vertices: tape.value(m.vertices).clone(),
            joints: tape.value(m.joints).clone(),
        })
    }

    /// Index of each joint's left/right counterpart (itself on the midline).
    pub fn joint_mirror(&self) -> Result<Vec<usize>> {
        mirror_map(self.rest_joints.data())
    }

    /// Index of each vertex's left/right counterpart.
    pub fn vertex_mirror(&self) -> Result<Vec<usize>> {
        mirror_map(self.vertices.data())
    }
}

/// Pairs every point with the point at its `x -> -x` reflection.
fn mirror_map(points: &[f64]) -> Result<Vec<usize>> {
    let n = points.len() / 3;
    (0..n)
        .map(|i| {
            let target = [-points[3 * i], points[3 * i + 1], points[3 * i + 2]];
            (0..n)
                .map(|k| {
                    let d: f64 = (0..3).map(|a| (points[3 * k + a] - target[a]).powi(2)).sum();
                    (d, k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .filter(|(d, _)| d.sqrt() < 1e-9)
                .map(|(_, k)| k)
                .ok_or_else(|| Error::Format(format!("point {i} has no mirror counterpart")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BodyTemplate {
        BodyTemplate::toy(&TemplateConfig::small(), 7).unwrap()
    }

    #[test]
    fn rodrigues_examples() {
        let close = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(rodrigues([0.0; 3]), [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]]));
        let pi = std::f64::consts::PI;
        assert!(close(rodrigues([pi, 0., 0.]), [[1., 0., 0.], [0., -1., 0.], [0., 0., -1.]]));
        assert!(close(rodrigues([0., 0., pi / 2.]), [[0., -1., 0.], [1., 0., 0.], [0., 0., 1.]]));
    }

    #[test]
    fn zero_params_translate_template() {
        let tpl = small();
        let mut p = SmplxParams::zeros();
        p.t = [1.0, 2.0, 3.0];
        let out = tpl.forward(&p).unwrap();
        assert_eq!(out.vertices.shape(), &[tpl.num_vertices(), 3]);
        assert_eq!(out.joints.shape(), &[NUM_JOINTS, 3]);
        for (o, v) in out.vertices.data().chunks(3).zip(tpl.vertices.data().chunks(3)) {
            for a in 0..3 {
                assert!((o[a] - v[a] - p.t[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expression_only_moves_face() {
        let tpl = small();
        let mut p = SmplxParams::zeros();
        p.phi = [0.7; NUM_EXPRESSION];
        let out = tpl.forward(&p).unwrap();
        let rest = tpl.forward(&SmplxParams::zeros()).unwrap();
        let mut moved_face = false;
        for v in 0..tpl.num_vertices() {
            let d = (0..3).map(|a| (out.vertices.at(&[v, a]) - rest.vertices.at(&[v, a])).abs()).fold(0.0, f64::max);
            if tpl.vertex_labels[v] == Component::Face {
                moved_face |= d > 1e-6;
            } else {
                assert_eq!(d, 0.0, "non-face vertex {v} moved");
            }
        }
        assert!(moved_face);
    }

    #[test]
    fn shape_blend_is_linear() {
        let tpl = small();
        let eval = |s: f64| {
            let mut tape = Tape::new();
            let b = tape.constant(Tensor::from_fn([10], |i| s * (0.3 - 0.1 * i as f64)));
            let p = tape.constant(Tensor::from_fn([10], |i| s * (0.05 * i as f64 - 0.2)));
            let (v, j) = tpl.shape_blend(&mut tape, b, p).unwrap();
            (tape.value(v).clone(), tape.value(j).clone())
        };
        let (v0, j0) = eval(0.0);
        let (v1, j1) = eval(1.0);
        let (v2, j2) = eval(2.0);
        assert_eq!(&v0, tpl.vertices.as_ref());
        for i in 0..v0.numel() {
            let lhs = v2.data()[i] - v0.data()[i];
            let rhs = 2.0 * (v1.data()[i] - v0.data()[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
        for i in 0..j0.numel() {
            assert!(((j2.data()[i] - j0.data()[i]) - 2.0 * (j1.data()[i] - j0.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_blend_rejects_wrong_lengths() {
        let tpl = small();
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::zeros([9]));
        let p = tape.constant(Tensor::zeros([10]));
        assert!(tpl.shape_blend(&mut tape, b, p).is_err());
    }
}
