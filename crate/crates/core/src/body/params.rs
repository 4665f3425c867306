use serde::{Deserialize, Serialize};

use super::{NUM_BETAS, NUM_BODY_JOINTS, NUM_EXPRESSION, NUM_HAND_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Full regressed parameter set.
///
/// Flattened layout (182 scalars): `theta_body` (66), `beta` (10), `t` (3),
/// `theta_lhand` (45), `theta_rhand` (45), `theta_jaw` (3), `phi` (10).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmplxParams {
    pub theta_body: [[f64; 3]; NUM_BODY_JOINTS],
    pub beta: [f64; NUM_BETAS],
    pub t: [f64; 3],
    pub theta_lhand: [[f64; 3]; NUM_HAND_JOINTS],
    pub theta_rhand: [[f64; 3]; NUM_HAND_JOINTS],
    pub theta_jaw: [f64; 3],
    pub phi: [f64; NUM_EXPRESSION],
}

/// Axis-angle of `M R M` for the reflection `M = diag(-1, 1, 1)`.
pub fn mirror_axis_angle(a: [f64; 3]) -> [f64; 3] {
    [a[0], -a[1], -a[2]]
}

impl SmplxParams {
    pub const DIM: usize = 3 * NUM_BODY_JOINTS + NUM_BETAS + 3 + 6 * NUM_HAND_JOINTS + 3 + NUM_EXPRESSION;
    /// Body slice `{theta_body, beta, t}` emitted by the encoder head.
    pub const BODY_DIM: usize = 3 * NUM_BODY_JOINTS + NUM_BETAS + 3;
    pub const HAND_DIM: usize = 3 * NUM_HAND_JOINTS;
    /// `{theta_jaw, phi}`.
    pub const FACE_DIM: usize = 3 + NUM_EXPRESSION;

    pub fn zeros() -> Self {
        Self {
            theta_body: [[0.0; 3]; NUM_BODY_JOINTS],
            beta: [0.0; NUM_BETAS],
            t: [0.0; 3],
            theta_lhand: [[0.0; 3]; NUM_HAND_JOINTS],
            theta_rhand: [[0.0; 3]; NUM_HAND_JOINTS],
            theta_jaw: [0.0; 3],
            phi: [0.0; NUM_EXPRESSION],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::DIM);
        v.extend(self.theta_body.iter().flatten());
        v.extend(&self.beta);
        v.extend(&self.t);
        v.extend(self.theta_lhand.iter().flatten());
        v.extend(self.theta_rhand.iter().flatten());
        v.extend(&self.theta_jaw);
        v.extend(&self.phi);
        v
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != Self::DIM {
            return Err(Error::shape("SmplxParams::from_slice", &[s.len()], &[Self::DIM]));
        }
        let mut it = s.iter().copied();
        let mut p = Self::zeros();
        for x in p.theta_body.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        p.beta.iter_mut().for_each(|x| *x = it.next().unwrap());
        p.t.iter_mut().for_each(|x| *x = it.next().unwrap());
        for x in p.theta_lhand.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        for x in p.theta_rhand.iter_mut().flatten() {
            *x = it.next().unwrap();
        }
        p.theta_jaw.iter_mut().for_each(|x| *x = it.next().unwrap());
        p.phi.iter_mut().for_each(|x| *x = it.next().unwrap());
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    /// Parameters of the left/right mirrored person (`x -> -x` in camera
    /// space). `joint_mirror` pairs body joints, as from
    /// [`super::BodyTemplate::joint_mirror`].
    pub fn mirrored(&self, joint_mirror: &[usize]) -> Self {
        let mut p = self.clone();
        for j in 0..NUM_BODY_JOINTS {
            p.theta_body[j] = mirror_axis_angle(self.theta_body[joint_mirror[j]]);
        }
        p.t[0] = -self.t[0];
        for i in 0..NUM_HAND_JOINTS {
            p.theta_lhand[i] = mirror_axis_angle(self.theta_rhand[i]);
            p.theta_rhand[i] = mirror_axis_angle(self.theta_lhand[i]);
        }
        p.theta_jaw = mirror_axis_angle(self.theta_jaw);
        p
    }
}

/// Tape handles for one parameter set, shaped for the body model:
/// `theta_body [22, 3]`, `beta [10]`, `t [3]`, hands `[15, 3]`,
/// `theta_jaw [1, 3]`, `phi [10]`.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub theta_body: Var,
    pub beta: Var,
    pub t: Var,
    pub theta_lhand: Var,
    pub theta_rhand: Var,
    pub theta_jaw: Var,
    pub phi: Var,
}

impl ParamVars {
    /// Splits a flat `[182]` variable.
    pub fn from_flat(tape: &mut Tape, flat: Var) -> Result<Self> {
        if tape.value(flat).numel() != SmplxParams::DIM {
            return Err(Error::shape("ParamVars::from_flat", tape.shape(flat), &[SmplxParams::DIM]));
        }
        let flat = tape.reshape(flat, &[SmplxParams::DIM])?;
        let mut at = 0;
        let mut take = |tape: &mut Tape, shape: &[usize]| -> Result<Var> {
            let n: usize = shape.iter().product();
            let v = tape.narrow(flat, 0, at, n)?;
            at += n;
            tape.reshape(v, shape)
        };
        Ok(Self {
            theta_body: take(tape, &[NUM_BODY_JOINTS, 3])?,
            beta: take(tape, &[NUM_BETAS])?,
            t: take(tape, &[3])?,
            theta_lhand: take(tape, &[NUM_HAND_JOINTS, 3])?,
            theta_rhand: take(tape, &[NUM_HAND_JOINTS, 3])?,
            theta_jaw: take(tape, &[1, 3])?,
            phi: take(tape, &[NUM_EXPRESSION])?,
        })
    }

    /// Assembles from the model heads: body slice `[79]`, two hands `[45]`
    /// and face slice `[13]`.
    pub fn from_heads(tape: &mut Tape, body: Var, lhand: Var, rhand: Var, face: Var) -> Result<Self> {
        let parts = [
            (body, SmplxParams::BODY_DIM),
            (lhand, SmplxParams::HAND_DIM),
            (rhand, SmplxParams::HAND_DIM),
            (face, SmplxParams::FACE_DIM),
        ];
        let mut flat = Vec::with_capacity(4);
        for (v, n) in parts {
            if tape.value(v).numel() != n {
                return Err(Error::shape("ParamVars::from_heads", tape.shape(v), &[n]));
            }
            flat.push(tape.reshape(v, &[n])?);
        }
        let all = tape.concat(&flat, 0)?;
        Self::from_flat(tape, all)
    }

    pub fn constant(tape: &mut Tape, p: &SmplxParams) -> Result<Self> {
        let flat = tape.constant(Tensor::new([SmplxParams::DIM], p.to_vec())?);
        Self::from_flat(tape, flat)
    }

    pub fn param(tape: &mut Tape, p: &SmplxParams) -> Result<(Self, Var)> {
        let flat = tape.param(Tensor::new([SmplxParams::DIM], p.to_vec())?);
        Ok((Self::from_flat(tape, flat)?, flat))
    }

    /// Flat `[182]` view in the canonical layout.
    pub fn flatten(&self, tape: &mut Tape) -> Result<Var> {
        let parts = [
            self.theta_body,
            self.beta,
            self.t,
            self.theta_lhand,
            self.theta_rhand,
            self.theta_jaw,
            self.phi,
        ];
        let mut flat = Vec::with_capacity(parts.len());
        for v in parts {
            let n = tape.value(v).numel();
            flat.push(tape.reshape(v, &[n])?);
        }
        tape.concat(&flat, 0)
    }
}
