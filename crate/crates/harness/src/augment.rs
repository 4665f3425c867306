//! Training augmentation as exact scene transforms followed by a fresh
//! render: apparent scale by moving the body along the viewing axis,
//! in-plane rotation by rolling about the optical axis, horizontal flip by
//! mirroring the person. Color jitter then acts on the rendered pixels.

use cat_core::body::{rodrigues, SmplxParams, NUM_BODY_JOINTS};
use cat_core::loss::GroundTruth;
use cat_core::tensor::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use crate::config::AugmentConfig;
use crate::error::Result;
use crate::synth::World;

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub rotation: f64,
    pub flip: bool,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            flip: false,
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let scale = 1.0 + u(cfg.scale);
        let rotation = u(cfg.rotation_deg).to_radians();
        let gain = [1.0 + u(cfg.jitter), 1.0 + u(cfg.jitter), 1.0 + u(cfg.jitter)];
        let offset = [u(cfg.jitter / 2.0), u(cfg.jitter / 2.0), u(cfg.jitter / 2.0)];
        let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
        Self {
            scale,
            rotation,
            flip,
            gain,
            offset,
        }
    }
}

fn mat(r: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Parameters of the same scene seen through the transformed camera.
pub fn transform_params(world: &World, p: &SmplxParams, a: &AugmentDraw) -> Result<SmplxParams> {
    let o = Vector3::from(world.camera.offset);
    let mut q = p.clone();
    // Root pivot after shape and expression blending.
    let mut rest = p.clone();
    rest.theta_body = [[0.0; 3]; NUM_BODY_JOINTS];
    rest.t = [0.0; 3];
    let rm = world.template.forward(&rest)?;
    let j0 = Vector3::new(rm.joints.at(&[0, 0]), rm.joints.at(&[0, 1]), rm.joints.at(&[0, 2]));

    // Scaling the root's camera position by 1/s about the camera centre
    // keeps its image position and scales apparent size by s.
    if a.scale != 1.0 {
        let root_cam = (j0 + Vector3::from(q.t) + o) / a.scale;
        q.t = (root_cam - o - j0).into();
    }

    if a.rotation != 0.0 {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), a.rotation);
        let root = rz.matrix() * mat(rodrigues(q.theta_body[0]));
        q.theta_body[0] = Rotation3::from_matrix_unchecked(root).scaled_axis().into();
        let c = rz * (j0 + Vector3::from(q.t) + o);
        q.t = (c - o - j0).into();
    }
    if a.flip {
        let mut m = q.mirrored(world.joint_mirror());
        // The template is symmetric about world x = 0; reflect about the
        // camera's x = 0 plane instead.
        m.t[0] = -q.t[0] - 2.0 * o.x;
        q = m;
    }
    Ok(q)
}

pub fn jitter(image: &mut Tensor, a: &AugmentDraw) {
    for px in image.data_mut().chunks_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] * a.gain[c] + a.offset[c]).clamp(-1.0, 1.0);
        }
    }
}

/// Augmented image and targets for a base parameter set.
pub fn augment(world: &World, p: &SmplxParams, a: &AugmentDraw, rng: &mut impl Rng) -> Result<(Tensor, GroundTruth)> {
    let q = transform_params(world, p, a)?;
    let (mut image, gt) = world.observe(&q, rng)?;
    jitter(&mut image, a);
    Ok((image, gt))
}
