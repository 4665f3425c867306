//! Synthetic people: bounded random parameters rendered into pseudo-images
//! of Gaussian joint splats, tinted limb segments and faint surface dots.

use cat_core::body::{BodyTemplate, Component, SmplxParams, JAW_JOINT, LHAND_START, NUM_BODY_JOINTS, RHAND_START};
use cat_core::loss::{CameraModel, GroundTruth};
use cat_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const BODY_POSE_RANGE: f64 = 0.4;
pub const HAND_POSE_RANGE: f64 = 0.8;
pub const JAW_POSE_RANGE: f64 = 0.4;
pub const COEFF_RANGE: f64 = 1.0;
/// Translation ranges (meters) for x/y and for depth.
pub const TRANSLATION_XY: f64 = 0.15;
pub const TRANSLATION_Z: f64 = 3.0;
pub const MAX_ATTEMPTS: usize = 20;
/// Box margin as a fraction of the larger keypoint extent, plus a fixed
/// pixel pad, on every side.
pub const BOX_MARGIN: f64 = 0.15;
pub const BOX_PAD_PX: f64 = 1.5;
pub const BACKGROUND: f64 = -0.8;

/// Which synthetic split a sample belongs to. Splits draw from disjoint
/// random streams of the same data seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    /// `[H, W, 3]` in `[-1, 1]`.
    pub image: Tensor,
    pub gt: GroundTruth,
}

/// Template, camera and image settings shared by every sample of a run.
#[derive(Clone, Debug)]
pub struct World {
    pub template: BodyTemplate,
    pub camera: CameraModel,
    pub height: usize,
    pub width: usize,
    pub pixel_noise: f64,
    pub kpt2d_noise: f64,
    joint_mirror: Vec<usize>,
}

impl World {
    pub fn new(template: BodyTemplate, height: usize, width: usize, pixel_noise: f64, kpt2d_noise: f64) -> Result<Self> {
        let camera = CameraModel::for_template(&template, height, width);
        let joint_mirror = template.joint_mirror()?;
        Ok(Self {
            template,
            camera,
            height,
            width,
            pixel_noise,
            kpt2d_noise,
            joint_mirror,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let template = BodyTemplate::toy(&cfg.template, cfg.template_seed)?;
        let e = &cfg.model.encoder;
        Self::new(template, e.height, e.width, cfg.data.pixel_noise, cfg.data.kpt2d_noise)
    }

    pub fn joint_mirror(&self) -> &[usize] {
        &self.joint_mirror
    }

    /// Draws parameters whose whole mesh projects inside the image.
    pub fn sample_params(&self, rng: &mut impl Rng) -> Result<SmplxParams> {
        for _ in 0..MAX_ATTEMPTS {
            let mut u = |a: f64| rng.gen_range(-a..=a);
            let mut p = SmplxParams::zeros();
            p.theta_body = std::array::from_fn(|_| [u(BODY_POSE_RANGE), u(BODY_POSE_RANGE), u(BODY_POSE_RANGE)]);
            p.beta = std::array::from_fn(|_| u(COEFF_RANGE));
            p.t = [u(TRANSLATION_XY), u(TRANSLATION_XY), u(TRANSLATION_Z)];
            p.theta_lhand = std::array::from_fn(|_| [u(HAND_POSE_RANGE), u(HAND_POSE_RANGE), u(HAND_POSE_RANGE)]);
            p.theta_rhand = std::array::from_fn(|_| [u(HAND_POSE_RANGE), u(HAND_POSE_RANGE), u(HAND_POSE_RANGE)]);
            p.theta_jaw = [u(JAW_POSE_RANGE), u(JAW_POSE_RANGE), u(JAW_POSE_RANGE)];
            p.phi = std::array::from_fn(|_| u(COEFF_RANGE));
            let m = self.template.forward(&p)?;
            let px = self.camera.project(&m.vertices)?;
            let (w, h) = (self.width as f64, self.height as f64);
            if px.data().chunks(2).all(|q| q[0] >= 0.0 && q[0] < w && q[1] >= 0.0 && q[1] < h) {
                return Ok(p);
            }
        }
        Err(HarnessError::Synth(format!("body left the frame in {MAX_ATTEMPTS} attempts")))
    }

    /// Renders `params` and derives every target. Noise comes from `rng`.
    pub fn observe(&self, params: &SmplxParams, rng: &mut impl Rng) -> Result<(Tensor, GroundTruth)> {
        let m = self.template.forward(params)?;
        let kpt2d = self.camera.project(&m.joints)?;
        let verts2d = self.camera.project(&m.vertices)?;
        let (w, h) = (self.width as f64, self.height as f64);
        let visible: Vec<bool> = kpt2d
            .data()
            .chunks(2)
            .map(|q| q[0] >= 0.0 && q[0] < w && q[1] >= 0.0 && q[1] < h)
            .collect();
        let boxes = [Component::LeftHand, Component::RightHand, Component::Face]
            .map(|c| self.component_box(c, &kpt2d, &verts2d, &visible));
        let mut image = self.render(&kpt2d, &verts2d);
        if self.pixel_noise > 0.0 {
            let n = Normal::new(0.0, self.pixel_noise).expect("positive std");
            for x in image.data_mut() {
                *x = (*x + n.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        let kpt2d = if self.kpt2d_noise > 0.0 {
            let n = Normal::new(0.0, self.kpt2d_noise).expect("positive std");
            Tensor::from_fn(kpt2d.shape().to_vec(), |i| kpt2d.data()[i] + n.sample(rng))
        } else {
            kpt2d
        };
        Ok((
            image,
            GroundTruth {
                params: params.clone(),
                kpt3d: Some(m.joints),
                kpt2d: Some(kpt2d),
                visible,
                boxes: Some(boxes),
                mesh: Some(m.vertices),
            },
        ))
    }

    /// One complete sample from `rng`.
    pub fn synth_sample(&self, rng: &mut impl Rng) -> Result<(Tensor, GroundTruth)> {
        let p = self.sample_params(rng)?;
        self.observe(&p, rng)
    }

    /// Sample `id` of a split, reproducible in isolation.
    pub fn sample(&self, data_seed: u64, split: Split, id: usize) -> Result<SynthSample> {
        let seed = split_seed(data_seed, split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let (image, gt) = self.synth_sample(&mut rng)?;
        Ok(SynthSample { id, split, seed, image, gt })
    }

    pub fn dataset(&self, data_seed: u64, split: Split, n: usize) -> Result<Vec<SynthSample>> {
        (0..n).map(|i| self.sample(data_seed, split, i)).collect()
    }

    /// Normalized `(cx, cy, w, h)` around a component's visible joints (and,
    /// for the face, its surface points), padded and clipped to the image.
    fn component_box(&self, c: Component, kpt2d: &Tensor, verts2d: &Tensor, visible: &[bool]) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut pts: Vec<[f64; 2]> = BodyTemplate::joint_mask(c)
            .into_iter()
            .filter(|&j| visible[j])
            .map(|j| [kpt2d.at(&[j, 0]), kpt2d.at(&[j, 1])])
            .collect();
        if c == Component::Face {
            pts.extend(self.template.vertex_mask(c).into_iter().map(|v| [verts2d.at(&[v, 0]), verts2d.at(&[v, 1])]));
        }
        if pts.is_empty() {
            pts = BodyTemplate::joint_mask(c)
                .into_iter()
                .map(|j| [kpt2d.at(&[j, 0]).clamp(0.0, w), kpt2d.at(&[j, 1]).clamp(0.0, h)])
                .collect();
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let pad = BOX_MARGIN * (hi[0] - lo[0]).max(hi[1] - lo[1]) + BOX_PAD_PX;
        let x0 = (lo[0] - pad).max(0.0);
        let x1 = (hi[0] + pad).min(w);
        let y0 = (lo[1] - pad).max(0.0);
        let y1 = (hi[1] + pad).min(h);
        [(x0 + x1) / (2.0 * w), (y0 + y1) / (2.0 * h), (x1 - x0) / w, (y1 - y0) / h]
    }

    /// Deterministic pseudo-image: limbs, then surface dots, then joints,
    /// blended additively over a dark background.
    pub fn render(&self, kpt2d: &Tensor, verts2d: &Tensor) -> Tensor {
        let mut canvas = Canvas::new(self.height, self.width);
        let parents = &self.template.parents;
        for j in 1..parents.len() {
            let a = [kpt2d.at(&[parents[j], 0]), kpt2d.at(&[parents[j], 1])];
            let b = [kpt2d.at(&[j, 0]), kpt2d.at(&[j, 1])];
            canvas.segment(a, b, 0.5, scale3(component_tint(joint_component(j)), 0.5));
        }
        for (v, c) in self.template.vertex_labels.iter().enumerate() {
            let p = [verts2d.at(&[v, 0]), verts2d.at(&[v, 1])];
            canvas.splat(p, 0.35, scale3(component_tint(*c), 0.12));
        }
        for j in 0..parents.len() {
            let p = [kpt2d.at(&[j, 0]), kpt2d.at(&[j, 1])];
            let sigma = if j < NUM_BODY_JOINTS { 0.8 } else { 0.45 };
            canvas.splat(p, sigma, joint_color(j));
        }
        canvas.finish()
    }
}

/// Seed of a split's random stream family.
pub fn split_seed(data_seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => data_seed,
        Split::Eval => data_seed ^ 0x9e37_79b9_7f4a_7c15,
    }
}

pub fn joint_component(j: usize) -> Component {
    if j < LHAND_START {
        Component::Body
    } else if j < RHAND_START {
        Component::LeftHand
    } else if j < JAW_JOINT {
        Component::RightHand
    } else {
        Component::Face
    }
}

fn component_tint(c: Component) -> [f64; 3] {
    match c {
        Component::Body => [0.8, 0.8, 0.8],
        Component::LeftHand => [1.0, 0.35, 0.2],
        Component::RightHand => [0.2, 0.35, 1.0],
        Component::Face => [0.3, 1.0, 0.3],
    }
}

fn scale3(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|x| x * k)
}

/// Distinct color per joint: hues spread by the golden ratio.
pub fn joint_color(j: usize) -> [f64; 3] {
    let hue = (j as f64 * 0.618_033_988_749_895).fract();
    let value = if j < NUM_BODY_JOINTS { 1.6 } else { 1.2 };
    hsv(hue, 0.85, value)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

struct Canvas {
    h: usize,
    w: usize,
    acc: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, acc: vec![0.0; h * w * 3] }
    }

    /// Pixels whose centres lie within `r` of the box `lo..hi`.
    fn window(&self, lo: [f64; 2], hi: [f64; 2], r: f64) -> Option<(usize, usize, usize, usize)> {
        let x0 = (lo[0] - r - 0.5).floor().max(0.0);
        let y0 = (lo[1] - r - 0.5).floor().max(0.0);
        let x1 = (hi[0] + r - 0.5).ceil().min(self.w as f64 - 1.0);
        let y1 = (hi[1] + r - 0.5).ceil().min(self.h as f64 - 1.0);
        (x0 <= x1 && y0 <= y1 && x1.is_finite() && y1.is_finite()).then(|| (x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    fn add(&mut self, y: usize, x: usize, wgt: f64, color: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        for c in 0..3 {
            self.acc[i + c] += wgt * color[c];
        }
    }

    fn splat(&mut self, p: [f64; 2], sigma: f64, color: [f64; 3]) {
        let r = 3.0 * sigma;
        let Some((x0, x1, y0, y1)) = self.window(p, p, r) else {
            return;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - p[0];
                let dy = y as f64 + 0.5 - p[1];
                self.add(y, x, (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp(), color);
            }
        }
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], sigma: f64, color: [f64; 3]) {
        let r = 3.0 * sigma;
        let lo = [a[0].min(b[0]), a[1].min(b[1])];
        let hi = [a[0].max(b[0]), a[1].max(b[1])];
        let Some((x0, x1, y0, y1)) = self.window(lo, hi, r) else {
            return;
        };
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = [x as f64 + 0.5 - a[0], y as f64 + 0.5 - a[1]];
                let s = if len2 > 0.0 { ((q[0] * d[0] + q[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let ex = q[0] - s * d[0];
                let ey = q[1] - s * d[1];
                self.add(y, x, (-(ex * ex + ey * ey) / (2.0 * sigma * sigma)).exp(), color);
            }
        }
    }

    fn finish(self) -> Tensor {
        let data = self.acc.into_iter().map(|a| (BACKGROUND + a).clamp(-1.0, 1.0)).collect();
        Tensor::new([self.h, self.w, 3], data).expect("canvas size")
    }
}

/// Binary PPM (P6) encoding of an `[H, W, 3]` image in `[-1, 1]`.
pub fn to_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    out
}
