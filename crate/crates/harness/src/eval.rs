//! Evaluation over a synthetic split and OBJ export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use cat_core::body::{write_obj, SmplxParams, PELVIS};
use cat_core::metrics::{f1_match, mesh_errors, MetricsAccumulator, MetricsReport, ParamErrors};
use cat_core::model::CatModel;
use cat_core::tensor::Tensor;

use crate::error::{HarnessError, Result};
use crate::synth::{SynthSample, World};

fn root(joints: &Tensor) -> [f64; 3] {
    [0, 1, 2].map(|a| joints.at(&[PELVIS, a]))
}

/// Scores `predict` on `samples`. Detection counts one predicted and one
/// true person per image, matched by root distance within `match_radius`.
pub fn evaluate_with(
    world: &World,
    samples: &[SynthSample],
    match_radius: f64,
    mut predict: impl FnMut(&SynthSample) -> Result<SmplxParams>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for s in samples {
        let pred = predict(s)?;
        let m = world.template.forward(&pred)?;
        let gt_mesh = s.gt.mesh.as_ref().ok_or_else(|| HarnessError::Synth("sample without mesh".into()))?;
        let gt_joints = s.gt.kpt3d.as_ref().ok_or_else(|| HarnessError::Synth("sample without joints".into()))?;
        let errors = mesh_errors(&m.vertices, gt_mesh, &m.joints, gt_joints, &world.template)?;
        let det = f1_match(&[root(&m.joints)], &[root(gt_joints)], match_radius)?;
        acc.add(&errors, &ParamErrors::between(&pred, &s.gt.params), &det, 1, 1);
    }
    Ok(acc.finish())
}

pub fn evaluate(model: &CatModel, world: &World, samples: &[SynthSample], match_radius: f64) -> Result<MetricsReport> {
    evaluate_with(world, samples, match_radius, |s| Ok(model.predict(&s.image)?.params))
}

pub fn export_mesh(world: &World, params: &SmplxParams, path: &Path) -> Result<()> {
    let m = world.template.forward(params)?;
    let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_obj(&mut BufWriter::new(f), &m.vertices, &world.template.faces)?;
    Ok(())
}
