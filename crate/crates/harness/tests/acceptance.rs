//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The criteria run sequentially inside a single test so the wall-clock
//! budget of the overfit run is measured without competing threads. Set
//! `CAT_ACCEPTANCE=1,3,9` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cat_core::body::{rodrigues, BodyTemplate, SmplxParams, TemplateConfig, NUM_BODY_JOINTS, NUM_HAND_JOINTS};
use cat_core::gradcheck::{suite, uniform};
use cat_core::metrics::{aligned_errors, mesh_errors, procrustes_align, MetricsReport};
use cat_core::model::decoder::{self, DeformWeights};
use cat_core::model::{CatModel, ModelConfig};
use cat_core::tensor::{Tape, Tensor};
use cat_harness::ablation;
use cat_harness::checkpoint::Checkpoint;
use cat_harness::eval::evaluate;
use cat_harness::{RunConfig, Trainer};
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ------------------------------------------------------------------ 1

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = suite::run(&[], None, 0).unwrap();
    let elapsed = start.elapsed();
    let covered = suite::OPS.iter().all(|op| report.ops.iter().any(|o| o.op == *op));
    let worst = report.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let ok = covered && report.passed() && worst < 1e-4 && elapsed < Duration::from_secs(60);
    let failures = report.failures();
    (
        ok,
        format!(
            "{} ops, worst rel err {worst:.2e}, {:.1} s{}",
            report.ops.len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(", ")) }
        ),
    )
}

// ------------------------------------------------------------------ 2

/// Bilinear lookup in a row-major `[h*w, C]` value table with border clamp.
fn bilinear(v: &Tensor, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let c = v.shape()[1];
    let axis = |t: f64, n: usize| {
        let t = t.clamp(0.0, (n - 1) as f64);
        let i0 = (t.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, if n > 1 { t - i0 as f64 } else { 0.0 })
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    (0..c)
        .map(|ch| {
            let g = |yy: usize, xx: usize| v.at(&[yy * w + xx, ch]);
            (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
        })
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor, j: usize) -> f64 {
    b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.at(&[i, j])).sum::<f64>()
}

fn deformable_oracle() -> Verdict {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut combos = std::collections::BTreeSet::new();
    for case in 0..100 {
        let levels = 1 + case % 3;
        let heads = 1 + (case / 3) % 2;
        let points = [1, 2, 4][(case / 6) % 3];
        combos.insert((levels, heads, points));
        let k = r.gen_range(1..=6);
        let c = 4 * heads;
        let n = heads * levels * points;
        let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (r.gen_range(1..7), r.gen_range(1..7))).collect();
        let q = uniform(&mut r, &[k, c], -1.0, 1.0);
        let refs = uniform(&mut r, &[k, 2], 0.0, 1.0);
        let values: Vec<Tensor> = shapes.iter().map(|&(h, w)| uniform(&mut r, &[h * w, c], -1.0, 1.0)).collect();
        let w: Vec<Tensor> = [(vec![c, 2 * n], 1.0), (vec![2 * n], 2.0), (vec![c, n], 1.0), (vec![n], 1.0)]
            .into_iter()
            .chain([(vec![c, c], 1.0), (vec![c], 1.0), (vec![c, c], 1.0), (vec![c], 1.0)])
            .map(|(s, a)| uniform(&mut r, &s, -a, a))
            .collect();

        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let rv = tape.constant(refs.clone());
        let vv: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let wv: Vec<_> = w.iter().map(|t| tape.constant(t.clone())).collect();
        let dw = DeformWeights {
            offset_w: wv[0],
            offset_b: wv[1],
            attn_w: wv[2],
            attn_b: wv[3],
            value_w: wv[4],
            value_b: wv[5],
            out_w: wv[6],
            out_b: wv[7],
        };
        let (out, _) = decoder::deformable_cross_attn(&mut tape, qv, &vv, &shapes, rv, &dw, heads, points).unwrap();
        let got = tape.value(out).data();

        let dh = c / heads;
        for qi in 0..k {
            let xq = &q.data()[qi * c..(qi + 1) * c];
            let mut acc = vec![0.0; c];
            for h in 0..heads {
                let logits: Vec<f64> =
                    (0..levels * points).map(|i| affine(xq, &w[2], &w[3], h * levels * points + i)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for l in 0..levels {
                    let (lh, lw) = shapes[l];
                    for p in 0..points {
                        let o = (h * levels + l) * points + p;
                        let a = (logits[l * points + p] - m).exp() / z;
                        let x = refs.at(&[qi, 0]) * lw as f64 - 0.5 + affine(xq, &w[0], &w[1], 2 * o);
                        let y = refs.at(&[qi, 1]) * lh as f64 - 0.5 + affine(xq, &w[0], &w[1], 2 * o + 1);
                        let s = bilinear(&values[l], lh, lw, x, y);
                        for ch in h * dh..(h + 1) * dh {
                            acc[ch] += a * affine(&s, &w[4], &w[5], ch);
                        }
                    }
                }
            }
            for j in 0..c {
                worst = worst.max((got[qi * c + j] - affine(&acc, &w[6], &w[7], j)).abs());
            }
        }
    }
    (
        worst < 1e-10 && combos.len() == 18,
        format!("100 configurations over {} (L, heads, points) combinations, max abs diff {worst:.2e}", combos.len()),
    )
}

// ------------------------------------------------------------------ 3

fn random_rotation(r: &mut impl Rng) -> Matrix3<f64> {
    let m = rodrigues([r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)]);
    Matrix3::from_fn(|i, j| m[i][j])
}

/// Horn's closed form: the rotation is the unit quaternion spanning the top
/// eigenvector of a symmetric 4x4 matrix built from the cross-covariance.
fn horn(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let m = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my).transpose()).sum::<Matrix3<f64>>();
    let s = |i: usize, j: usize| m[(i, j)];
    #[rustfmt::skip]
    let k = Matrix4::new(
        s(0, 0) + s(1, 1) + s(2, 2), s(1, 2) - s(2, 1), s(2, 0) - s(0, 2), s(0, 1) - s(1, 0),
        s(1, 2) - s(2, 1), s(0, 0) - s(1, 1) - s(2, 2), s(0, 1) + s(1, 0), s(2, 0) + s(0, 2),
        s(2, 0) - s(0, 2), s(0, 1) + s(1, 0), -s(0, 0) + s(1, 1) - s(2, 2), s(1, 2) + s(2, 1),
        s(0, 1) - s(1, 0), s(2, 0) + s(0, 2), s(1, 2) + s(2, 1), -s(0, 0) - s(1, 1) + s(2, 2),
    );
    let eig = k.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(top);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
    let num: f64 = x.iter().zip(y).map(|(a, b)| (b - my).dot(&(rot * (a - mx)))).sum();
    let den: f64 = x.iter().map(|a| (a - mx).norm_squared()).sum();
    let scale = num / den;
    (scale, rot, my - scale * rot * mx)
}

fn procrustes() -> Verdict {
    let mut r = rng(303);
    let (mut worst_res, mut worst_oracle, mut worst_det) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..1000 {
        let n = 4 + case % 30;
        // Anisotropic spread keeps the best proper rotation unique when the
        // planted map is a reflection.
        let x: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-0.6..0.6), r.gen_range(-0.3..0.3)))
            .collect();
        let mut rot = random_rotation(&mut r);
        let reflect = case % 5 == 4;
        if reflect {
            rot.set_column(0, &(-rot.column(0)));
        }
        let s = r.gen_range(0.5..2.0);
        let t = Vector3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let y: Vec<Vector3<f64>> = x.iter().map(|p| s * rot * p + t).collect();
        let (xa, ya): (Vec<[f64; 3]>, Vec<[f64; 3]>) = (x.iter().map(|p| (*p).into()).collect(), y.iter().map(|p| (*p).into()).collect());

        let sim = procrustes_align(&xa, &ya).unwrap();
        let rm = Matrix3::from_fn(|i, j| sim.r[i][j]);
        worst_det = worst_det.max((rm.determinant() - 1.0).abs());
        if !reflect {
            let (_, pa) = aligned_errors(&xa, &ya).unwrap();
            worst_res = worst_res.max(pa);
        }
        let (us, ur, ut) = horn(&x, &y);
        let mut d = (sim.s - us).abs();
        for i in 0..3 {
            d = d.max((sim.t[i] - ut[i]).abs());
            for j in 0..3 {
                d = d.max((sim.r[i][j] - ur[(i, j)]).abs());
            }
        }
        worst_oracle = worst_oracle.max(d);
    }
    (
        worst_res < 1e-8 && worst_det < 1e-12 && worst_oracle < 1e-10,
        format!("1000 transforms (200 reflections): residual {worst_res:.1e} m, |det-1| {worst_det:.1e}, vs Horn quaternion solution {worst_oracle:.1e}"),
    )
}

// ------------------------------------------------------------------ 4

fn random_params(r: &mut impl Rng, pose: f64) -> SmplxParams {
    let v: Vec<f64> = (0..SmplxParams::DIM).map(|_| r.gen_range(-pose..pose)).collect();
    SmplxParams::from_slice(&v).unwrap()
}

fn shifted(x: &Tensor, d: [f64; 3]) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + d[i % 3])
}

fn metric_invariants() -> Verdict {
    let t = BodyTemplate::toy(&TemplateConfig::default(), 0).unwrap();
    let mut r = rng(404);
    let mut violations = 0;
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let a = t.forward(&random_params(&mut r, 0.8)).unwrap();
        let b = t.forward(&random_params(&mut r, 0.8)).unwrap();
        let e = mesh_errors(&a.vertices, &b.vertices, &a.joints, &b.joints, &t).unwrap();
        for s in [e.all, e.body, e.hands, e.face] {
            if s.pa_mpvpe > s.mpvpe || s.pa_mpjpe > s.mpjpe {
                violations += 1;
            }
        }
        let d = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let e = mesh_errors(&shifted(&a.vertices, d), &a.vertices, &shifted(&a.joints, d), &a.joints, &t).unwrap();
        for s in [e.all, e.body, e.hands, e.face] {
            worst_shift = worst_shift.max(s.pa_mpvpe).max(s.pa_mpjpe);
        }
    }
    (
        violations == 0 && worst_shift < 1e-9,
        format!("1000 pairs: {violations} PA > raw violations, translation-only PA error {worst_shift:.1e} mm"),
    )
}

// ------------------------------------------------------------------ 5

fn shape_conformance() -> Verdict {
    let cfg = ModelConfig::paper();
    let model = CatModel::new(cfg.clone(), 5).unwrap();
    let (h, w) = (cfg.encoder.height, cfg.encoder.width);
    let image = uniform(&mut rng(505), &[h, w, 3], -1.0, 1.0);
    let mut ctx = model.ctx(false);
    let iv = ctx.tape.constant(image);
    let out = model.forward(&mut ctx, iv).unwrap();
    let shape = |v| ctx.tape.shape(v).to_vec();
    let body = shape(out.body);
    let comps: Vec<Vec<usize>> = out.components.iter().map(|c| shape(c.params)).collect();
    let tokens: Vec<usize> = out.components.iter().map(|c| ctx.tape.shape(c.tokens)[0]).collect();
    let body_tokens = ctx.tape.shape(out.encoder.body_tokens)[0];
    let boxes = ctx.tape.value(out.boxes);
    let flat = shape(out.params);
    let p = SmplxParams::from_slice(ctx.tape.value(out.params).data()).unwrap();
    let ok = (h, w) == (256, 192)
        && body == [3 * NUM_BODY_JOINTS + 10 + 3]
        && p.theta_body.len() == 22
        && p.beta.len() == 10
        && p.theta_lhand.len() == 15
        && p.theta_rhand.len() == NUM_HAND_JOINTS
        && p.phi.len() == 10
        && comps == [vec![45], vec![45], vec![13]]
        && flat == [SmplxParams::DIM]
        && boxes.shape() == [3, 4]
        && boxes.data().iter().all(|b| (0.0..=1.0).contains(b))
        && body_tokens == 27
        && tokens.iter().sum::<usize>() == 92;
    (
        ok,
        format!(
            "{h}x{w} input: body slice {body:?} (22x3 + 10 + 3), hands/face {comps:?}, boxes {:?}, {body_tokens} body tokens, component tokens {tokens:?} = {}",
            boxes.shape(),
            tokens.iter().sum::<usize>()
        ),
    )
}

// ------------------------------------------------------------------ 6

fn bones(t: &BodyTemplate, j: &Tensor) -> Vec<f64> {
    (1..t.num_joints())
        .map(|k| {
            let p = t.parents[k];
            (0..3).map(|a| (j.at(&[k, a]) - j.at(&[p, a])).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

fn body_physics() -> Verdict {
    let t = BodyTemplate::toy(&TemplateConfig::default(), 0).unwrap();
    let mut r = rng(606);
    let mut worst_bone = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let p = random_params(&mut r, std::f64::consts::PI);
        let mut rest = SmplxParams::zeros();
        rest.beta = p.beta;
        rest.phi = p.phi;
        let a = bones(&t, &t.forward(&rest).unwrap().joints);
        let posed = t.forward(&p).unwrap();
        for (x, y) in a.iter().zip(bones(&t, &posed.joints)) {
            worst_bone = worst_bone.max((x - y).abs() / x);
        }
        let d = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let mut q = p.clone();
        q.t = [p.t[0] + d[0], p.t[1] + d[1], p.t[2] + d[2]];
        let moved = t.forward(&q).unwrap();
        for (m, o) in [(&moved.vertices, &posed.vertices), (&moved.joints, &posed.joints)] {
            let rel: Vec<f64> = m.data().iter().zip(o.data()).map(|(a, b)| a - b).collect();
            for (i, x) in rel.iter().enumerate() {
                let want = q.t[i % 3] - p.t[i % 3];
                worst_shift = worst_shift.max((x - want).abs());
            }
        }
    }
    (
        worst_bone < 1e-9 && worst_shift < 1e-12,
        format!("1000 poses: bone length rel err {worst_bone:.1e}, translation equivariance err {worst_shift:.1e} m"),
    )
}

// ------------------------------------------------------------------ 7

fn toy_overfit() -> Verdict {
    let start = Instant::now();
    let mut t = Trainer::new(RunConfig::toy()).unwrap();
    let initial = t.dataset_loss().unwrap().total;
    t.run(None, |_| {}).unwrap();
    let last = t.dataset_loss().unwrap().total;
    let report = evaluate(&t.model, &t.world, &t.data, t.config.eval.match_radius).unwrap();
    let elapsed = start.elapsed();
    let radius_mm = 1000.0 * t.world.template.bounding_radius();
    let ratio = last / initial;
    let pa = report.all.pa_mpjpe;
    let ok = t.step <= 2000 && ratio <= 0.05 && pa < 0.1 * radius_mm && elapsed < Duration::from_secs(600);
    (
        ok,
        format!(
            "{} steps on {} samples: loss {initial:.4} -> {last:.4} ({:.2}%), train PA-MPJPE {pa:.1} mm vs limit {:.1} mm, {:.0} s",
            t.step,
            t.data.len(),
            100.0 * ratio,
            0.1 * radius_mm,
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 8

const ABLATION: &str = include_str!("../../../configs/ablation.cfg");

fn decoder_ablation() -> Verdict {
    let base = RunConfig::parse(ABLATION).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let s = ablation::run_seed(&base, seed).unwrap();
        wins += usize::from(s.decoder_helps_hands());
        rows.push(format!("{:.4}/{:.4}", s.full.param_l1.hands, s.disabled.param_l1.hands));
    }
    (wins >= 4, format!("hand L1 with/without decoder per seed [{}], decoder no worse in {wins}/5", rows.join(", ")))
}

// ------------------------------------------------------------------ 9

const SMALL: &str = "
run.seed = 9
encoder.height = 32
encoder.width = 24
encoder.channels = 16
encoder.depth = 1
encoder.heads = 2
decoder.scales = 1,2
decoder.crop_h = 2
decoder.crop_w = 2
decoder.channels = 8
decoder.heads = 2
decoder.points = 2
data.n_train = 6
train.batch = 4
train.steps = 30
train.ckpt_every = 10
augment.enabled = true
";

fn weight_bits(t: &Trainer) -> Vec<u64> {
    t.model.params.iter().flat_map(|(_, x)| x.data().iter().map(|v| v.to_bits())).collect()
}

fn determinism_and_persistence() -> Verdict {
    let cfg = RunConfig::parse(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(Some(dir.path()), |_| {}).unwrap();
    let mut b = Trainer::new(cfg).unwrap();
    b.run(None, |_| {}).unwrap();
    let repro = weight_bits(&a) == weight_bits(&b) && a.log == b.log;

    let mid = Checkpoint::load(dir.path().join("step_000010.ckpt")).unwrap();
    let mut c = Trainer::resume(mid, None).unwrap();
    c.run(None, |_| {}).unwrap();
    let resumed = weight_bits(&c) == weight_bits(&a) && c.log[..] == a.log[10..] && c.adam == a.adam;

    let samples = a.world.dataset(77, cat_harness::Split::Eval, 4).unwrap();
    let report = evaluate(&a.model, &a.world, &samples, 0.25).unwrap();
    let json = report.to_json().unwrap();
    let back = MetricsReport::from_json(&json).unwrap();
    let round = back == report && back.to_json().unwrap() == json;
    (
        repro && resumed && round,
        format!("rerun bitwise {repro}, resume from step 10 bitwise {resumed}, metric JSON round trip {round}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "deformable attention oracle", deformable_oracle),
        (3, "procrustes", procrustes),
        (4, "metric invariants", metric_invariants),
        (5, "shape conformance", shape_conformance),
        (6, "body-model physics", body_physics),
        (7, "toy overfit", toy_overfit),
        (8, "decoder ablation", decoder_ablation),
        (9, "determinism and persistence", determinism_and_persistence),
    ];
    let only: Option<Vec<u32>> = std::env::var("CAT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        println!(
            "[{}] {id}. {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
