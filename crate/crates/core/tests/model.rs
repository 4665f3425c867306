use approx::assert_abs_diff_eq;
use cat_core::body::{mirror_axis_angle, SmplxParams};
use cat_core::gradcheck::{self, rng, uniform, weighted_sum, FD_STEP};
use cat_core::model::decoder::{self, DeformWeights, Pathway};
use cat_core::model::encoder;
use cat_core::model::{CatModel, Ctx, DecoderConfig, EncoderConfig, ModelConfig, ParamStore};
use cat_core::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        height: 16,
        width: 24,
        patch: 8,
        channels: 8,
        body_tokens: 3,
        depth: 1,
        heads: 2,
    }
}

fn tiny_decoder() -> DecoderConfig {
    DecoderConfig {
        enabled: true,
        keypoint_guided: true,
        scales: vec![1, 2],
        crop_h: 2,
        crop_w: 3,
        channels: 8,
        k_hand: 3,
        k_face: 4,
        blocks: 1,
        points: 2,
        heads: 2,
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: tiny_encoder(),
        decoder: tiny_decoder(),
    }
}

/// Store with every tensor redrawn uniformly, so zero-initialized heads do
/// not hide gradient paths.
fn random_store(cfg: &ModelConfig, seed: u64, scale: f64) -> ParamStore {
    let mut store = ParamStore::init(&CatModel::specs(cfg), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in store.tensors_mut() {
        *t = uniform(&mut r, &t.shape().to_vec(), -scale, scale);
    }
    store
}

fn image(cfg: &EncoderConfig, seed: u64) -> Tensor {
    uniform(&mut rng(seed), &[cfg.height, cfg.width, 3], -1.0, 1.0)
}

fn assert_grad(name: &str, r: gradcheck::GradCheck) {
    assert!(r.max_rel_err < TOL, "{name}: rel err {:?}", r.per_input);
}

// ---------------------------------------------------------------- encoder

#[test]
fn patch_count_at_full_resolution() {
    let cfg = EncoderConfig {
        height: 256,
        width: 192,
        patch: 16,
        channels: 8,
        body_tokens: 27,
        depth: 0,
        heads: 2,
    };
    assert_eq!(cfg.num_patches(), 192);
    let m = ModelConfig {
        encoder: cfg.clone(),
        decoder: DecoderConfig {
            enabled: false,
            ..tiny_decoder()
        },
    };
    let store = ParamStore::init(&CatModel::specs(&m), 1).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let img = ctx.tape.constant(image(&cfg, 2));
    let tf = encoder::patchify_embed(&mut ctx, &cfg, img).unwrap();
    assert_eq!(ctx.tape.shape(tf), [192, 8]);
}

#[test]
fn zero_image_gives_bias_plus_position() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 3, 0.5);
    let mut ctx = Ctx::new(&store, false);
    let img = ctx.tape.constant(Tensor::zeros([16, 24, 3]));
    let tf = encoder::patchify_embed(&mut ctx, &cfg.encoder, img).unwrap();
    let bias = store.get("enc.patch.b").unwrap().data();
    let pos = store.get("enc.pos").unwrap();
    let out = ctx.tape.value(tf);
    for n in 0..6 {
        for c in 0..8 {
            assert_eq!(out.at(&[n, c]), bias[c] + pos.at(&[n, c]));
        }
    }
}

fn swap_patches(img: &Tensor, cfg: &EncoderConfig, a: (usize, usize), b: (usize, usize)) -> Tensor {
    let mut out = img.clone();
    let m = cfg.patch;
    for r in 0..m {
        for c in 0..m {
            for ch in 0..3 {
                let ia = ((a.0 * m + r) * cfg.width + a.1 * m + c) * 3 + ch;
                let ib = ((b.0 * m + r) * cfg.width + b.1 * m + c) * 3 + ch;
                out.data_mut().swap(ia, ib);
            }
        }
    }
    out
}

#[test]
fn swapping_patches_swaps_token_rows() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 4, 0.5);
    let img = image(&cfg.encoder, 5);
    let swapped = swap_patches(&img, &cfg.encoder, (0, 1), (1, 2));
    let run = |im: &Tensor| {
        let mut ctx = Ctx::new(&store, false);
        let v = ctx.tape.constant(im.clone());
        let t = encoder::patch_tokens(&mut ctx, &cfg.encoder, v).unwrap();
        ctx.tape.value(t).clone()
    };
    let (a, b) = (run(&img), run(&swapped));
    let (ra, rb) = (1, 3 + 2);
    for c in 0..8 {
        assert_eq!(a.at(&[ra, c]), b.at(&[rb, c]));
        assert_eq!(a.at(&[rb, c]), b.at(&[ra, c]));
        assert_eq!(a.at(&[0, c]), b.at(&[0, c]));
    }
}

#[test]
fn encoder_shapes_and_attention_rows() {
    let cfg = ModelConfig::toy();
    let model = CatModel::new(cfg.clone(), 6).unwrap();
    let mut ctx = model.ctx(false);
    let img = ctx.tape.constant(image(&cfg.encoder, 7));
    let out = encoder::encode(&mut ctx, &cfg.encoder, img).unwrap();
    assert_eq!(ctx.tape.shape(out.features), [48, 64]);
    assert_eq!(ctx.tape.shape(out.body_tokens), [27, 64]);
    assert_eq!(out.attention.len(), 2);
    for block in &out.attention {
        assert_eq!(block.len(), 4);
        for &a in block {
            let t = ctx.tape.value(a);
            assert_eq!(t.shape(), [75, 75]);
            for row in t.data().chunks(75) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn encoder_gradient_wrt_body_tokens() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 8, 0.4);
    let mut r = rng(9);
    let tf = uniform(&mut r, &[6, 8], -1.0, 1.0);
    let tb = uniform(&mut r, &[3, 8], -1.0, 1.0);
    let res = gradcheck::check(&[tf, tb], FD_STEP, None, |tape, v| {
        Ctx::scoped(tape, &store, &[], |ctx| {
            let out = encoder::encode_tokens(ctx, &cfg.encoder, v[0], v[1])?;
            let both = ctx.tape.concat(&[out.features, out.body_tokens], 0)?;
            weighted_sum(&mut ctx.tape, both, 10)
        })
    })
    .unwrap();
    assert_grad("encoder", res);
}

#[test]
fn features_are_permutation_equivariant_without_positions() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 11, 0.4);
    let img = image(&cfg.encoder, 12);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let run = |permute: bool| {
        let mut ctx = Ctx::new(&store, false);
        let v = ctx.tape.constant(img.clone());
        let mut t = encoder::patch_tokens(&mut ctx, &cfg.encoder, v).unwrap();
        if permute {
            let idx: Vec<usize> = perm.iter().flat_map(|&p| (0..8).map(move |c| p * 8 + c)).collect();
            t = ctx.tape.gather(t, idx, &[6, 8]).unwrap();
        }
        let tb = ctx.p("enc.body_tokens").unwrap();
        let out = encoder::encode_tokens(&mut ctx, &cfg.encoder, t, tb).unwrap();
        (ctx.tape.value(out.features).clone(), ctx.tape.value(out.body_tokens).clone())
    };
    let (fa, ba) = run(false);
    let (fb, bb) = run(true);
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            assert_abs_diff_eq!(fb.at(&[i, c]), fa.at(&[p, c]), epsilon = 1e-12);
        }
    }
    assert!(ba.max_abs_diff(&bb) < 1e-12);
}

#[test]
fn zero_initialized_heads_give_rest_pose_and_centred_boxes() {
    let cfg = ModelConfig::toy();
    let model = CatModel::new(cfg.clone(), 13).unwrap();
    let pred = model.predict(&image(&cfg.encoder, 14)).unwrap();
    assert_eq!(pred.params, SmplxParams::zeros());
    assert_eq!(pred.boxes, [[0.5; 4]; 3]);
}

#[test]
fn body_head_dimensions_and_gradient() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 15, 0.3);
    let tb = uniform(&mut rng(16), &[3, 8], -1.0, 1.0);
    {
        let mut ctx = Ctx::new(&store, false);
        let v = ctx.tape.constant(tb.clone());
        let out = encoder::regress_body(&mut ctx, v).unwrap();
        assert_eq!(ctx.tape.shape(out), [SmplxParams::BODY_DIM]);
        let p = SmplxParams::from_slice(&[ctx.tape.value(out).data(), &[0.0; 103]].concat()).unwrap();
        assert_eq!((p.theta_body.len(), p.beta.len(), p.t.len()), (22, 10, 3));
    }
    let names = ["enc.body_head.fc1.w", "enc.body_head.fc2.w", "enc.body_head.fc2.b"];
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let res = gradcheck::check(&inputs, FD_STEP, None, |tape, v| {
        let tbv = tape.constant(tb.clone());
        let bind: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
        Ctx::scoped(tape, &store, &bind, |ctx| {
            let out = encoder::regress_body(ctx, tbv)?;
            let theta = ctx.tape.narrow(out, 0, 0, 66)?;
            let sq = ctx.tape.mul(theta, theta)?;
            ctx.tape.sum(sq)
        })
    })
    .unwrap();
    assert_grad("body head", res);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn boxes_stay_in_unit_square(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let cfg = tiny_model();
        let store = random_store(&cfg, seed, 3.0);
        let mut ctx = Ctx::new(&store, false);
        let f = ctx.tape.constant(uniform(&mut rng(seed + 1), &[6, 8], -scale, scale));
        let b = encoder::regress_boxes(&mut ctx, f).unwrap();
        prop_assert_eq!(ctx.tape.shape(b), &[3, 4]);
        prop_assert!(ctx.tape.value(b).data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn box_loss_gradient_wrt_head_weights() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 17, 0.5);
    let feats = uniform(&mut rng(18), &[6, 8], -1.0, 1.0);
    let target = Tensor::new([3, 4], vec![0.2, 0.3, 0.1, 0.1, 0.8, 0.3, 0.1, 0.1, 0.5, 0.1, 0.2, 0.2]).unwrap();
    let names = ["enc.box_lhand.fc1.w", "enc.box_rhand.fc2.w", "enc.box_face.fc2.b"];
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let res = gradcheck::check(&inputs, FD_STEP, None, |tape, v| {
        let f = tape.constant(feats.clone());
        let t = tape.constant(target.clone());
        let bind: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
        Ctx::scoped(tape, &store, &bind, |ctx| {
            let b = encoder::regress_boxes(ctx, f)?;
            let d = ctx.tape.sub(b, t)?;
            let d = ctx.tape.mul(d, d)?;
            ctx.tape.mean(d)
        })
    })
    .unwrap();
    assert_grad("box heads", res);
}

// ---------------------------------------------------------------- decoder

#[test]
fn upsampling_shapes_and_identity_scale() {
    let enc = EncoderConfig {
        height: 256,
        width: 192,
        patch: 16,
        channels: 4,
        body_tokens: 2,
        depth: 0,
        heads: 1,
    };
    let dec = DecoderConfig {
        scales: vec![1, 2, 4],
        channels: 4,
        heads: 1,
        ..tiny_decoder()
    };
    let cfg = ModelConfig { encoder: enc, decoder: dec };
    let store = random_store(&cfg, 19, 0.3);
    let mut ctx = Ctx::new(&store, false);
    let base_t = uniform(&mut rng(20), &[4, 16, 12], -1.0, 1.0);
    let base = ctx.tape.constant(base_t.clone());
    let maps = decoder::upsample_multiscale(&mut ctx, &cfg.decoder, base).unwrap();
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| ctx.tape.shape(m).to_vec()).collect();
    assert_eq!(shapes, vec![vec![4, 16, 12], vec![4, 32, 24], vec![4, 64, 48]]);
    assert_eq!(ctx.tape.value(maps[0]), &base_t);
}

#[test]
fn upsampling_chain_gradient() {
    let mut cfg = tiny_model();
    cfg.decoder.scales = vec![1, 2, 4];
    let store = random_store(&cfg, 21, 0.3);
    let mut r = rng(22);
    let base = uniform(&mut r, &[8, 2, 3], -1.0, 1.0);
    let k0 = store.get("dec.up0").unwrap().clone();
    let k1 = store.get("dec.up1").unwrap().clone();
    let res = gradcheck::check(&[base, k0, k1], FD_STEP, None, |tape, v| {
        Ctx::scoped(tape, &store, &[("dec.up0", v[1]), ("dec.up1", v[2])], |ctx| {
            let maps = decoder::upsample_multiscale(ctx, &cfg.decoder, v[0])?;
            let a = weighted_sum(&mut ctx.tape, maps[1], 1)?;
            let b = weighted_sum(&mut ctx.tape, maps[2], 2)?;
            ctx.tape.add(a, b)
        })
    })
    .unwrap();
    assert_grad("upsample", res);
}

#[test]
fn soft_argmax_saturated_and_uniform() {
    let (ch, cw) = (4, 5);
    let centres = decoder::bin_centres(ch, cw);
    for (i, j) in [(0, 0), (2, 3), (3, 4)] {
        let mut tape = Tape::new();
        let mut l = vec![0.0; ch * cw];
        l[i * cw + j] = 20.0;
        let v = tape.constant(Tensor::new([ch * cw, 1], l).unwrap());
        let p = decoder::soft_argmax(&mut tape, v, ch, cw).unwrap();
        let p = tape.value(p).data();
        assert!((p[0] - centres.at(&[i * cw + j, 0])).abs() < 1e-6);
        assert!((p[1] - centres.at(&[i * cw + j, 1])).abs() < 1e-6);
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full([ch * cw, 3], 0.7));
    let p = decoder::soft_argmax(&mut tape, v, ch, cw).unwrap();
    for x in tape.value(p).data() {
        assert_abs_diff_eq!(*x, 0.5, epsilon = 1e-12);
    }
}

#[test]
fn soft_argmax_gradient() {
    for seed in 0..10 {
        let logits = uniform(&mut rng(seed), &[12, 5], -2.0, 2.0);
        let res = gradcheck::check(&[logits], FD_STEP, None, |tape, v| {
            let p = decoder::soft_argmax(tape, v[0], 3, 4)?;
            weighted_sum(tape, p, seed)
        })
        .unwrap();
        assert_grad("soft_argmax", res);
    }
}

#[test]
fn token_construction() {
    let cfg = tiny_model();
    let mut store = ParamStore::init(&CatModel::specs(&cfg), 23).unwrap();
    store.set("dec.hand.embed", Tensor::zeros([3, 8])).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let f = ctx.tape.constant(Tensor::zeros([8, 2, 3]));
    let refs_t = Tensor::new([3, 2], vec![0.2, 0.7, 0.5, 0.5, 0.2, 0.7]).unwrap();
    let refs = ctx.tape.constant(refs_t);
    let tok = decoder::build_tokens(&mut ctx, "dec.hand", f, refs).unwrap();
    assert_eq!(ctx.tape.shape(tok), [3, 8]);
    let pos = ctx.tape.sinusoidal_embed(refs, 8).unwrap();
    assert_eq!(ctx.tape.value(tok), ctx.tape.value(pos));

    let store = random_store(&cfg, 24, 0.5);
    let mut s2 = store.clone();
    let e = store.get("dec.hand.embed").unwrap().clone();
    let row0: Vec<f64> = e.data()[..8].to_vec();
    let mut same = e.data().to_vec();
    same[16..24].copy_from_slice(&row0);
    s2.set("dec.hand.embed", Tensor::new([3, 8], same).unwrap()).unwrap();
    let mut ctx = Ctx::new(&s2, false);
    let f = ctx.tape.constant(uniform(&mut rng(25), &[8, 2, 3], -1.0, 1.0));
    let refs = ctx.tape.constant(Tensor::new([3, 2], vec![0.2, 0.7, 0.5, 0.5, 0.2, 0.7]).unwrap());
    let tok = decoder::build_tokens(&mut ctx, "dec.hand", f, refs).unwrap();
    let t = ctx.tape.value(tok);
    assert_eq!(&t.data()[..8], &t.data()[16..24]);
    assert_ne!(&t.data()[..8], &t.data()[8..16]);
}

/// Explicit weights for one deformable layer.
struct Deform {
    c: usize,
    heads: usize,
    points: usize,
    shapes: Vec<(usize, usize)>,
    q: Tensor,
    refs: Tensor,
    values: Vec<Tensor>,
    w: Vec<Tensor>,
}

impl Deform {
    fn random(r: &mut impl Rng, k: usize, heads: usize, levels: usize, points: usize) -> Self {
        let c = 4 * heads;
        let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (r.gen_range(1..6), r.gen_range(1..6))).collect();
        let n = heads * levels * points;
        Self {
            c,
            heads,
            points,
            q: uniform(r, &[k, c], -1.0, 1.0),
            refs: uniform(r, &[k, 2], 0.0, 1.0),
            values: shapes.iter().map(|&(h, w)| uniform(r, &[h * w, c], -1.0, 1.0)).collect(),
            w: vec![
                uniform(r, &[c, 2 * n], -1.0, 1.0),
                uniform(r, &[2 * n], -2.0, 2.0),
                uniform(r, &[c, n], -1.0, 1.0),
                uniform(r, &[n], -1.0, 1.0),
                uniform(r, &[c, c], -1.0, 1.0),
                uniform(r, &[c], -1.0, 1.0),
                uniform(r, &[c, c], -1.0, 1.0),
                uniform(r, &[c], -1.0, 1.0),
            ],
            shapes,
        }
    }

    /// Draws until every sample coordinate on a non-degenerate axis is at
    /// least 0.02 px from a cell edge, so no finite-difference stencil
    /// straddles a kink of the piecewise-bilinear interpolant.
    fn kink_free(r: &mut impl Rng, k: usize, heads: usize, levels: usize, points: usize) -> Self {
        loop {
            let d = Self::random(r, k, heads, levels, points);
            if d.coords().iter().all(|&(v, n)| n == 1 || (v - v.round()).abs() > 0.02) {
                return d;
            }
        }
    }

    /// Every sample coordinate with the size of its axis.
    fn coords(&self) -> Vec<(f64, usize)> {
        let levels = self.shapes.len();
        let n = self.heads * levels * self.points;
        let k = self.q.shape()[0];
        let mut out = Vec::new();
        for q in 0..k {
            let xq = &self.q.data()[q * self.c..(q + 1) * self.c];
            for o in 0..n {
                let l = (o / self.points) % levels;
                let (lh, lw) = self.shapes[l];
                for (a, size, rf) in [(0, lw, self.refs.at(&[q, 0])), (1, lh, self.refs.at(&[q, 1]))] {
                    let j = 2 * o + a;
                    let off = self.w[1].data()[j] + (0..self.c).map(|i| xq[i] * self.w[0].at(&[i, j])).sum::<f64>();
                    out.push((rf * size as f64 - 0.5 + off, size));
                }
            }
        }
        out
    }

    fn production(&self, tape: &mut Tape, leaves: Option<&[Var]>) -> (Var, Var) {
        let mut all: Vec<Tensor> = vec![self.q.clone(), self.refs.clone()];
        all.extend(self.values.iter().cloned());
        all.extend(self.w.iter().cloned());
        let v: Vec<Var> = match leaves {
            Some(v) => v.to_vec(),
            None => all.into_iter().map(|t| tape.constant(t)).collect(),
        };
        let nl = self.values.len();
        let w = &v[2 + nl..];
        let dw = DeformWeights {
            offset_w: w[0],
            offset_b: w[1],
            attn_w: w[2],
            attn_b: w[3],
            value_w: w[4],
            value_b: w[5],
            out_w: w[6],
            out_b: w[7],
        };
        decoder::deformable_cross_attn(tape, v[0], &v[2..2 + nl], &self.shapes, v[1], &dw, self.heads, self.points)
            .unwrap()
    }

    fn inputs(&self) -> Vec<Tensor> {
        let mut all: Vec<Tensor> = vec![self.q.clone(), self.refs.clone()];
        all.extend(self.values.iter().cloned());
        all.extend(self.w.iter().cloned());
        all
    }
}

/// Independent bilinear lookup with border clamping.
fn sample(v: &Tensor, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let c = v.shape()[1];
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let t = t.max(0.0).min((n - 1) as f64);
        let i0 = t.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let i0 = if i1 == i0 && n > 1 { i0 - 1 } else { i0 };
        let f = if n > 1 { t - i0 as f64 } else { 0.0 };
        (i0, i1, f)
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    (0..c)
        .map(|ch| {
            let g = |yy: usize, xx: usize| v.at(&[yy * w + xx, ch]);
            g(y0, x0) * (1.0 - fx) * (1.0 - fy) + g(y0, x1) * fx * (1.0 - fy) + g(y1, x0) * (1.0 - fx) * fy + g(y1, x1) * fx * fy
        })
        .collect()
}

/// Multi-scale deformable attention as four nested loops over queries,
/// heads, levels and sampling points.
fn eq1_oracle(d: &Deform) -> Vec<f64> {
    let (c, heads, pts) = (d.c, d.heads, d.points);
    let levels = d.shapes.len();
    let dh = c / heads;
    let n = heads * levels * pts;
    let k = d.q.shape()[0];
    let lin = |x: &[f64], w: &Tensor, b: &Tensor, j: usize| -> f64 {
        b.data()[j] + (0..x.len()).map(|i| x[i] * w.at(&[i, j])).sum::<f64>()
    };
    let mut out = vec![0.0; k * c];
    for q in 0..k {
        let xq = &d.q.data()[q * c..(q + 1) * c];
        let off: Vec<f64> = (0..2 * n).map(|j| lin(xq, &d.w[0], &d.w[1], j)).collect();
        let logit: Vec<f64> = (0..n).map(|j| lin(xq, &d.w[2], &d.w[3], j)).collect();
        let mut acc = vec![0.0; c];
        for h in 0..heads {
            let group = &logit[h * levels * pts..(h + 1) * levels * pts];
            let mx = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = group.iter().map(|g| (g - mx).exp()).sum();
            for l in 0..levels {
                let (lh, lw) = d.shapes[l];
                for p in 0..pts {
                    let o = (h * levels + l) * pts + p;
                    let a = (group[l * pts + p] - mx).exp() / z;
                    let x = d.refs.at(&[q, 0]) * lw as f64 - 0.5 + off[2 * o];
                    let y = d.refs.at(&[q, 1]) * lh as f64 - 0.5 + off[2 * o + 1];
                    let s = sample(&d.values[l], lh, lw, x, y);
                    for ch in h * dh..(h + 1) * dh {
                        acc[ch] += a * lin(&s, &d.w[4], &d.w[5], ch);
                    }
                }
            }
        }
        for j in 0..c {
            out[q * c + j] = lin(&acc, &d.w[6], &d.w[7], j);
        }
    }
    out
}

#[test]
fn deformable_attention_matches_nested_loop_oracle() {
    let mut r = rng(26);
    for case in 0..100 {
        let levels = 1 + case % 3;
        let heads = 1 + (case / 3) % 2;
        let points = [1, 2, 4][(case / 6) % 3];
        let k = r.gen_range(1..=8);
        let d = Deform::random(&mut r, k, heads, levels, points);
        let mut tape = Tape::new();
        let (out, attn) = d.production(&mut tape, None);
        let expect = eq1_oracle(&d);
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
        }
        let n = heads * levels * points;
        for row in tape.value(attn).data().chunks(n / heads) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_deformable_attention_is_a_bilinear_lookup() {
    let mut r = rng(27);
    let c = 4;
    let (h, w) = (5, 6);
    let map = uniform(&mut r, &[c, h, w], -1.0, 1.0);
    let refs_t = uniform(&mut r, &[3, 2], 0.0, 1.0);
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let flat = tape.reshape(m, &[c, h * w]).unwrap();
    let rows = tape.transpose(flat).unwrap();
    let q = tape.constant(uniform(&mut r, &[3, c], -1.0, 1.0));
    let refs = tape.constant(refs_t.clone());
    let z = |tape: &mut Tape, s: &[usize]| tape.constant(Tensor::zeros(s.to_vec()));
    let dw = DeformWeights {
        offset_w: z(&mut tape, &[c, 2]),
        offset_b: z(&mut tape, &[2]),
        attn_w: z(&mut tape, &[c, 1]),
        attn_b: z(&mut tape, &[1]),
        value_w: tape.constant(Tensor::eye(c)),
        value_b: z(&mut tape, &[c]),
        out_w: tape.constant(Tensor::eye(c)),
        out_b: z(&mut tape, &[c]),
    };
    let (out, _) = decoder::deformable_cross_attn(&mut tape, q, &[rows], &[(h, w)], refs, &dw, 1, 1).unwrap();
    let px = decoder::to_pixels(&mut tape, refs, h, w).unwrap();
    let direct = tape.bilinear_sample(m, px).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(direct)) < 1e-15);
}

#[test]
fn deformable_attention_is_invariant_to_level_order() {
    let mut r = rng(28);
    for _ in 0..20 {
        let (heads, levels, points) = (2, 3, 2);
        let d = Deform::random(&mut r, 5, heads, levels, points);
        let perm = [2usize, 0, 1];
        let mut p = Deform {
            shapes: perm.iter().map(|&l| d.shapes[l]).collect(),
            values: perm.iter().map(|&l| d.values[l].clone()).collect(),
            w: d.w.clone(),
            q: d.q.clone(),
            refs: d.refs.clone(),
            ..d
        };
        let n = heads * levels * points;
        // Column of (head, level, point) in the permuted layout comes from
        // (head, perm[level], point) in the original one.
        let src = |j: usize| {
            let (h, rest) = (j / (levels * points), j % (levels * points));
            (h * levels + perm[rest / points]) * points + rest % points
        };
        let c = p.c;
        let off_w = Tensor::from_fn([c, 2 * n], |i| {
            let (row, col) = (i / (2 * n), i % (2 * n));
            d.w[0].at(&[row, 2 * src(col / 2) + col % 2])
        });
        let off_b = Tensor::from_fn([2 * n], |col| d.w[1].data()[2 * src(col / 2) + col % 2]);
        let att_w = Tensor::from_fn([c, n], |i| d.w[2].at(&[i / n, src(i % n)]));
        let att_b = Tensor::from_fn([n], |col| d.w[3].data()[src(col)]);
        p.w[0] = off_w;
        p.w[1] = off_b;
        p.w[2] = att_w;
        p.w[3] = att_b;
        let mut t1 = Tape::new();
        let (o1, _) = d.production(&mut t1, None);
        let mut t2 = Tape::new();
        let (o2, _) = p.production(&mut t2, None);
        assert!(t1.value(o1).max_abs_diff(t2.value(o2)) < 1e-12);
    }
}

#[test]
fn deformable_attention_gradient() {
    let mut r = rng(29);
    for case in 0..10 {
        let d = Deform::kink_free(&mut r, 3, 1 + case % 2, 1 + case % 3, 2);
        let res = gradcheck::check(&d.inputs(), FD_STEP, None, |tape, v| {
            let (o, _) = d.production(tape, Some(v));
            weighted_sum(tape, o, case as u64)
        })
        .unwrap();
        assert_grad("deformable attention", res);
    }
}

#[test]
fn zero_blocks_pass_tokens_through() {
    let mut cfg = tiny_model();
    cfg.decoder.blocks = 0;
    let store = random_store(&cfg, 30, 0.5);
    let mut ctx = Ctx::new(&store, false);
    let tok = ctx.tape.constant(uniform(&mut rng(31), &[3, 8], -1.0, 1.0));
    let refs = ctx.tape.constant(Tensor::full([3, 2], 0.5));
    let out = decoder::decode_blocks(&mut ctx, &cfg.decoder, "dec.hand", tok, &[], &[], refs).unwrap();
    assert_eq!(out, tok);
}

fn levels_for(ctx: &mut Ctx, cfg: &ModelConfig, base: Tensor) -> Vec<Var> {
    let b = ctx.tape.constant(base);
    decoder::upsample_multiscale(ctx, &cfg.decoder, b).unwrap()
}

#[test]
fn component_output_dimensions() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 32, 0.3);
    for (pw, k, dim) in [(Pathway::Hand, 3, 45), (Pathway::Face, 4, 13)] {
        let mut ctx = Ctx::new(&store, false);
        let levels = levels_for(&mut ctx, &cfg, uniform(&mut rng(33), &[8, 2, 3], -1.0, 1.0));
        let b = ctx.tape.constant(Tensor::new([1, 4], vec![0.4, 0.6, 0.5, 0.5]).unwrap());
        let out = decoder::decode_component(&mut ctx, &cfg.decoder, pw, &levels, b, false).unwrap();
        assert_eq!(ctx.tape.shape(out.params), [dim]);
        assert_eq!(ctx.tape.shape(out.tokens), [k, 8]);
        assert_eq!(ctx.tape.shape(out.refs), [k, 2]);
        assert!(ctx.tape.value(out.refs).data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn decoder_gradient_wrt_low_resolution_features() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 34, 0.3);
    let bx = Tensor::new([1, 4], vec![0.45, 0.55, 0.6, 0.7]).unwrap();
    for seed in 0..10 {
        let base = uniform(&mut rng(35 + seed), &[8, 2, 3], -1.0, 1.0);
        let res = gradcheck::check(&[base], FD_STEP, None, |tape, v| {
            let b = tape.constant(bx.clone());
            Ctx::scoped(tape, &store, &[], |ctx| {
                let levels = decoder::upsample_multiscale(ctx, &cfg.decoder, v[0])?;
                let out = decoder::decode_component(ctx, &cfg.decoder, Pathway::Hand, &levels, b, false)?;
                weighted_sum(&mut ctx.tape, out.tokens, seed)
            })
        })
        .unwrap();
        assert_grad("decoder", res);
    }
}

#[test]
fn head_weights_gradient() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 36, 0.3);
    let tokens = uniform(&mut rng(37), &[4, 8], -1.0, 1.0);
    let names = ["dec.face.head.fc1.w", "dec.face.head.fc2.w", "dec.face.head.ln.g"];
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let res = gradcheck::check(&inputs, FD_STEP, None, |tape, v| {
        let t = tape.constant(tokens.clone());
        let bind: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
        Ctx::scoped(tape, &store, &bind, |ctx| {
            let o = decoder::regress_component(ctx, Pathway::Face, t)?;
            weighted_sum(&mut ctx.tape, o, 3)
        })
    })
    .unwrap();
    assert_grad("face head", res);
}

#[test]
fn zero_heads_give_flat_hand_and_neutral_face() {
    let cfg = tiny_model();
    let store = ParamStore::init(&CatModel::specs(&cfg), 38).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let t = ctx.tape.constant(uniform(&mut rng(39), &[3, 8], -1.0, 1.0));
    let h = decoder::regress_component(&mut ctx, Pathway::Hand, t).unwrap();
    assert!(ctx.tape.value(h).data().iter().all(|&x| x == 0.0));
    let t = ctx.tape.constant(uniform(&mut rng(40), &[4, 8], -1.0, 1.0));
    let f = decoder::regress_component(&mut ctx, Pathway::Face, t).unwrap();
    assert_eq!(ctx.tape.shape(f), [13]);
    assert!(ctx.tape.value(f).data().iter().all(|&x| x == 0.0));
}

fn flip_columns(map: &Tensor) -> Tensor {
    let s = map.shape().to_vec();
    Tensor::from_fn(s.clone(), |i| {
        let (c, rest) = (i / (s[1] * s[2]), i % (s[1] * s[2]));
        let (y, x) = (rest / s[2], rest % s[2]);
        map.at(&[c, y, s[2] - 1 - x])
    })
}

#[test]
fn mirrored_left_pathway_round_trips_to_right_hand() {
    let cfg = tiny_model();
    let store = random_store(&cfg, 41, 0.4);
    for seed in 0..5 {
        let mut r = rng(42 + seed);
        let maps: Vec<Tensor> = cfg
            .decoder
            .scales
            .iter()
            .map(|&s| uniform(&mut r, &[8, 4 * s, 6 * s], -1.0, 1.0))
            .collect();
        let bx = [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.2..0.5), r.gen_range(0.2..0.5)];
        let run = |maps: &[Tensor], bx: [f64; 4], mirror: bool| {
            let mut ctx = Ctx::new(&store, false);
            let levels: Vec<Var> = maps.iter().map(|m| ctx.tape.constant(m.clone())).collect();
            let b = ctx.tape.constant(Tensor::new([1, 4], bx.to_vec()).unwrap());
            let out = decoder::decode_component(&mut ctx, &cfg.decoder, Pathway::Hand, &levels, b, mirror).unwrap();
            ctx.tape.value(out.params).clone()
        };
        let right = run(&maps, bx, false);
        let flipped: Vec<Tensor> = maps.iter().map(flip_columns).collect();
        let left = run(&flipped, [1.0 - bx[0], bx[1], bx[2], bx[3]], true);
        // The mirrored crop of the flipped image is the original crop, so
        // the pathway sees identical input; only the axis-angle convention
        // differs between the two hands.
        assert!(left.max_abs_diff(&right) < 1e-12, "seed {seed}");
        let signs = decoder::mirror_signs();
        for j in 0..15 {
            let l = &left.data()[3 * j..3 * j + 3];
            let flipped = mirror_axis_angle([l[0], l[1], l[2]]);
            for a in 0..3 {
                assert_eq!(flipped[a], l[a] * signs.data()[3 * j + a]);
            }
        }
    }
}

// ---------------------------------------------------------------- full model

#[test]
fn full_forward_layout_and_determinism() {
    let cfg = ModelConfig::toy();
    let mut model = CatModel::new(cfg.clone(), 43).unwrap();
    let mut r = rng(44);
    for t in model.params.tensors_mut() {
        let s = t.shape().to_vec();
        let noise = uniform(&mut r, &s, -0.02, 0.02);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    let img = image(&cfg.encoder, 45);
    let a = model.predict(&img).unwrap();
    let b = model.predict(&img).unwrap();
    assert_eq!(a, b);
    let mut ctx = model.ctx(false);
    let iv = ctx.tape.constant(img);
    let out = model.forward(&mut ctx, iv).unwrap();
    assert_eq!(ctx.tape.shape(out.params), [SmplxParams::DIM]);
    assert_eq!(out.components.len(), 3);
    let k: usize = out.components.iter().map(|c| ctx.tape.shape(c.tokens)[0]).sum();
    assert_eq!(k, 92);
    let flat = ctx.tape.value(out.params).data();
    assert_eq!(&flat[..79], ctx.tape.value(out.body).data());
    let signs = decoder::mirror_signs();
    let lh = ctx.tape.value(out.components[0].params).data();
    for i in 0..45 {
        assert_eq!(flat[79 + i], lh[i] * signs.data()[i]);
    }
    assert_eq!(&flat[124..169], ctx.tape.value(out.components[1].params).data());
    assert_eq!(&flat[169..], ctx.tape.value(out.components[2].params).data());
}

#[test]
fn ablation_arms_share_the_body_pathway() {
    let base = ModelConfig::toy();
    let arms = [
        base.clone(),
        ModelConfig {
            decoder: DecoderConfig {
                keypoint_guided: false,
                ..base.decoder.clone()
            },
            ..base.clone()
        },
        ModelConfig {
            decoder: DecoderConfig {
                enabled: false,
                ..base.decoder.clone()
            },
            ..base.clone()
        },
    ];
    let img = image(&base.encoder, 46);
    let bodies: Vec<Tensor> = arms
        .iter()
        .map(|cfg| {
            let mut model = CatModel::new(cfg.clone(), 47).unwrap();
            model
                .params
                .set("enc.body_head.fc2.w", uniform(&mut rng(48), &[64, 79], -0.1, 0.1))
                .unwrap();
            let mut ctx = model.ctx(false);
            let iv = ctx.tape.constant(img.clone());
            let out = model.forward(&mut ctx, iv).unwrap();
            assert_eq!(ctx.tape.shape(out.params), [SmplxParams::DIM]);
            ctx.tape.value(out.body).clone()
        })
        .collect();
    assert!(bodies.iter().any(|b| b.data().iter().any(|&x| x != 0.0)));
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0], bodies[2]);
}

#[test]
fn parameter_layout_mismatch_is_named() {
    let cfg = tiny_model();
    let store = ParamStore::init(&CatModel::specs(&cfg), 1).unwrap();
    let mut other = cfg.clone();
    other.encoder.channels = 16;
    let err = CatModel::from_params(other, store).unwrap_err().to_string();
    assert!(err.contains("enc.patch.w"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_model();
    c.encoder.patch = 5;
    assert!(c.validate().is_err());
    let mut c = tiny_model();
    c.decoder.scales = vec![1, 3];
    assert!(c.validate().is_err());
    let mut c = tiny_model();
    c.decoder.scales = vec![2, 4];
    assert!(c.validate().is_err());
    let mut c = tiny_model();
    c.encoder.heads = 3;
    assert!(c.validate().is_err());
}

