//! Component decoder: upsample-crop, reference keypoints, keypoint-guided
//! tokens, deformable attention blocks and the hand/face heads.

use std::f64::consts::TAU;

use super::config::{DecoderConfig, EncoderConfig};
use super::params::{Ctx, Init, SpecList};
use crate::body::SmplxParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Decoder pathway. Both hands share the `Hand` weights; the left hand is
/// decoded from a horizontally mirrored crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Hand,
    Face,
}

impl Pathway {
    pub fn prefix(self) -> &'static str {
        match self {
            Pathway::Hand => "dec.hand",
            Pathway::Face => "dec.face",
        }
    }

    pub fn tokens(self, cfg: &DecoderConfig) -> usize {
        match self {
            Pathway::Hand => cfg.k_hand,
            Pathway::Face => cfg.k_face,
        }
    }

    pub fn out_dim(self) -> usize {
        match self {
            Pathway::Hand => SmplxParams::HAND_DIM,
            Pathway::Face => SmplxParams::FACE_DIM,
        }
    }
}

/// Output width of the encoder-only fallback head: both hands and face.
pub const FALLBACK_DIM: usize = 2 * SmplxParams::HAND_DIM + SmplxParams::FACE_DIM;

/// Number of stride-2 deconvolutions needed for the largest scale.
fn doublings(cfg: &DecoderConfig) -> usize {
    cfg.scales.last().map_or(0, |s| s.trailing_zeros() as usize)
}

/// Per-channel bilinear x2 upsampling kernel `[C, C, 4, 4]`.
fn bilinear_kernel(c: usize) -> Tensor {
    const W: [f64; 4] = [0.25, 0.75, 0.75, 0.25];
    let mut k = Tensor::zeros([c, c, 4, 4]);
    for ch in 0..c {
        for i in 0..4 {
            for j in 0..4 {
                k.data_mut()[((ch * c + ch) * 4 + i) * 4 + j] = W[i] * W[j];
            }
        }
    }
    k
}

/// Initial offset bias: every head's points on a one-pixel ring, repeated
/// for each level.
pub fn ring_offsets(heads: usize, levels: usize, points: usize) -> Tensor {
    let mut v = Vec::with_capacity(heads * levels * points * 2);
    for h in 0..heads {
        for _ in 0..levels {
            for p in 0..points {
                let a = TAU * (h * points + p) as f64 / (heads * points) as f64;
                v.extend([a.cos(), a.sin()]);
            }
        }
    }
    Tensor::new([heads * levels * points * 2], v).expect("ring size")
}

pub(crate) fn specs(enc: &EncoderConfig, cfg: &DecoderConfig, out: &mut SpecList) {
    let c = enc.channels;
    if !cfg.enabled {
        out.linear("dec.fallback.fc1", enc.body_tokens * c, c, false);
        out.linear("dec.fallback.fc2", c, FALLBACK_DIM, true);
        return;
    }
    for i in 0..doublings(cfg) {
        out.push(format!("dec.up{i}"), &[c, c, 4, 4], Init::Value(bilinear_kernel(c)));
    }
    let cp = cfg.channels;
    let levels = cfg.scales.len();
    let n = cfg.heads * levels * cfg.points;
    for pw in [Pathway::Hand, Pathway::Face] {
        let p = pw.prefix();
        let k = pw.tokens(cfg);
        if cfg.keypoint_guided {
            out.linear(&format!("{p}.kpt"), c, k, false);
            out.linear(&format!("{p}.token_proj"), c, cp, false);
        }
        out.push(format!("{p}.embed"), &[k, cp], Init::TruncNormal);
        for l in 0..levels {
            out.linear(&format!("{p}.value{l}"), c, cp, false);
        }
        for i in 0..cfg.blocks {
            let b = format!("{p}.block{i}");
            out.layer_norm(&format!("{b}.ln1"), cp);
            out.mhsa(&format!("{b}.self"), cp);
            out.layer_norm(&format!("{b}.ln2"), cp);
            out.push(format!("{b}.cross.offset.w"), &[cp, 2 * n], Init::Zeros);
            out.push(
                format!("{b}.cross.offset.b"),
                &[2 * n],
                Init::Value(ring_offsets(cfg.heads, levels, cfg.points)),
            );
            out.linear(&format!("{b}.cross.attn"), cp, n, true);
            out.linear(&format!("{b}.cross.value"), cp, cp, false);
            out.linear(&format!("{b}.cross.out"), cp, cp, false);
            out.layer_norm(&format!("{b}.ln3"), cp);
            out.ffn(&format!("{b}.ffn"), cp, 4 * cp);
        }
        out.layer_norm(&format!("{p}.head.ln"), cp);
        out.linear(&format!("{p}.head.fc1"), k * cp, c, false);
        out.linear(&format!("{p}.head.fc2"), c, pw.out_dim(), true);
    }
}

/// Reshapes `T_f'` `[N, C]` to the base map `[C, H/M, W/M]`.
pub fn feature_map(tape: &mut Tape, enc: &EncoderConfig, features: Var) -> Result<Var> {
    let (gh, gw) = enc.grid();
    let t = tape.transpose(features)?;
    tape.reshape(t, &[enc.channels, gh, gw])
}

/// Maps at every configured scale; scale 1 is `base` itself and higher
/// scales come from chained stride-2 deconvolutions.
pub fn upsample_multiscale(ctx: &mut Ctx, cfg: &DecoderConfig, base: Var) -> Result<Vec<Var>> {
    let mut chain = vec![base];
    for i in 0..doublings(cfg) {
        let k = ctx.p(&format!("dec.up{i}"))?;
        let prev = *chain.last().expect("non-empty");
        chain.push(ctx.tape.conv_transpose2d(prev, k, 2)?);
    }
    Ok(cfg
        .scales
        .iter()
        .map(|s| chain[s.trailing_zeros() as usize])
        .collect())
}

/// Bin centres `[ch*cw, 2]` of a crop in normalized `(x, y)`, row-major.
pub fn bin_centres(ch: usize, cw: usize) -> Tensor {
    let mut v = Vec::with_capacity(ch * cw * 2);
    for i in 0..ch {
        for j in 0..cw {
            v.extend([(j as f64 + 0.5) / cw as f64, (i as f64 + 0.5) / ch as f64]);
        }
    }
    Tensor::new([ch * cw, 2], v).expect("grid size")
}

/// Expected normalized coordinates `[K, 2]` under a spatial softmax of
/// `logits[ch*cw, K]` (one heatmap per column).
pub fn soft_argmax(tape: &mut Tape, logits: Var, ch: usize, cw: usize) -> Result<Var> {
    if tape.shape(logits).first() != Some(&(ch * cw)) || tape.shape(logits).len() != 2 {
        return Err(Error::shape("soft_argmax", tape.shape(logits), &[ch * cw, 0]));
    }
    let prob = tape.softmax(logits, 0)?;
    let grid = tape.constant(bin_centres(ch, cw));
    tape.matmul_t(prob, grid, true, false)
}

/// `[C, h, w]` map to `[h*w, C]` rows.
fn map_rows(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    let r = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    tape.transpose(r)
}

/// Reference keypoints `[K, 2]` and heatmap logits `[h*w, K]` from `F_lr`.
pub fn reference_keypoints(ctx: &mut Ctx, p: &str, f_lr: Var) -> Result<(Var, Var)> {
    let s = ctx.tape.shape(f_lr).to_vec();
    let rows = map_rows(&mut ctx.tape, f_lr)?;
    let logits = ctx.linear(rows, &format!("{p}.kpt"))?;
    let pts = soft_argmax(&mut ctx.tape, logits, s[1], s[2])?;
    Ok((pts, logits))
}

/// Normalized points `[K, 2]` to pixel coordinates of an `h x w` map.
pub fn to_pixels(tape: &mut Tape, points: Var, h: usize, w: usize) -> Result<Var> {
    let k = tape.shape(points)[0];
    let s = tape.constant(Tensor::from_fn([k, 2], |i| if i % 2 == 0 { w as f64 } else { h as f64 }));
    let px = tape.mul(points, s)?;
    tape.shift(px, -0.5)
}

/// Keypoint-guided tokens `[K, C']`: reduced feature at each reference
/// point, plus its sinusoidal embedding, plus a learnable embedding.
pub fn build_tokens(ctx: &mut Ctx, p: &str, f_lr: Var, refs: Var) -> Result<Var> {
    let s = ctx.tape.shape(f_lr).to_vec();
    let px = to_pixels(&mut ctx.tape, refs, s[1], s[2])?;
    let feat = ctx.tape.bilinear_sample(f_lr, px)?;
    let feat = ctx.linear(feat, &format!("{p}.token_proj"))?;
    let embed = ctx.p(&format!("{p}.embed"))?;
    let cp = ctx.tape.shape(embed)[1];
    let pos = ctx.tape.sinusoidal_embed(refs, cp)?;
    let t = ctx.tape.add(feat, pos)?;
    ctx.tape.add(t, embed)
}

/// Weights of one deformable cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct DeformWeights {
    /// `[C', heads*L*P*2]`, `[heads*L*P*2]`
    pub offset_w: Var,
    pub offset_b: Var,
    /// `[C', heads*L*P]`, `[heads*L*P]`
    pub attn_w: Var,
    pub attn_b: Var,
    /// `W`: `[C', C']`, `[C']`
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl DeformWeights {
    pub fn bind(ctx: &mut Ctx, p: &str) -> Result<Self> {
        Ok(Self {
            offset_w: ctx.p(&format!("{p}.offset.w"))?,
            offset_b: ctx.p(&format!("{p}.offset.b"))?,
            attn_w: ctx.p(&format!("{p}.attn.w"))?,
            attn_b: ctx.p(&format!("{p}.attn.b"))?,
            value_w: ctx.p(&format!("{p}.value.w"))?,
            value_b: ctx.p(&format!("{p}.value.b"))?,
            out_w: ctx.p(&format!("{p}.out.w"))?,
            out_b: ctx.p(&format!("{p}.out.b"))?,
        })
    }
}

/// Multi-scale deformable cross-attention.
///
/// `queries` is `[K, C']`, `values[l]` is `[h_l * w_l, C']` with
/// `shapes[l] = (h_l, w_l)`, `refs` is `[K, 2]` normalized. Offsets are in
/// level pixels. Returns the output `[K, C']` and the normalized attention
/// weights `[K, heads*L*P]`.
pub fn deformable_cross_attn(
    tape: &mut Tape,
    queries: Var,
    values: &[Var],
    shapes: &[(usize, usize)],
    refs: Var,
    w: &DeformWeights,
    heads: usize,
    points: usize,
) -> Result<(Var, Var)> {
    let k = tape.shape(queries)[0];
    let n = heads * values.len() * points;
    if tape.shape(w.attn_w).get(1) != Some(&n) {
        return Err(Error::invalid(
            "deformable_cross_attn",
            format!("attention predictor {:?} does not match {} levels", tape.shape(w.attn_w), values.len()),
        ));
    }
    let offsets = tape.linear(queries, w.offset_w, Some(w.offset_b))?;
    let logits = tape.linear(queries, w.attn_w, Some(w.attn_b))?;
    let logits = tape.reshape(logits, &[k * heads, n / heads])?;
    let attn = tape.softmax(logits, 1)?;
    let attn = tape.reshape(attn, &[k, n])?;
    let projected = values
        .iter()
        .map(|&v| tape.linear(v, w.value_w, Some(w.value_b)))
        .collect::<Result<Vec<_>>>()?;
    let s = tape.ms_deform_attn(&projected, shapes, refs, offsets, attn, heads, points)?;
    Ok((tape.linear(s, w.out_w, Some(w.out_b))?, attn))
}

/// `N` blocks of self-attention, deformable cross-attention and FFN, each
/// pre-norm with a residual. Reference points stay fixed.
#[allow(clippy::too_many_arguments)]
pub fn decode_blocks(
    ctx: &mut Ctx,
    cfg: &DecoderConfig,
    p: &str,
    tokens: Var,
    values: &[Var],
    shapes: &[(usize, usize)],
    refs: Var,
) -> Result<Var> {
    let mut x = tokens;
    for i in 0..cfg.blocks {
        let b = format!("{p}.block{i}");
        let h = ctx.layer_norm(x, &format!("{b}.ln1"))?;
        let (a, _) = ctx.mhsa(h, &format!("{b}.self"), cfg.heads)?;
        x = ctx.tape.add(x, a)?;
        let h = ctx.layer_norm(x, &format!("{b}.ln2"))?;
        let w = DeformWeights::bind(ctx, &format!("{b}.cross"))?;
        let (a, _) = deformable_cross_attn(&mut ctx.tape, h, values, shapes, refs, &w, cfg.heads, cfg.points)?;
        x = ctx.tape.add(x, a)?;
        let h = ctx.layer_norm(x, &format!("{b}.ln3"))?;
        let f = ctx.ffn(h, &format!("{b}.ffn"))?;
        x = ctx.tape.add(x, f)?;
    }
    Ok(x)
}

/// Flatten-FC head: `[K, C']` tokens to the pathway's parameter vector.
pub fn regress_component(ctx: &mut Ctx, pw: Pathway, tokens: Var) -> Result<Var> {
    let p = pw.prefix();
    let x = ctx.layer_norm(tokens, &format!("{p}.head.ln"))?;
    let n = ctx.tape.value(x).numel();
    let flat = ctx.tape.reshape(x, &[1, n])?;
    let h = ctx.linear(flat, &format!("{p}.head.fc1"))?;
    let h = ctx.tape.gelu(h)?;
    let o = ctx.linear(h, &format!("{p}.head.fc2"))?;
    ctx.tape.reshape(o, &[pw.out_dim()])
}

pub struct ComponentOutput {
    /// Hand pose `[45]` (in the crop's own frame, before any un-mirroring)
    /// or face `[jaw, phi]` `[13]`.
    pub params: Var,
    /// `[K, 2]` reference points, normalized to the crop.
    pub refs: Var,
    /// `[h*w, K]` heatmap logits when keypoint guidance is on.
    pub heatmaps: Option<Var>,
    /// Decoded tokens `[K, C']`.
    pub tokens: Var,
}

/// Crops every level inside `boxv` (`[1, 4]` or `[4]`), builds the tokens
/// and decodes them.
pub fn decode_component(
    ctx: &mut Ctx,
    cfg: &DecoderConfig,
    pw: Pathway,
    levels: &[Var],
    boxv: Var,
    mirror: bool,
) -> Result<ComponentOutput> {
    if levels.len() != cfg.scales.len() {
        return Err(Error::invalid(
            "decode_component",
            format!("{} maps for {} scales", levels.len(), cfg.scales.len()),
        ));
    }
    let p = pw.prefix();
    let k = pw.tokens(cfg);
    let mut crops = Vec::with_capacity(levels.len());
    let mut shapes = Vec::with_capacity(levels.len());
    let mut values = Vec::with_capacity(levels.len());
    for (l, (&map, &s)) in levels.iter().zip(&cfg.scales).enumerate() {
        let (h, w) = (cfg.crop_h * s, cfg.crop_w * s);
        let crop = ctx.tape.roi_align(map, boxv, h, w, mirror)?;
        let rows = map_rows(&mut ctx.tape, crop)?;
        values.push(ctx.linear(rows, &format!("{p}.value{l}"))?);
        shapes.push((h, w));
        crops.push(crop);
    }
    let f_lr = crops[0];
    let (refs, heatmaps, tokens) = if cfg.keypoint_guided {
        let (refs, logits) = reference_keypoints(ctx, p, f_lr)?;
        let tokens = build_tokens(ctx, p, f_lr, refs)?;
        (refs, Some(logits), tokens)
    } else {
        let refs = ctx.tape.constant(Tensor::full([k, 2], 0.5));
        (refs, None, ctx.p(&format!("{p}.embed"))?)
    };
    let tokens = decode_blocks(ctx, cfg, p, tokens, &values, &shapes, refs)?;
    let params = regress_component(ctx, pw, tokens)?;
    Ok(ComponentOutput {
        params,
        refs,
        heatmaps,
        tokens,
    })
}

/// Per-joint sign pattern mapping a hand pose between the mirrored and
/// the original frame: `(x, y, z) -> (x, -y, -z)`.
pub fn mirror_signs() -> Tensor {
    Tensor::from_fn([SmplxParams::HAND_DIM], |i| if i % 3 == 0 { 1.0 } else { -1.0 })
}

/// Encoder-only fallback: `[lhand, rhand, jaw, phi]` (103 values) from the
/// body tokens.
pub fn regress_fallback(ctx: &mut Ctx, body_tokens: Var) -> Result<Var> {
    let n = ctx.tape.value(body_tokens).numel();
    let flat = ctx.tape.reshape(body_tokens, &[1, n])?;
    let h = ctx.linear(flat, "dec.fallback.fc1")?;
    let h = ctx.tape.gelu(h)?;
    let o = ctx.linear(h, "dec.fallback.fc2")?;
    ctx.tape.reshape(o, &[FALLBACK_DIM])
}
