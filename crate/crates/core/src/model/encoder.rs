//! Patch embedding, body tokens, pre-norm transformer blocks and the
//! encoder heads.

use super::config::EncoderConfig;
use super::params::{Ctx, Init, SpecList};
use crate::body::SmplxParams;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub(crate) fn specs(cfg: &EncoderConfig, out: &mut SpecList) {
    let c = cfg.channels;
    let m = cfg.patch;
    out.linear("enc.patch", m * m * 3, c, false);
    out.push("enc.pos", &[cfg.num_patches(), c], Init::TruncNormal);
    out.push("enc.body_tokens", &[cfg.body_tokens, c], Init::TruncNormal);
    for i in 0..cfg.depth {
        out.layer_norm(&format!("enc.block{i}.ln1"), c);
        out.mhsa(&format!("enc.block{i}.attn"), c);
        out.layer_norm(&format!("enc.block{i}.ln2"), c);
        out.ffn(&format!("enc.block{i}.ffn"), c, 4 * c);
    }
    out.layer_norm("enc.ln", c);
    out.linear("enc.body_head.fc1", cfg.body_tokens * c, c, false);
    out.linear("enc.body_head.fc2", c, SmplxParams::BODY_DIM, true);
    for b in BOX_NAMES {
        out.linear(&format!("enc.box_{b}.fc1"), c, c, false);
        out.linear(&format!("enc.box_{b}.fc2"), c, 4, true);
    }
}

/// Box head order: left hand, right hand, face.
pub const BOX_NAMES: [&str; 3] = ["lhand", "rhand", "face"];

/// Gather indices turning an `[H, W, 3]` image into `[N, M*M*3]` patch
/// rows: patches in row-major grid order, each flattened as
/// (row, column, channel).
pub fn patch_index(cfg: &EncoderConfig) -> Vec<usize> {
    let (gh, gw) = cfg.grid();
    let m = cfg.patch;
    let mut idx = Vec::with_capacity(cfg.height * cfg.width * 3);
    for pi in 0..gh {
        for pj in 0..gw {
            for r in 0..m {
                for c in 0..m {
                    let base = ((pi * m + r) * cfg.width + pj * m + c) * 3;
                    idx.extend([base, base + 1, base + 2]);
                }
            }
        }
    }
    idx
}

/// Patch projection without position embeddings, `[N, C]`.
pub fn patch_tokens(ctx: &mut Ctx, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let shape = ctx.tape.shape(image).to_vec();
    if shape != [cfg.height, cfg.width, 3] {
        return Err(Error::shape("patchify", &shape, &[cfg.height, cfg.width, 3]));
    }
    let m = cfg.patch;
    let patches = ctx.tape.gather(image, patch_index(cfg), &[cfg.num_patches(), m * m * 3])?;
    ctx.linear(patches, "enc.patch")
}

/// `T_f`: projected patches plus position embeddings, `[N, C]`.
pub fn patchify_embed(ctx: &mut Ctx, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let t = patch_tokens(ctx, cfg, image)?;
    let pos = ctx.p("enc.pos")?;
    ctx.tape.add(t, pos)
}

pub struct EncoderOutput {
    /// `T_f'`, `[N, C]`.
    pub features: Var,
    /// `T_b'`, `[B, C]`.
    pub body_tokens: Var,
    /// Post-softmax attention `[N+B, N+B]`, indexed `[block][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Runs the blocks over `[T_f; T_b]` and splits the result back.
pub fn encode_tokens(ctx: &mut Ctx, cfg: &EncoderConfig, tf: Var, tb: Var) -> Result<EncoderOutput> {
    let n = ctx.tape.shape(tf)[0];
    let b = ctx.tape.shape(tb)[0];
    let mut x = ctx.tape.concat(&[tf, tb], 0)?;
    let mut attention = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let h = ctx.layer_norm(x, &format!("enc.block{i}.ln1"))?;
        let (a, maps) = ctx.mhsa(h, &format!("enc.block{i}.attn"), cfg.heads)?;
        x = ctx.tape.add(x, a)?;
        let h = ctx.layer_norm(x, &format!("enc.block{i}.ln2"))?;
        let f = ctx.ffn(h, &format!("enc.block{i}.ffn"))?;
        x = ctx.tape.add(x, f)?;
        attention.push(maps);
    }
    let x = ctx.layer_norm(x, "enc.ln")?;
    Ok(EncoderOutput {
        features: ctx.tape.narrow(x, 0, 0, n)?,
        body_tokens: ctx.tape.narrow(x, 0, n, b)?,
        attention,
    })
}

pub fn encode(ctx: &mut Ctx, cfg: &EncoderConfig, image: Var) -> Result<EncoderOutput> {
    let tf = patchify_embed(ctx, cfg, image)?;
    let tb = ctx.p("enc.body_tokens")?;
    encode_tokens(ctx, cfg, tf, tb)
}

/// Body slice `[theta_body, beta, t]` (79 values) from all body tokens.
pub fn regress_body(ctx: &mut Ctx, body_tokens: Var) -> Result<Var> {
    let n = ctx.tape.value(body_tokens).numel();
    let flat = ctx.tape.reshape(body_tokens, &[1, n])?;
    let h = ctx.linear(flat, "enc.body_head.fc1")?;
    let h = ctx.tape.gelu(h)?;
    let out = ctx.linear(h, "enc.body_head.fc2")?;
    ctx.tape.reshape(out, &[SmplxParams::BODY_DIM])
}

/// Mean pooling as a product with a constant averaging row.
pub(crate) fn mean_rows(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let n = ctx.tape.shape(x)[0];
    let avg = ctx.tape.constant(Tensor::full([1, n], 1.0 / n as f64));
    ctx.tape.matmul(avg, x)
}

/// Left hand, right hand and face boxes `[3, 4]` as normalized
/// `(cx, cy, w, h)`.
pub fn regress_boxes(ctx: &mut Ctx, features: Var) -> Result<Var> {
    let pooled = mean_rows(ctx, features)?;
    let mut boxes = Vec::with_capacity(3);
    for b in BOX_NAMES {
        let h = ctx.linear(pooled, &format!("enc.box_{b}.fc1"))?;
        let h = ctx.tape.gelu(h)?;
        let o = ctx.linear(h, &format!("enc.box_{b}.fc2"))?;
        boxes.push(ctx.tape.sigmoid(o)?);
    }
    ctx.tape.concat(&boxes, 0)
}
