//! Four-stage patch-merging encoder with a squeeze-excitation gate after
//! every stage.
//!
//! A 64×64 image becomes a 16×16 grid of 4×4-pixel patch tokens. Stage 1
//! projects them to the model width; stages 2–4 merge 2×2 neighbourhoods,
//! halving the grid each time (16, 8, 4, 2).

use std::sync::Arc;

use unifiq_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{Activation, Linear, Mlp, ParamId, ParamSet};

pub const IMAGE_SIDE: usize = 64;
pub const PATCH: usize = 4;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const GRID: usize = IMAGE_SIDE / PATCH;
pub const NUM_STAGES: usize = 4;

/// Token sequence `[B, H·W, C]` on a tape, with its row-major grid:
/// token `t` sits at row `t / W`, column `t % W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenMap {
    pub fn new<T: Real>(tape: &Tape<T>, var: Var, h: usize, w: usize) -> Result<Self> {
        let s = tape.shape(var);
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::contract(format!(
                "token tensor {s:?} does not fit a {h}x{w} grid"
            )));
        }
        Ok(Self { var, h, w })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.var)[2]
    }

    pub fn batch<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.var)[0]
    }

    /// Same grid, different tokens.
    pub fn with(&self, var: Var) -> Self {
        Self { var, ..*self }
    }
}

/// Flattens each 4×4×3 patch (row, column, channel order) into a token, with
/// pixels scaled to [0, 1]. Output shape `[B, 256, 48]`.
pub fn patchify<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::contract("patchify: empty batch"));
    }
    let full = T::from_f64(255.0);
    let mut data = Vec::with_capacity(images.len() * GRID * GRID * PATCH_DIM);
    for img in images {
        if img.width() != IMAGE_SIDE || img.height() != IMAGE_SIDE {
            return Err(Error::contract(format!(
                "encoder needs {IMAGE_SIDE}x{IMAGE_SIDE} images, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let px = img.data();
        for gy in 0..GRID {
            for gx in 0..GRID {
                for py in 0..PATCH {
                    let row = (gy * PATCH + py) * IMAGE_SIDE + gx * PATCH;
                    for &v in &px[row * 3..(row + PATCH) * 3] {
                        data.push(T::from_f64(v as f64) / full);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([images.len(), GRID * GRID, PATCH_DIM], data)?)
}

/// Inverse of [`patchify`] for values that came from 8-bit pixels.
pub fn unpatchify<T: Real>(tokens: &Tensor<T>) -> Result<Vec<RgbImage>> {
    if tokens.shape().len() != 3 || tokens.shape()[1..] != [GRID * GRID, PATCH_DIM] {
        return Err(Error::contract(format!(
            "unpatchify: unexpected shape {:?}",
            tokens.shape()
        )));
    }
    let per = GRID * GRID * PATCH_DIM;
    tokens
        .data()
        .chunks(per)
        .map(|chunk| {
            let mut px = vec![0u8; IMAGE_SIDE * IMAGE_SIDE * 3];
            for (t, tok) in chunk.chunks(PATCH_DIM).enumerate() {
                let (gy, gx) = (t / GRID, t % GRID);
                for (py, row_vals) in tok.chunks(PATCH * 3).enumerate() {
                    let row = (gy * PATCH + py) * IMAGE_SIDE + gx * PATCH;
                    for (i, &v) in row_vals.iter().enumerate() {
                        px[row * 3 + i] = (Real::to_f64(v) * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            RgbImage::new(IMAGE_SIDE, IMAGE_SIDE, px)
        })
        .collect()
}

/// Gather index turning `[B, h·w, C]` into `[B, (h/2)·(w/2), 4C]`; the four
/// channel blocks are the neighbours (2i,2j), (2i,2j+1), (2i+1,2j),
/// (2i+1,2j+1).
pub fn space_to_depth_index(batch: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let t = (2 * i + dy) * w + 2 * j + dx;
                    let base = (b * h * w + t) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

pub fn space_to_depth<T: Real>(tape: &mut Tape<T>, x: TokenMap) -> Result<TokenMap> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::contract(format!("cannot merge an odd {}x{} grid", x.h, x.w)));
    }
    let (b, c) = (x.batch(tape), x.channels(tape));
    let idx = space_to_depth_index(b, x.h, x.w, c);
    let (h, w) = (x.h / 2, x.w / 2);
    let var = tape.gather(x.var, idx, [b, h * w, 4 * c])?;
    Ok(TokenMap { var, h, w })
}

/// Squeeze-excitation over the token axis:
/// `x · sigmoid(W2 · relu(W1 · mean_tokens(x)))`, one gate per channel.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl ChannelGate {
    pub const REDUCTION: usize = 4;

    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize) -> Self {
        Self {
            squeeze: Linear::declare(ps, &format!("{prefix}.squeeze"), c, c / Self::REDUCTION),
            excite: Linear::declare(ps, &format!("{prefix}.excite"), c / Self::REDUCTION, c),
        }
    }

    /// Gate values `[B, C]`, each in (0, 1).
    pub fn gates<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap) -> Result<Var> {
        let pooled = tape.mean_axis(x.var, 1)?;
        let s = self.squeeze.forward(tape, p, pooled)?;
        let s = tape.relu(s);
        let e = self.excite.forward(tape, p, s)?;
        Ok(tape.sigmoid(e))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap) -> Result<TokenMap> {
        let g = self.gates(tape, p, x)?;
        let (b, c) = (x.batch(tape), x.channels(tape));
        let g = tape.reshape(g, [b, 1, c])?;
        Ok(x.with(tape.mul(x.var, g)?))
    }
}

/// One encoder stage: input projection (stem for stage 1, 2×2 merge after),
/// residual MLP, channel gate.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: bool,
    pub proj: Linear,
    pub mlp: Mlp,
    pub gate: ChannelGate,
}

impl EncoderStage {
    pub fn declare(ps: &mut ParamSet, prefix: &str, cin: usize, c: usize, merge: bool) -> Self {
        let proj_in = if merge { 4 * cin } else { cin };
        let proj_name = if merge { "merge" } else { "stem" };
        Self {
            merge,
            proj: Linear::declare(ps, &format!("{prefix}.{proj_name}"), proj_in, c),
            mlp: Mlp::declare(ps, &format!("{prefix}.mlp"), c, 2 * c, c, Activation::Gelu),
            gate: ChannelGate::declare(ps, &format!("{prefix}.gate"), c),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap) -> Result<TokenMap> {
        let x = if self.merge { space_to_depth(tape, x)? } else { x };
        let y = self.proj.forward(tape, p, x.var)?;
        let m = self.mlp.forward(tape, p, y)?;
        let y = tape.add(y, m)?;
        self.gate.forward(tape, p, x.with(y))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
    pub width: usize,
}

impl Encoder {
    pub fn declare(ps: &mut ParamSet, prefix: &str, width: usize) -> Self {
        let stages = (0..NUM_STAGES)
            .map(|s| {
                let cin = if s == 0 { PATCH_DIM } else { width };
                EncoderStage::declare(ps, &format!("{prefix}.stage{}", s + 1), cin, width, s > 0)
            })
            .collect();
        Self { stages, width }
    }

    /// Stage outputs with grids 16, 8, 4 and 2 on a side.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], images: &[&RgbImage]) -> Result<[TokenMap; 4]> {
        let x = tape.constant(patchify(images)?);
        self.forward_tokens(tape, p, TokenMap::new(tape, x, GRID, GRID)?)
    }

    pub fn forward_tokens<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap) -> Result<[TokenMap; 4]> {
        let mut out = Vec::with_capacity(NUM_STAGES);
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(tape, p, cur)?;
            out.push(cur);
        }
        Ok(out.try_into().expect("four stages"))
    }

    pub fn gate_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stages
            .iter()
            .flat_map(|s| [s.gate.squeeze.w, s.gate.squeeze.b, s.gate.excite.w, s.gate.excite.b])
    }
}
