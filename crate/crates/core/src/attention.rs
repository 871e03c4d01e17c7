//! Hierarchical (tile-partitioned, mode-switched) attention and the
//! cross-stage cone attention, plus role embeddings.
//!
//! All attention here is single-head with `d_head` equal to the model width.
//! Partitioning is spatial: an `r×r` tiling of the token grid where every
//! tile attends only within itself. The concatenated per-tile outputs equal
//! full attention with a block-diagonal mask.

use std::sync::Arc;

use unifiq_tensor::{Real, Tape, Var};

use crate::encoder::TokenMap;
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Mlp, ParamId, ParamSet};

/// Query/key/value projections (no bias) followed by a residual MLP.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mlp: Mlp,
    pub width: usize,
}

impl AttentionParams {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize) -> Self {
        let xavier = Init::Xavier { fan_in: c, fan_out: c };
        Self {
            wq: ps.add(format!("{prefix}.wq"), [c, c], xavier),
            wk: ps.add(format!("{prefix}.wk"), [c, c], xavier),
            wv: ps.add(format!("{prefix}.wv"), [c, c], xavier),
            mlp: Mlp::declare(ps, &format!("{prefix}.mlp"), c, 2 * c, c, Activation::Gelu),
            width: c,
        }
    }

    pub fn d_head(&self) -> usize {
        self.width
    }

    fn divisor(&self) -> f64 {
        (self.d_head() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaConfig {
    pub scales: Vec<usize>,
    pub layers_per_scale: usize,
}

impl Default for HaConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2],
            layers_per_scale: 1,
        }
    }
}

impl HaConfig {
    /// Scale factor of every layer, in application order.
    pub fn layer_scales(&self) -> impl Iterator<Item = usize> + '_ {
        self.scales
            .iter()
            .flat_map(move |&r| std::iter::repeat_n(r, self.layers_per_scale))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Distorted,
    Reference,
}

/// Learned role vectors: `e0` tags distorted-role inputs, `e1`
/// reference-role inputs.
#[derive(Clone, Debug)]
pub struct SegmentEmbedding {
    pub e0: ParamId,
    pub e1: ParamId,
    pub width: usize,
}

impl SegmentEmbedding {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize) -> Self {
        let init = Init::Normal { std: 0.02 };
        Self {
            e0: ps.add(format!("{prefix}.e0"), [c], init),
            e1: ps.add(format!("{prefix}.e1"), [c], init),
            width: c,
        }
    }

    pub fn add<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap, role: Role) -> Result<TokenMap> {
        if x.channels(tape) != self.width {
            return Err(Error::contract(format!(
                "embedding width {} does not match {} channels",
                self.width,
                x.channels(tape)
            )));
        }
        let e = match role {
            Role::Distorted => p[self.e0.index()],
            Role::Reference => p[self.e1.index()],
        };
        Ok(x.with(tape.add(x.var, e)?))
    }
}

fn check_divides(what: &str, r: usize, h: usize, w: usize) -> Result<()> {
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(Error::contract(format!("{what}: {r} does not divide the {h}x{w} grid")));
    }
    Ok(())
}

/// Source token of every slot of the partitioned layout: slot `(i·r+j, t)`
/// holds local token `t` of tile `(i, j)`, tiles being `(h/r)×(w/r)`.
pub fn partition_order(h: usize, w: usize, r: usize) -> Vec<usize> {
    let (th, tw) = (h / r, w / r);
    let mut order = Vec::with_capacity(h * w);
    for i in 0..r {
        for j in 0..r {
            for y in 0..th {
                for x in 0..tw {
                    order.push((i * th + y) * w + j * tw + x);
                }
            }
        }
    }
    order
}

fn expand_index(order: &[usize], batch: usize, c: usize) -> Arc<[usize]> {
    let l = order.len();
    let mut idx = Vec::with_capacity(batch * l * c);
    for b in 0..batch {
        for &t in order {
            let base = (b * l + t) * c;
            idx.extend(base..base + c);
        }
    }
    idx.into()
}

/// `[B, H·W, C]` → `[B, r², H·W/r², C]`.
pub fn spatial_partition<T: Real>(tape: &mut Tape<T>, x: TokenMap, r: usize) -> Result<Var> {
    check_divides("spatial_partition", r, x.h, x.w)?;
    let (b, c) = (x.batch(tape), x.channels(tape));
    let idx = expand_index(&partition_order(x.h, x.w, r), b, c);
    Ok(tape.gather(x.var, idx, [b, r * r, x.len() / (r * r), c])?)
}

/// Inverse of [`spatial_partition`].
pub fn spatial_unpartition<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize, r: usize) -> Result<TokenMap> {
    check_divides("spatial_unpartition", r, h, w)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != r * r || s[1] * s[2] != h * w {
        return Err(Error::contract(format!(
            "cannot unpartition {s:?} into a {h}x{w} grid at r={r}"
        )));
    }
    let order = partition_order(h, w, r);
    let mut inverse = vec![0; order.len()];
    for (slot, &t) in order.iter().enumerate() {
        inverse[t] = slot;
    }
    let idx = expand_index(&inverse, s[0], s[3]);
    let var = tape.gather(x, idx, [s[0], h * w, s[3]])?;
    Ok(TokenMap { var, h, w })
}

/// Softmax attention of `q` over `k`/`v` along the second-to-last axis.
fn attend<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, divisor: f64) -> Result<Var> {
    let scores = tape.matmul_t(q, k)?;
    let m = tape.softmax_rows(scores, divisor)?;
    Ok(tape.matmul(m, v)?)
}

/// Attention within each tile of an `r×r` tiling: queries projected from
/// `q_src`, keys and values from `kv_src`. With `r = 1` no reordering
/// happens and this is plain global attention.
pub fn blocked_attention<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    q_src: TokenMap,
    kv_src: TokenMap,
    r: usize,
    params: &AttentionParams,
) -> Result<TokenMap> {
    if (q_src.h, q_src.w) != (kv_src.h, kv_src.w) || tape.shape(q_src.var) != tape.shape(kv_src.var) {
        return Err(Error::contract(format!(
            "query source {:?} and key/value source {:?} differ",
            tape.shape(q_src.var),
            tape.shape(kv_src.var)
        )));
    }
    check_divides("blocked_attention", r, q_src.h, q_src.w)?;
    let q = tape.matmul(q_src.var, p[params.wq.index()])?;
    let k = tape.matmul(kv_src.var, p[params.wk.index()])?;
    let v = tape.matmul(kv_src.var, p[params.wv.index()])?;
    if r == 1 {
        return Ok(q_src.with(attend(tape, q, k, v, params.divisor())?));
    }
    let q = spatial_partition(tape, q_src.with(q), r)?;
    let k = spatial_partition(tape, kv_src.with(k), r)?;
    let v = spatial_partition(tape, kv_src.with(v), r)?;
    let out = attend(tape, q, k, v, params.divisor())?;
    spatial_unpartition(tape, out, q_src.h, q_src.w, r)
}

/// `x_q + MLP(blocked_attention(x_q, x_kv))`.
pub fn ha_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    x_q: TokenMap,
    x_kv: TokenMap,
    r: usize,
    params: &AttentionParams,
) -> Result<TokenMap> {
    let att = blocked_attention(tape, p, x_q, x_kv, r, params)?;
    let m = params.mlp.forward(tape, p, att.var)?;
    Ok(x_q.with(tape.add(x_q.var, m)?))
}

/// Hierarchical attention module: one [`ha_layer`] per configured scale,
/// each with its own parameters.
#[derive(Clone, Debug)]
pub struct HaStack {
    pub layers: Vec<(usize, AttentionParams)>,
}

impl HaStack {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize, cfg: &HaConfig) -> Self {
        let layers = cfg
            .layer_scales()
            .enumerate()
            .map(|(i, r)| (r, AttentionParams::declare(ps, &format!("{prefix}.layer{i}"), c)))
            .collect();
        Self { layers }
    }

    /// Single-stream self-attention stack (no-reference mode).
    pub fn forward_self<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: TokenMap) -> Result<TokenMap> {
        let mut x = x;
        for (r, params) in &self.layers {
            x = ha_layer(tape, p, x, x, *r, params)?;
        }
        Ok(x)
    }

    /// Two-stream stack (full-reference mode). The query stream carries the
    /// reference-role tokens and attends to the distorted stream; the
    /// distorted stream advances by self-attention through the same layer so
    /// both streams stay at equal depth. Returns the query stream.
    ///
    /// When both inputs hold equal values this computes exactly what
    /// [`HaStack::forward_self`] computes.
    pub fn forward_cross<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x_q: TokenMap,
        x_kv: TokenMap,
    ) -> Result<TokenMap> {
        let (mut q, mut kv) = (x_q, x_kv);
        for (i, (r, params)) in self.layers.iter().enumerate() {
            let next_q = ha_layer(tape, p, q, kv, *r, params)?;
            if i + 1 < self.layers.len() {
                kv = ha_layer(tape, p, kv, kv, *r, params)?;
            }
            q = next_q;
        }
        Ok(q)
    }

    pub fn output_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|(_, a)| a.mlp.output_params())
    }
}

/// Assignment of shallow and deep tokens to an `n×n` grid of spatially
/// aligned cones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConePartition {
    pub n: usize,
    pub shallow_side: usize,
    pub deep_side: usize,
    pub shallow_cone: Vec<usize>,
    pub deep_cone: Vec<usize>,
}

impl ConePartition {
    pub fn num_cones(&self) -> usize {
        self.n * self.n
    }

    /// Tokens of `cone` in row-major order: (shallow, deep).
    pub fn members(&self, cone: usize) -> (Vec<usize>, Vec<usize>) {
        let pick = |ids: &[usize]| {
            ids.iter()
                .enumerate()
                .filter(|(_, &c)| c == cone)
                .map(|(t, _)| t)
                .collect()
        };
        (pick(&self.shallow_cone), pick(&self.deep_cone))
    }
}

pub fn cone_partition(shallow_side: usize, deep_side: usize, n: usize) -> Result<ConePartition> {
    if n == 0 || !shallow_side.is_multiple_of(n) || !deep_side.is_multiple_of(n) || n > deep_side {
        return Err(Error::contract(format!(
            "cone grid {n} must divide both {shallow_side} and {deep_side}"
        )));
    }
    let assign = |side: usize| -> Vec<usize> {
        let t = side / n;
        (0..side * side).map(|i| (i / side / t) * n + (i % side) / t).collect()
    };
    Ok(ConePartition {
        n,
        shallow_side,
        deep_side,
        shallow_cone: assign(shallow_side),
        deep_cone: assign(deep_side),
    })
}

/// Cross-stage attention from a shallow map to a deeper one, restricted to
/// cones: `x_s + MLP(attention(Q_s, K_d, V_d))`.
#[derive(Clone, Debug)]
pub struct Sda {
    pub params: AttentionParams,
    pub n: usize,
}

impl Sda {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize, n: usize) -> Self {
        Self {
            params: AttentionParams::declare(ps, prefix, c),
            n,
        }
    }

    /// Attended values before the residual MLP, shallow-shaped.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x_s: TokenMap, x_d: TokenMap) -> Result<TokenMap> {
        if x_s.h <= x_d.h || x_s.w <= x_d.w {
            return Err(Error::contract(format!(
                "shallow grid {}x{} must be larger than deep grid {}x{}",
                x_s.h, x_s.w, x_d.h, x_d.w
            )));
        }
        if x_s.h != x_s.w || x_d.h != x_d.w {
            return Err(Error::contract("cone attention needs square grids"));
        }
        cone_partition(x_s.h, x_d.h, self.n)?;
        let pa = &self.params;
        let q = tape.matmul(x_s.var, p[pa.wq.index()])?;
        let k = tape.matmul(x_d.var, p[pa.wk.index()])?;
        let v = tape.matmul(x_d.var, p[pa.wv.index()])?;
        // Cone c owns tile c of the n×n tiling on both grids.
        let q = spatial_partition(tape, x_s.with(q), self.n)?;
        let k = spatial_partition(tape, x_d.with(k), self.n)?;
        let v = spatial_partition(tape, x_d.with(v), self.n)?;
        let out = attend(tape, q, k, v, pa.divisor())?;
        spatial_unpartition(tape, out, x_s.h, x_s.w, self.n)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x_s: TokenMap, x_d: TokenMap) -> Result<TokenMap> {
        let att = self.attend(tape, p, x_s, x_d)?;
        let m = self.params.mlp.forward(tape, p, att.var)?;
        Ok(x_s.with(tape.add(x_s.var, m)?))
    }
}

/// Stage pairs `(deep i, shallow j)`, 1-based, in output order
/// C21, C31, C41, C32, C42, C43.
pub const SDA_PAIRS: [(usize, usize); 6] = [(2, 1), (3, 1), (4, 1), (3, 2), (4, 2), (4, 3)];

#[derive(Clone, Debug)]
pub struct SdaDense {
    pub blocks: Vec<((usize, usize), Sda)>,
}

impl SdaDense {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize, n: usize) -> Self {
        let blocks = SDA_PAIRS
            .iter()
            .map(|&(i, j)| ((i, j), Sda::declare(ps, &format!("{prefix}.c{i}{j}"), c, n)))
            .collect();
        Self { blocks }
    }

    /// `C_{i,j} = sda(stage_j, stage_i)` for every pair, in [`SDA_PAIRS`] order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], pyramid: &[TokenMap; 4]) -> Result<Vec<TokenMap>> {
        self.blocks
            .iter()
            .map(|((i, j), sda)| sda.forward(tape, p, pyramid[j - 1], pyramid[i - 1]))
            .collect()
    }

    pub fn output_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().flat_map(|(_, s)| s.params.mlp.output_params())
    }
}
