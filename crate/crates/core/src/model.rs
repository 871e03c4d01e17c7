//! Full scoring network: shared encoder, role embeddings, hierarchical
//! attention per stage, dense cone attention over the distorted pyramid,
//! multi-stage aggregation and a weighted-pooling score head.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use unifiq_tensor::{Real, Tape, Var};

use crate::attention::{HaConfig, HaStack, Role, SdaDense, SegmentEmbedding, SDA_PAIRS};
use crate::encoder::{Encoder, TokenMap, NUM_STAGES};
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::nn::{Activation, Mlp, ParamId, ParamSet};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// No reference: the distorted image is paired with itself.
    Nr,
    /// Full reference.
    Fr,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nr => "nr",
            Mode::Fr => "fr",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nr" => Ok(Mode::Nr),
            "fr" => Ok(Mode::Fr),
            other => Err(Error::contract(format!("unknown mode {other:?}, expected nr or fr"))),
        }
    }
}

/// Network input: the distorted image plus either itself (NR) or its
/// reference (FR).
#[derive(Clone, Debug, PartialEq)]
pub struct ModePair {
    primary: RgbImage,
    secondary: RgbImage,
    mode: Mode,
}

impl ModePair {
    pub fn nr(distorted: RgbImage) -> Self {
        Self {
            secondary: distorted.clone(),
            primary: distorted,
            mode: Mode::Nr,
        }
    }

    pub fn fr(distorted: RgbImage, reference: RgbImage) -> Result<Self> {
        if (distorted.width(), distorted.height()) != (reference.width(), reference.height()) {
            return Err(Error::contract(format!(
                "distorted {}x{} and reference {}x{} differ in size",
                distorted.width(),
                distorted.height(),
                reference.width(),
                reference.height()
            )));
        }
        Ok(Self {
            primary: distorted,
            secondary: reference,
            mode: Mode::Fr,
        })
    }

    pub fn primary(&self) -> &RgbImage {
        &self.primary
    }

    pub fn secondary(&self) -> &RgbImage {
        &self.secondary
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: usize,
    pub ha: HaConfig,
    pub cone_grid: usize,
    /// Side of the common grid all features are resampled to.
    pub agg_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            ha: HaConfig::default(),
            cone_grid: 2,
            agg_side: 8,
        }
    }
}

/// Per-token score and gate branches; output `Σ w·s / (Σ w + 1e-8)`.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub score: Mlp,
    pub weight: Mlp,
}

impl ScoreHead {
    pub fn declare(ps: &mut ParamSet, prefix: &str, c: usize) -> Self {
        Self {
            score: Mlp::declare(ps, &format!("{prefix}.score"), c, c / 2, 1, Activation::Gelu),
            weight: Mlp::declare(ps, &format!("{prefix}.weight"), c, c / 2, 1, Activation::Gelu),
        }
    }

    /// Per-token scores and gate weights, each `[B, L, 1]`.
    pub fn branches<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], f: Var) -> Result<(Var, Var)> {
        let s = self.score.forward(tape, p, f)?;
        let w = self.weight.forward(tape, p, f)?;
        Ok((s, tape.sigmoid(w)))
    }

    /// Scores `[B]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], f: TokenMap) -> Result<Var> {
        let (s, w) = self.branches(tape, p, f.var)?;
        pool_scores(tape, s, w, f.len())
    }
}

/// `Σ w·s / (Σ w + 1e-8)` over the token axis of `[B, L, 1]` inputs.
pub fn pool_scores<T: Real>(tape: &mut Tape<T>, s: Var, w: Var, tokens: usize) -> Result<Var> {
    let b = tape.shape(s)[0];
    let ws = tape.mul(w, s)?;
    let num = tape.mean_axis(ws, 1)?;
    let num = tape.scale(num, tokens as f64);
    let den = tape.mean_axis(w, 1)?;
    let den = tape.scale(den, tokens as f64);
    let den = tape.add_scalar(den, 1e-8);
    let out = tape.div(num, den)?;
    Ok(tape.reshape(out, [b])?)
}

/// Resamples a square map to `side×side`: average pooling when shrinking,
/// nearest-neighbour repetition when growing.
pub fn resample<T: Real>(tape: &mut Tape<T>, x: TokenMap, side: usize) -> Result<TokenMap> {
    if x.h != x.w {
        return Err(Error::contract(format!(
            "resample needs a square grid, got {}x{}",
            x.h, x.w
        )));
    }
    let (b, c, n) = (x.batch(tape), x.channels(tape), x.h);
    let expand = |tokens: &[usize], batch: usize| -> Arc<[usize]> {
        let mut idx = Vec::with_capacity(batch * tokens.len() * c);
        for bi in 0..batch {
            for &t in tokens {
                let base = (bi * n * n + t) * c;
                idx.extend(base..base + c);
            }
        }
        idx.into()
    };
    if n == side {
        Ok(x)
    } else if n > side {
        if n % side != 0 {
            return Err(Error::contract(format!("cannot pool {n}x{n} to {side}x{side}")));
        }
        let f = n / side;
        let mut order = Vec::with_capacity(n * n);
        for i in 0..side {
            for j in 0..side {
                for dy in 0..f {
                    for dx in 0..f {
                        order.push((i * f + dy) * n + j * f + dx);
                    }
                }
            }
        }
        let g = tape.gather(x.var, expand(&order, b), [b, side * side, f * f, c])?;
        let var = tape.mean_axis(g, 2)?;
        Ok(TokenMap { var, h: side, w: side })
    } else {
        if !side.is_multiple_of(n) {
            return Err(Error::contract(format!("cannot upsample {n}x{n} to {side}x{side}")));
        }
        let f = side / n;
        let order: Vec<usize> = (0..side * side).map(|t| (t / side / f) * n + (t % side) / f).collect();
        let var = tape.gather(x.var, expand(&order, b), [b, side * side, c])?;
        Ok(TokenMap { var, h: side, w: side })
    }
}

fn mean_maps<T: Real>(tape: &mut Tape<T>, maps: &[TokenMap]) -> Result<TokenMap> {
    let mut acc = maps[0].var;
    for m in &maps[1..] {
        acc = tape.add(acc, m.var)?;
    }
    if maps.len() > 1 {
        acc = tape.scale(acc, 1.0 / maps.len() as f64);
    }
    Ok(maps[0].with(acc))
}

/// Averages the cone-attention outputs by query stage, resamples
/// `H1..H4, G1..G3` to `side×side` and concatenates them along channels.
pub fn aggregate<T: Real>(tape: &mut Tape<T>, h: &[TokenMap; 4], c: &[TokenMap], side: usize) -> Result<TokenMap> {
    if c.len() != SDA_PAIRS.len() {
        return Err(Error::contract(format!(
            "expected {} cone outputs, got {}",
            SDA_PAIRS.len(),
            c.len()
        )));
    }
    let mut parts = Vec::with_capacity(NUM_STAGES + 3);
    for &m in h {
        parts.push(resample(tape, m, side)?.var);
    }
    for j in 1..NUM_STAGES {
        let group: Vec<TokenMap> = SDA_PAIRS
            .iter()
            .zip(c)
            .filter(|(&(_, sj), _)| sj == j)
            .map(|(_, &m)| m)
            .collect();
        let g = mean_maps(tape, &group)?;
        parts.push(resample(tape, g, side)?.var);
    }
    let var = tape.concat_last(&parts)?;
    Ok(TokenMap { var, h: side, w: side })
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Encoder stages of the distorted image.
    pub enc: [TokenMap; 4],
    /// Hierarchical attention output per stage.
    pub ha: [TokenMap; 4],
    /// Cone attention outputs in C21, C31, C41, C32, C42, C43 order.
    pub sda: Vec<TokenMap>,
    pub aggregated: TokenMap,
    /// Scores `[B]`.
    pub score: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub embed: SegmentEmbedding,
    pub ha: Vec<HaStack>,
    pub sda: SdaDense,
    pub head: ScoreHead,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut ps = ParamSet::new();
        let c = cfg.width;
        let encoder = Encoder::declare(&mut ps, "enc", c);
        let embed = SegmentEmbedding::declare(&mut ps, "embed", c);
        let ha = (1..=NUM_STAGES)
            .map(|s| HaStack::declare(&mut ps, &format!("ha{s}"), c, &cfg.ha))
            .collect();
        let sda = SdaDense::declare(&mut ps, "sda", c, cfg.cone_grid);
        let head = ScoreHead::declare(&mut ps, "head", c * (NUM_STAGES + 3));
        Self {
            cfg,
            params: ps,
            encoder,
            embed,
            ha,
            sda,
            head,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Channel count of the aggregated map.
    pub fn total_width(&self) -> usize {
        self.cfg.width * (NUM_STAGES + 3)
    }

    pub fn init_weights(&self, seed: u64) -> WeightStore {
        self.params.init(seed)
    }

    fn name(&self, id: ParamId) -> &str {
        &self.params.specs()[id.index()].name
    }

    /// Copies `e0` over `e1`, making the two roles indistinguishable.
    pub fn tie_embeddings(&self, store: &mut WeightStore) -> Result<()> {
        let e0 = store
            .get(self.name(self.embed.e0))
            .cloned()
            .ok_or_else(|| Error::contract("weights lack the distorted-role embedding"))?;
        let e1 = store
            .get_mut(self.name(self.embed.e1))
            .ok_or_else(|| Error::contract("weights lack the reference-role embedding"))?;
        *e1 = e0;
        Ok(())
    }

    /// Output layers of every residual attention MLP.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.ha
            .iter()
            .flat_map(HaStack::output_params)
            .chain(self.sda.output_params())
            .collect()
    }

    /// Forward pass over a batch sharing one mode. `secondaries` must be
    /// given exactly for FR.
    pub fn trace<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        primaries: &[&RgbImage],
        secondaries: Option<&[&RgbImage]>,
    ) -> Result<ForwardTrace> {
        let enc = self.encoder.forward(tape, p, primaries)?;
        let enc_ref = match secondaries {
            Some(refs) => {
                if refs.len() != primaries.len() {
                    return Err(Error::contract(format!(
                        "{} distorted images but {} references",
                        primaries.len(),
                        refs.len()
                    )));
                }
                Some(self.encoder.forward(tape, p, refs)?)
            }
            None => None,
        };
        let mut ha = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let d = self.embed.add(tape, p, enc[s], Role::Distorted)?;
            let h = match &enc_ref {
                None => self.ha[s].forward_self(tape, p, d)?,
                Some(r) => {
                    let q = self.embed.add(tape, p, r[s], Role::Reference)?;
                    self.ha[s].forward_cross(tape, p, q, d)?
                }
            };
            ha.push(h);
        }
        let ha: [TokenMap; 4] = ha.try_into().expect("four stages");
        let sda = self.sda.forward(tape, p, &enc)?;
        let aggregated = aggregate(tape, &ha, &sda, self.cfg.agg_side)?;
        let score = self.head.forward(tape, p, aggregated)?;
        Ok(ForwardTrace {
            enc,
            ha,
            sda,
            aggregated,
            score,
        })
    }

    /// Scores `[B]` for a batch of pairs that all share one mode.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], pairs: &[&ModePair]) -> Result<Var> {
        let mode = pairs
            .first()
            .ok_or_else(|| Error::contract("forward: empty batch"))?
            .mode;
        if pairs.iter().any(|x| x.mode != mode) {
            return Err(Error::contract("forward: batch mixes NR and FR pairs"));
        }
        let prim: Vec<&RgbImage> = pairs.iter().map(|x| &x.primary).collect();
        let sec: Vec<&RgbImage> = pairs.iter().map(|x| &x.secondary).collect();
        let secondaries = (mode == Mode::Fr).then_some(sec.as_slice());
        Ok(self.trace(tape, p, &prim, secondaries)?.score)
    }

    /// Single-pair score in `f32`.
    pub fn score(&self, store: &WeightStore, pair: &ModePair) -> Result<f32> {
        Ok(self.score_batch(store, &[pair])?[0])
    }

    pub fn score_batch(&self, store: &WeightStore, pairs: &[&ModePair]) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, store)?;
        let s = self.forward(&mut tape, &p, pairs)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Writes channel-mean heatmaps of the encoder stages, the attention
    /// stages and every cone-attention output as 8-bit PGM files. Returns
    /// the written paths.
    pub fn dump_feature_maps(&self, store: &WeightStore, pair: &ModePair, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, store)?;
        let sec = [&pair.secondary];
        let secondaries = (pair.mode == Mode::Fr).then_some(&sec[..]);
        let tr = self.trace(&mut tape, &p, &[&pair.primary], secondaries)?;

        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut maps: Vec<(String, TokenMap)> = Vec::new();
        for s in 0..NUM_STAGES {
            maps.push((format!("enc{}", s + 1), tr.enc[s]));
        }
        for s in 0..NUM_STAGES {
            maps.push((format!("ha{}", s + 1), tr.ha[s]));
        }
        for (&(i, j), &m) in SDA_PAIRS.iter().zip(&tr.sda) {
            maps.push((format!("sda_{i}_{j}"), m));
        }
        let mut written = Vec::with_capacity(maps.len());
        for (name, m) in maps {
            let path = out_dir.join(format!("{name}.pgm"));
            heatmap(&tape, m)?.write_pgm(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Channel mean of the first batch entry, min-max stretched to 0..255. A
/// flat map becomes uniform mid-gray.
pub fn heatmap<T: Real>(tape: &Tape<T>, m: TokenMap) -> Result<GrayImage> {
    let c = m.channels(tape);
    let data = &tape.value(m.var).data()[..m.len() * c];
    let means: Vec<f64> = data
        .chunks(c)
        .map(|tok| tok.iter().map(|&v| Real::to_f64(v)).sum::<f64>() / c as f64)
        .collect();
    let (lo, hi) = means.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let pixels = if hi > lo {
        means
            .iter()
            .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; means.len()]
    };
    GrayImage::new(m.w, m.h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use unifiq_tensor::Tensor;

    #[test]
    fn mode_parsing() {
        assert_eq!("nr".parse::<Mode>().unwrap(), Mode::Nr);
        assert_eq!("fr".parse::<Mode>().unwrap(), Mode::Fr);
        assert!("joint".parse::<Mode>().is_err());
    }

    #[test]
    fn nr_pair_duplicates_primary() {
        let img = RgbImage::filled(64, 64, [1, 2, 3]);
        let pair = ModePair::nr(img.clone());
        assert_eq!(pair.secondary(), &img);
        assert!(ModePair::fr(img, RgbImage::filled(32, 32, [0, 0, 0])).is_err());
    }

    #[test]
    fn resample_shapes_and_checkerboard() {
        let mut tape = Tape::<f64>::new();
        // 4×4 checkerboard of ±1: pooling 2×2 blocks averages to 0
        let board: Vec<f64> = (0..16)
            .map(|t| if (t / 4 + t % 4) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = tape.constant(Tensor::new([1, 16, 1], board).unwrap());
        let m = TokenMap::new(&tape, x, 4, 4).unwrap();
        let pooled = resample(&mut tape, m, 2).unwrap();
        assert_eq!(tape.value(pooled.var).data(), &[0.0; 4]);
        let up = resample(&mut tape, m, 8).unwrap();
        let v = tape.value(up.var).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], -1.0);
        assert_eq!(v[8], 1.0);
        assert_eq!(v[16], -1.0);
    }

    #[test]
    fn pooled_weights_reduce_to_mean() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::full([1, 4, 1], 0.3));
        let out = pool_scores(&mut tape, s, w, 4).unwrap();
        assert!((tape.value(out).data()[0] - 3.0).abs() < 1e-7);
    }
}
