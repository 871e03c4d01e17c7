//! L2 regression training with Adam and per-epoch cosine annealing, in NR,
//! FR or joint mode.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unifiq_tensor::{Real, Tape, Tensor, Var};

use crate::datagen::{derive_seed, Manifest, Sample, Split};
use crate::encoder::IMAGE_SIDE;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{Mode, ModePair, Model, ModelConfig};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Nr,
    Fr,
    /// Each sample is fed as FR or NR with equal probability.
    Joint,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Nr => "nr",
            TrainMode::Fr => "fr",
            TrainMode::Joint => "joint",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nr" => Ok(TrainMode::Nr),
            "fr" => Ok(TrainMode::Fr),
            "joint" => Ok(TrainMode::Joint),
            other => Err(Error::contract(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub seed: u64,
    pub crop: usize,
    pub hflip_prob: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Nr,
            epochs: 100,
            batch_size: 8,
            lr0: 1e-4,
            t_max: 50,
            eta_min: 0.0,
            seed: 0,
            crop: 48,
            hflip_prob: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if self.crop == 0 || self.crop > IMAGE_SIDE {
            return Err(Error::contract(format!(
                "crop must be in 1..={IMAGE_SIDE}, got {}",
                self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::contract("flip probability must be in [0, 1]"));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0 && self.eta_min.is_finite() && self.eta_min >= 0.0) {
            return Err(Error::contract("learning rates must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Mean squared error of `pred` (`[n]`) against `target`.
pub fn l2_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != [target.len()] {
        return Err(Error::contract(format!(
            "l2_loss: prediction shape {shape:?} vs {} targets",
            target.len()
        )));
    }
    let t = tape.constant(Tensor::from_f64s([target.len()], target)?);
    let d = tape.sub(pred, t)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum_all(d2);
    Ok(tape.scale(s, 1.0 / target.len() as f64))
}

/// `eta_min + (lr0 − eta_min)·(1 + cos(π·t/t_max))/2`, with `t` clamped to
/// `t_max`.
pub fn cosine_lr(t: usize, lr0: f64, t_max: usize, eta_min: f64) -> f64 {
    if t_max == 0 {
        return eta_min;
    }
    let t = t.min(t_max) as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t / t_max as f64).cos())
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &WeightStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every entry of `store`.
pub fn adam_step(store: &mut WeightStore, grads: &[Tensor<f32>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "adam: {} weights, {} gradients, {} moment slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, w), g) in store.iter().zip(grads) {
        if w.shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam: gradient {:?} for {name:?} {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((w, g), m), v) in store.values_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi as f64;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
            *wi = (*wi as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Brings a crop up to the encoder input size by mirror padding, which
/// leaves the crop's own pixels and local statistics untouched.
pub fn fit_to_input(img: &RgbImage) -> Result<RgbImage> {
    img.pad_reflect(IMAGE_SIDE, IMAGE_SIDE)
}

/// Random crop at shared coordinates and a shared horizontal flip, fitted
/// to the encoder input size with [`fit_to_input`].
pub fn augment_pair(
    distorted: &RgbImage,
    reference: &RgbImage,
    crop: usize,
    hflip_prob: f64,
    rng: &mut impl Rng,
) -> Result<(RgbImage, RgbImage)> {
    let x = rng.random_range(0..=distorted.width() - crop);
    let y = rng.random_range(0..=distorted.height() - crop);
    let flip = rng.random_bool(hflip_prob);
    let prep = |img: &RgbImage| -> Result<RgbImage> {
        let mut c = img.crop(x, y, crop)?;
        if flip {
            c = c.flip_horizontal();
        }
        fit_to_input(&c)
    };
    Ok((prep(distorted)?, prep(reference)?))
}

/// Augmented training pair for one sample; the mode follows the config
/// (a fair coin per sample in joint mode).
pub fn prepare_pair(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(ModePair, f64)> {
    let (dis, reference) = augment_pair(&sample.distorted, &sample.reference, cfg.crop, cfg.hflip_prob, rng)?;
    let fr = match cfg.mode {
        TrainMode::Nr => false,
        TrainMode::Fr => true,
        TrainMode::Joint => rng.random_bool(0.5),
    };
    let pair = if fr {
        ModePair::fr(dis, reference)?
    } else {
        ModePair::nr(dis)
    };
    Ok((pair, sample.mos))
}

/// `cfg.batch_size` samples drawn uniformly with replacement.
pub fn sample_batch(samples: &[Sample], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<(ModePair, f64)>> {
    if samples.is_empty() {
        return Err(Error::contract("cannot sample from an empty training split"));
    }
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.random_range(0..samples.len());
            prepare_pair(&samples[i], cfg, rng)
        })
        .collect()
}

/// Mean L2 loss of a batch that may mix modes; the NR and FR parts run as
/// separate forward passes on the same tape.
pub fn batch_loss<T: Real>(tape: &mut Tape<T>, p: &[Var], model: &Model, batch: &[(ModePair, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for mode in [Mode::Nr, Mode::Fr] {
        let part: Vec<&(ModePair, f64)> = batch.iter().filter(|(pair, _)| pair.mode() == mode).collect();
        if part.is_empty() {
            continue;
        }
        let pairs: Vec<&ModePair> = part.iter().map(|(pair, _)| pair).collect();
        let targets: Vec<f64> = part.iter().map(|(_, t)| *t).collect();
        let pred = model.forward(tape, p, &pairs)?;
        let loss = l2_loss(tape, pred, &targets)?;
        let weighted = tape.scale(loss, part.len() as f64 / batch.len() as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::contract("empty batch"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightStore,
    pub log: Vec<EpochLog>,
}

/// Trains from a fresh initialisation. After every epoch `on_epoch` sees
/// the log entry and current weights and may return `false` to stop early.
pub fn train_samples(
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &WeightStore) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let model = Model::new(cfg.model.clone());
    let mut weights = model.init_weights(derive_seed(cfg.seed, "init"));
    let mut adam = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr0, cfg.t_max, cfg.eta_min);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| prepare_pair(&samples[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::<f32>::new();
            let p = model.params.bind(&mut tape, &weights)?;
            let loss = batch_loss(&mut tape, &p, &model, &batch)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = p
                .iter()
                .zip(weights.iter())
                .map(|(&v, (_, w))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(w.shape().to_vec())))
                .collect();
            adam_step(&mut weights, &grads, &mut adam, lr)?;
            let l = tape.value(loss).item()? as f64;
            if !l.is_finite() {
                return Err(Error::Degenerate(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
        };
        let keep_going = on_epoch(&entry, &weights);
        log.push(entry);
        if !keep_going {
            break;
        }
    }
    Ok(TrainOutcome { weights, log })
}

/// Trains on the training split of `manifest`.
pub fn train(manifest: &Manifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let samples = manifest.load_split(Split::Train)?;
    train_samples(&samples, cfg, |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1e-4, 50, 0.0), 1e-4);
        assert!(cosine_lr(50, 1e-4, 50, 0.0).abs() < 1e-20);
        assert!((cosine_lr(25, 1e-4, 50, 1e-6) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(80, 1e-4, 50, 1e-6), cosine_lr(50, 1e-4, 50, 1e-6));
    }

    #[test]
    fn l2_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let l = l2_loss(&mut tape, p, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 0.0]);
        assert!(l2_loss(&mut tape, p, &[0.0]).is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = WeightStore::new();
        store
            .insert("x", Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&store);
        let g = Tensor::new([3], vec![2.0, -0.5, 1e-3]).unwrap();
        adam_step(&mut store, &[g], &mut st, 0.01).unwrap();
        let x = store.get("x").unwrap().data();
        assert!((x[0] - -0.01).abs() < 1e-6);
        assert!((x[1] - 1.01).abs() < 1e-6);
        assert!((x[2] - -1.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut store = WeightStore::new();
        store.insert("x", Tensor::zeros([3])).unwrap();
        let mut st = AdamState::new(&store);
        assert!(adam_step(&mut store, &[Tensor::zeros([2])], &mut st, 0.1).is_err());
        assert!(adam_step(&mut store, &[], &mut st, 0.1).is_err());
    }
}
