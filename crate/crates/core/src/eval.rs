//! Multi-crop evaluation, correlation reports and the FR/NR consistency
//! probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{derive_seed, Sample};
use crate::encoder::IMAGE_SIDE;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, plcc, srocc};
use crate::model::{Mode, ModePair, Model};
use crate::train::fit_to_input;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub mode: Mode,
    pub crops: usize,
    pub crop: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(mode: Mode, crops: usize, seed: u64) -> Self {
        Self {
            mode,
            crops,
            crop: 48,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub plcc: f64,
    pub srocc: f64,
    pub mse_fr_nr: Option<f64>,
    pub n: usize,
    pub mode: Mode,
    pub seed: u64,
    pub crops: usize,
}

impl MetricsReport {
    /// Fixed-layout JSON with 6-decimal reals.
    pub fn to_json(&self) -> String {
        let mse = self.mse_fr_nr.map_or_else(|| "null".to_string(), |v| format!("{v:.6}"));
        format!(
            "{{\n  \"plcc\": {:.6},\n  \"srocc\": {:.6},\n  \"mse_fr_nr\": {mse},\n  \"n\": {},\n  \"mode\": \"{}\",\n  \"seed\": {},\n  \"crops\": {}\n}}\n",
            self.plcc, self.srocc, self.n, self.mode, self.seed, self.crops
        )
    }
}

/// Crops of `sample` used for evaluation; the positions depend only on the
/// seed and the sample id.
fn eval_pairs(sample: &Sample, cfg: &EvalConfig, mode: Mode) -> Result<Vec<ModePair>> {
    if cfg.crops == 0 || cfg.crop == 0 || cfg.crop > IMAGE_SIDE {
        return Err(Error::contract(format!(
            "need at least one crop of size 1..={IMAGE_SIDE}, got {} of {}",
            cfg.crops, cfg.crop
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &sample.id));
    let (w, h) = (sample.distorted.width(), sample.distorted.height());
    (0..cfg.crops)
        .map(|_| {
            let x = rng.random_range(0..=w - cfg.crop);
            let y = rng.random_range(0..=h - cfg.crop);
            let prep = |img: &crate::image::RgbImage| -> Result<_> { fit_to_input(&img.crop(x, y, cfg.crop)?) };
            let dis = prep(&sample.distorted)?;
            Ok(match mode {
                Mode::Nr => ModePair::nr(dis),
                Mode::Fr => ModePair::fr(dis, prep(&sample.reference)?)?,
            })
        })
        .collect()
}

/// Crop-averaged score per sample.
pub fn predict(
    model: &Model,
    weights: &WeightStore,
    samples: &[Sample],
    cfg: &EvalConfig,
    mode: Mode,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let pairs = eval_pairs(s, cfg, mode)?;
            let refs: Vec<&ModePair> = pairs.iter().collect();
            let scores = model.score_batch(weights, &refs)?;
            Ok(scores.iter().map(|&v| v as f64).sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

pub fn evaluate(model: &Model, weights: &WeightStore, samples: &[Sample], cfg: &EvalConfig) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let pred = predict(model, weights, samples, cfg, cfg.mode)?;
    let mos: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    Ok(MetricsReport {
        plcc: plcc(&pred, &mos)?,
        srocc: srocc(&pred, &mos)?,
        mse_fr_nr: None,
        n: samples.len(),
        mode: cfg.mode,
        seed: cfg.seed,
        crops: cfg.crops,
    })
}

/// Mean squared difference between FR and NR crop-averaged scores of the
/// same images and crops.
pub fn consistency_mse(model: &Model, weights: &WeightStore, samples: &[Sample], cfg: &EvalConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let fr = predict(model, weights, samples, cfg, Mode::Fr)?;
    let nr = predict(model, weights, samples, cfg, Mode::Nr)?;
    Ok(fr.iter().zip(&nr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fr.len() as f64)
}

/// Mean and sample standard deviation of each metric over several runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedSummary {
    pub plcc: (f64, f64),
    pub srocc: (f64, f64),
    pub runs: usize,
}

pub fn summarize(reports: &[MetricsReport]) -> Result<SeedSummary> {
    let p: Vec<f64> = reports.iter().map(|r| r.plcc).collect();
    let s: Vec<f64> = reports.iter().map(|r| r.srocc).collect();
    Ok(SeedSummary {
        plcc: mean_std(&p)?,
        srocc: mean_std(&s)?,
        runs: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layout() {
        let r = MetricsReport {
            plcc: 0.5,
            srocc: -0.25,
            mse_fr_nr: None,
            n: 3,
            mode: Mode::Nr,
            seed: 7,
            crops: 8,
        };
        assert_eq!(
            r.to_json(),
            "{\n  \"plcc\": 0.500000,\n  \"srocc\": -0.250000,\n  \"mse_fr_nr\": null,\n  \"n\": 3,\n  \"mode\": \"nr\",\n  \"seed\": 7,\n  \"crops\": 8\n}\n"
        );
        let with = MetricsReport {
            mse_fr_nr: Some(0.00123456),
            ..r
        };
        assert!(with.to_json().contains("\"mse_fr_nr\": 0.001235"));
    }
}
