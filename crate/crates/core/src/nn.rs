//! Parameter declaration and the small layer vocabulary shared by every
//! module: affine maps and two-layer perceptrons.
//!
//! Modules hold [`ParamId`]s into a flat parameter list. The list is
//! materialised once per tape (see [`ParamSet::bind`]) so the same module
//! code runs in `f32` for training and in `f64` for gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use unifiq_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)).
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
    Normal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations of one architecture.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Fresh weights, drawn in declaration order from one seeded stream.
    pub fn init(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                }
                Init::Normal { std } => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                }
            };
            store
                .insert(
                    spec.name.clone(),
                    Tensor::new(spec.shape.clone(), data).expect("declared shape"),
                )
                .expect("declared names are unique");
        }
        store
    }

    /// Checks that `store` has exactly the declared names and shapes, in order.
    pub fn validate(&self, store: &WeightStore) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::contract(format!(
                "weights have {} entries, architecture declares {}",
                store.len(),
                self.specs.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(store.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::contract(format!(
                    "weight {name:?} {:?} does not match declared {:?} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Records every weight as a trainable leaf, in declaration order.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, store: &WeightStore) -> Result<Vec<Var>> {
        self.validate(store)?;
        Ok(store.iter().map(|(_, t)| tape.param(t.cast())).collect())
    }

    /// Weights as `f64` tensors, in declaration order.
    pub fn to_f64(&self, store: &WeightStore) -> Result<Vec<Tensor<f64>>> {
        self.validate(store)?;
        Ok(store.iter().map(|(_, t)| t.cast()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn declare(ps: &mut ParamSet, prefix: &str, cin: usize, cout: usize) -> Self {
        let w = ps.add(
            format!("{prefix}.w"),
            [cin, cout],
            Init::Xavier {
                fan_in: cin,
                fan_out: cout,
            },
        );
        let b = ps.add(format!("{prefix}.b"), [cout], Init::Zeros);
        Self { w, b, cin, cout }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(tape.linear(x, p[self.w.0], p[self.b.0])?)
    }
}

/// `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn declare(ps: &mut ParamSet, prefix: &str, cin: usize, hidden: usize, cout: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::declare(ps, &format!("{prefix}.fc1"), cin, hidden),
            fc2: Linear::declare(ps, &format!("{prefix}.fc2"), hidden, cout),
            act,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = self.act.apply(tape, h);
        self.fc2.forward(tape, p, h)
    }

    /// Output-layer weight and bias. Zeroing them turns a residual block
    /// into the identity.
    pub fn output_params(&self) -> [ParamId; 2] {
        [self.fc2.w, self.fc2.b]
    }
}

/// Overwrites the given entries of `store` with zeros.
pub fn zero_params(ps: &ParamSet, store: &mut WeightStore, ids: impl IntoIterator<Item = ParamId>) {
    for id in ids {
        let name = &ps.specs()[id.0].name;
        if let Some(t) = store.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
