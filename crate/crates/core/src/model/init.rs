use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, RngState, Tensor};

/// Weight initialization scheme for projection matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `Normal(0, sqrt(2 / fan_in))`.
    Kaiming,
    /// `Uniform(±sqrt(6 / (fan_in + fan_out)))`.
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Projection matrix `[fan_in, fan_out]`, drawn by the configured scheme.
    Weight { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    /// Lookup table: `Uniform(-1, 1)` with a zero padding row.
    Embedding,
    /// Non-trainable buffer filled with a constant.
    Buffer(f64),
}

/// Name, shape, and initializer of one model tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, &[fan_in, fan_out], Init::Weight { fan_in, fan_out })
    }

    pub fn trainable(&self) -> bool {
        !matches!(self.init, Init::Buffer(_))
    }

    pub fn sample(&self, scheme: InitScheme, rng: &mut RngState) -> Tensor {
        let n: usize = self.shape.iter().product();
        let data: Vec<f64> = match self.init {
            Init::Weight { fan_in, fan_out } => match scheme {
                InitScheme::Kaiming => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.normal(0.0, std)).collect()
                }
                InitScheme::Xavier => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.uniform(-a, a)).collect()
                }
            },
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Buffer(v) => vec![v; n],
            Init::Embedding => {
                let d = *self.shape.last().unwrap();
                (0..n)
                    .map(|i| if i < d { 0.0 } else { rng.uniform(-1.0, 1.0) })
                    .collect()
            }
        };
        let t = Tensor::new(&self.shape, data).expect("spec shape matches data");
        if self.trainable() {
            t.with_grad()
        } else {
            t
        }
    }
}

/// Build a parameter store from specs, drawing in spec order.
pub fn init_params(specs: &[ParamSpec], scheme: InitScheme, rng: &mut RngState) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), spec.sample(scheme, rng));
    }
    store
}
