//! The Snapshot network: a social self-attention encoder, a map
//! cross-attention encoder and a convolutional trajectory decoder.

mod checkpoint;
mod forward;
mod layout;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{MapMatrix, SocialMatrix, MAP_ROWS};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{upsample, Forward, SocialEncoding};
use layout::{Init, Layout};

/// Coarse waypoints produced by the decoder (0.2 s apart).
pub const COARSE_STEPS: usize = 30;
/// Grid side of each encoder embedding.
pub const GRID: usize = 8;
pub const PARAM_BUDGET: (usize, usize) = (120_000, 160_000);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_social: usize,
    pub n_layers_map: usize,
    /// Width of the feed-forward sublayer in every encoder block.
    pub ff_hidden: usize,
    /// Output channels of the 3x3 decoder convolutions. The first keeps the
    /// 8x8 resolution, the others use stride 2.
    pub decoder_channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Map rows the map encoder accepts (one learned position per row).
    pub map_rows: usize,
    /// Add learned positions to neighbor rows 1..7 as well as the focal row.
    pub neighbor_positions: bool,
    pub layer_norm_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d_model: 64,
            n_heads: 4,
            n_layers_social: 2,
            n_layers_map: 2,
            ff_hidden: 96,
            decoder_channels: vec![16, 16],
            leaky_slope: 0.01,
            map_rows: MAP_ROWS,
            neighbor_positions: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_hidden == 0 {
            return Err(Error::Config("ff_hidden must be positive".into()));
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) {
            return Err(Error::Config(
                "decoder_channels must be non-empty and positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!(
                "leaky_slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the decoder's last feature map.
    pub(crate) fn decoder_side(&self) -> usize {
        (1..self.decoder_channels.len()).fold(GRID, |s, _| (s - 1) / 2 + 1)
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> usize {
        Layout::new(self).numel()
    }

    pub(crate) fn param_tensor_count(&self) -> usize {
        Layout::new(self).entries.len()
    }
}

/// Predicted trajectory in the focal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 30 waypoints at 0.2 s spacing.
    pub coarse: Vec<[f64; 2]>,
    /// 60 waypoints at 0.1 s spacing.
    pub full: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    hyper: Hyperparams,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

/// Deterministic initialization; errors if the parameter count leaves the
/// supported budget.
pub fn init_model<T: Scalar>(hyper: &Hyperparams, seed: u64) -> Result<Model<T>> {
    hyper.validate()?;
    let layout = Layout::new(hyper);
    let count = layout.numel();
    if count < PARAM_BUDGET.0 || count > PARAM_BUDGET.1 {
        return Err(Error::Config(format!(
            "model has {count} parameters, outside [{}, {}]",
            PARAM_BUDGET.0, PARAM_BUDGET.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = layout
        .entries
        .iter()
        .map(|e| match e.init {
            Init::Zeros => Tensor::zeros(&e.shape),
            Init::Ones => Tensor::from_fn(&e.shape, |_| T::one()),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&e.shape, |_| T::of(rng.gen_range(-bound..=bound)))
            }
        })
        .collect();
    Ok(Model {
        hyper: hyper.clone(),
        layout,
        params,
    })
}

impl<T: Scalar> Model<T> {
    /// Builds a model from named tensors, which must match the layout implied
    /// by `hyper` in order, name and shape.
    pub fn from_tensors(hyper: Hyperparams, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        if tensors.len() != layout.entries.len() {
            return Err(Error::Corrupt(format!(
                "expected {} model tensors, found {}",
                layout.entries.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for (entry, (name, t)) in layout.entries.iter().zip(tensors) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            params.push(t);
        }
        Ok(Model {
            hyper,
            layout,
            params,
        })
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            hyper: self.hyper.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on `tape`, in layout order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    pub fn predict(&self, social: &SocialMatrix, map: &MapMatrix) -> Result<Prediction> {
        Ok(self.predict_batch(&[(social, map)])?.remove(0))
    }

    /// Batched inference. Parameters are bound once; samples run in stacked
    /// chunks of [`INFER_CHUNK`] on a rewound tape so intermediates stay small.
    pub fn predict_batch(&self, batch: &[(&SocialMatrix, &MapMatrix)]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let base = tape.len();
        let to_points = |d: &[T]| -> Vec<[f64; 2]> {
            d.chunks_exact(2)
                .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy()])
                .collect()
        };
        let mut preds = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(INFER_CHUNK) {
            tape.truncate(base);
            let out = self.forward(&mut tape, &vars, chunk)?;
            let coarse = tape.value(out.coarse).data();
            let full = tape.value(out.full).data();
            preds.extend((0..chunk.len()).map(|b| Prediction {
                coarse: to_points(&coarse[b * COARSE_STEPS * 2..(b + 1) * COARSE_STEPS * 2]),
                full: to_points(&full[b * COARSE_STEPS * 4..(b + 1) * COARSE_STEPS * 4]),
            }));
        }
        Ok(preds)
    }
}

/// Samples per stacked forward pass in [`Model::predict_batch`].
pub const INFER_CHUNK: usize = 16;
