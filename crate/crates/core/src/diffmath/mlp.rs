//! Small fully-connected networks: shared decoder, view-conditioning net,
//! and the attention projections are all instances of [`Mlp`].

use rand::Rng;

use super::params::{EntryId, ParamStore};
use super::tape::{BufId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FinalActivation {
    None,
    Sigmoid,
    Softplus,
}

/// Layer widths plus final activation; hidden layers are always ReLU.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    /// `[input, hidden..., output]`; at least one layer (two widths).
    pub widths: Vec<usize>,
    pub final_act: FinalActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, final_act: FinalActivation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!("mlp needs >= 2 positive widths, got {widths:?}")));
        }
        Ok(MlpSpec { widths, final_act })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// An MLP bound to store entries `{prefix}.l{k}.w` / `{prefix}.l{k}.b`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(EntryId, EntryId)>,
}

impl Mlp {
    /// Register freshly initialized parameters: weights uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for k in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.widths[k], spec.widths[k + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let wid = store.register(format!("{prefix}.l{k}.w"), vec![fan_out, fan_in], w, lr)?;
            let bid = store.register(format!("{prefix}.l{k}.b"), vec![fan_out], vec![0.0; fan_out], lr)?;
            layers.push((wid, bid));
        }
        Ok(Mlp { spec, layers })
    }

    /// Re-bind an MLP whose entries already exist in the store (e.g. after
    /// loading a checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for k in 0..spec.num_layers() {
            let wid = store.id(&format!("{prefix}.l{k}.w"))?;
            let bid = store.id(&format!("{prefix}.l{k}.b"))?;
            let we = store.entry(wid);
            if we.shape != [spec.widths[k + 1], spec.widths[k]] {
                return Err(Error::ShapeMismatch {
                    name: we.name.clone(),
                    detail: format!("expected [{}, {}], found {:?}", spec.widths[k + 1], spec.widths[k], we.shape),
                });
            }
            layers.push((wid, bid));
        }
        Ok(Mlp { spec, layers })
    }

    /// Plain forward pass (no tape). Deterministic for fixed inputs.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim() {
            let (wid, _) = self.layers[0];
            return Err(Error::ShapeMismatch {
                name: store.entry(wid).name.clone(),
                detail: format!("input length {} vs expected {}", x.len(), self.spec.input_dim()),
            });
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, (wid, bid)) in self.layers.iter().enumerate() {
            let w = store.values(*wid);
            let b = store.values(*bid);
            let in_dim = self.spec.widths[k];
            let mut next = b.to_vec();
            for (o, row) in next.iter_mut().zip(w.chunks_exact(in_dim)) {
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(&cur) {
                    acc += wi * xi;
                }
                *o += acc;
            }
            if k < last {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            } else {
                match self.spec.final_act {
                    FinalActivation::None => {}
                    FinalActivation::Sigmoid => {
                        for v in next.iter_mut() {
                            *v = super::sigmoid(*v);
                        }
                    }
                    FinalActivation::Softplus => {
                        for v in next.iter_mut() {
                            *v = super::softplus(*v);
                        }
                    }
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Tape-recorded forward pass for training.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: BufId) -> Result<BufId> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (k, (wid, bid)) in self.layers.iter().enumerate() {
            cur = tape.linear(store, *wid, *bid, cur)?;
            if k < last {
                cur = tape.relu(cur);
            } else {
                cur = match self.spec.final_act {
                    FinalActivation::None => cur,
                    FinalActivation::Sigmoid => tape.sigmoid(cur),
                    FinalActivation::Softplus => tape.softplus(cur),
                };
            }
        }
        Ok(cur)
    }

    pub fn entry_ids(&self) -> impl Iterator<Item = EntryId> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}
