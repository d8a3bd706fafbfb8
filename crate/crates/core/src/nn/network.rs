use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{run_backward, run_infer, run_train, Buffer, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named run of layers. Frozen segments always execute in inference mode
/// and receive no gradient.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub layers: Vec<Layer>,
    pub frozen: bool,
}

impl Segment {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Segment {
            name: name.into(),
            layers,
            frozen: false,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(Layer::params)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.layers.iter().flat_map(Layer::buffers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters and buffers keyed by their dotted names.
pub type StateDict = BTreeMap<String, StateEntry>;

/// A sequential network made of named segments.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    segments: Vec<Segment>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, segments: Vec<Segment>) -> Self {
        Network {
            input_shape,
            segments,
        }
    }

    /// Per-sample input shape `[c, h, w]`.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut Vec<Segment> {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 1 + self.input_shape.len() || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "network expects samples of shape {:?}, got batch {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training forward pass. Frozen segments must form a prefix.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut seen_trainable = false;
        let mut h = x.clone();
        for seg in &mut self.segments {
            if seg.frozen {
                if seen_trainable {
                    return Err(Error::Contract(format!(
                        "frozen segment {} follows a trainable one",
                        seg.name
                    )));
                }
                h = run_infer(&seg.layers, &h);
            } else {
                seen_trainable = true;
                h = run_train(&mut seg.layers, &h);
            }
        }
        Ok(h)
    }

    /// Backpropagates through the trainable suffix, accumulating parameter gradients.
    pub fn backward(&mut self, grad: &Tensor) {
        let mut g = grad.clone();
        for seg in self.segments.iter_mut().rev() {
            if seg.frozen {
                break;
            }
            g = run_backward(&mut seg.layers, &g);
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self
            .segments
            .iter()
            .fold(x.clone(), |h, seg| run_infer(&seg.layers, &h)))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.segments.iter().flat_map(|s| s.params()).collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        self.segments
            .iter_mut()
            .filter(|s| !s.frozen)
            .flat_map(|s| s.layers.iter_mut().flat_map(Layer::params_mut))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for seg in &mut self.segments {
            for layer in &mut seg.layers {
                for p in layer.params_mut() {
                    p.grad.fill(0.0);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Output width for one sample.
    pub fn output_width(&self) -> usize {
        let shape = self
            .segments
            .iter()
            .flat_map(|s| &s.layers)
            .fold(self.input_shape.clone(), |s, l| l.output_shape(&s));
        shape.iter().product()
    }

    /// Ordered `layer_kind shape` lines describing the architecture.
    pub fn fingerprint(&self) -> Vec<String> {
        let mut out = Vec::new();
        for seg in &self.segments {
            for layer in &seg.layers {
                layer.fingerprint(&mut out);
            }
        }
        out
    }

    pub fn state_dict(&self) -> StateDict {
        let mut dict = StateDict::new();
        for seg in &self.segments {
            for p in seg.params() {
                dict.insert(
                    p.name.clone(),
                    StateEntry {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                );
            }
            for b in seg.buffers() {
                dict.insert(
                    b.name.clone(),
                    StateEntry {
                        shape: vec![b.value.len()],
                        data: b.value.clone(),
                    },
                );
            }
        }
        dict
    }

    /// Strict load: every key must match by name and shape, in both directions.
    pub fn load_state_dict(&mut self, dict: &StateDict) -> Result<()> {
        let own = self.state_dict();
        let missing: Vec<String> = own.keys().filter(|k| !dict.contains_key(*k)).cloned().collect();
        let unexpected: Vec<String> = dict.keys().filter(|k| !own.contains_key(*k)).cloned().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::StateDictMismatch { missing, unexpected });
        }
        for (name, entry) in &own {
            let incoming = &dict[name];
            if incoming.shape != entry.shape || incoming.data.len() != entry.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: checkpoint has shape {:?}, model expects {:?}",
                    incoming.shape, entry.shape
                )));
            }
        }
        for seg in &mut self.segments {
            for layer in &mut seg.layers {
                for p in layer.params_mut() {
                    p.value.copy_from_slice(&dict[&p.name].data);
                }
                for b in layer.buffers_mut() {
                    b.value.copy_from_slice(&dict[&b.name].data);
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of the state dict.
    pub fn state_hash(&self) -> String {
        hash_state(&self.state_dict())
    }
}

pub fn hash_state(dict: &StateDict) -> String {
    let mut h = Sha256::new();
    for (name, entry) in dict {
        h.update(name.as_bytes());
        for d in &entry.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &entry.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
