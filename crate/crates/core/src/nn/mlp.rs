use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::batch::Batch;
use crate::nn::model::{Model, ModelOutput};
use crate::nn::params::{Layout, ParamVector, SegmentKind};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// `widths = [input, hidden.., classes]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec { widths, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::invalid(
                "an MLP needs input, at least one hidden layer, and output widths",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Fully connected network over a fixed [`MlpSpec`]. Weights of layer `l` are
/// stored as `layer{l}.weight` with shape `(in, out)`, followed by
/// `layer{l}.bias` with shape `(out,)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Arc<Layout>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut parts = Vec::new();
        for l in 0..spec.layers() {
            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
            parts.push((format!("layer{l}.weight"), vec![i, o], SegmentKind::Weight));
            parts.push((format!("layer{l}.bias"), vec![o], SegmentKind::Bias));
        }
        let layout = Arc::new(Layout::packed(parts)?);
        Ok(Mlp { spec, layout })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// He-normal weights for ReLU, LeCun-normal for tanh; zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let mut values = vec![0.0; self.layout.len()];
        let gain = match self.spec.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        for seg in self.layout.segments() {
            if seg.kind == SegmentKind::Weight {
                let fan_in = seg.shape[0] as f64;
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).unwrap();
                for v in &mut values[seg.range()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        ParamVector::new(self.layout.clone(), values).unwrap()
    }
}

impl Model for Mlp {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &Batch,
    ) -> Result<ModelOutput> {
        if batch.dim() != self.spec.input_dim() {
            return Err(Error::shape(
                "layer0.weight",
                format!("input dim {}", self.spec.input_dim()),
                batch.dim(),
            ));
        }
        if batch.classes() > self.spec.classes() {
            return Err(Error::shape(
                format!("layer{}.bias", self.spec.layers() - 1),
                format!("{} classes", batch.classes()),
                self.spec.classes(),
            ));
        }
        let mut h = tape.input(batch.inputs().map(T::from_f64));
        for l in 0..self.spec.layers() {
            let z = tape.matmul(h, params[2 * l])?;
            let z = tape.add_row(z, params[2 * l + 1])?;
            h = if l + 1 == self.spec.layers() {
                z
            } else {
                match self.spec.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            };
        }
        let loss = tape.softmax_xent(h, batch.labels())?;
        Ok(ModelOutput {
            loss,
            logits: Some(h),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_requires_a_hidden_layer() {
        assert!(Mlp::new(MlpSpec::new(vec![2, 3], Activation::Relu)).is_err());
        assert!(Mlp::new(MlpSpec::new(vec![2, 0, 3], Activation::Relu)).is_err());
        assert!(Mlp::new(MlpSpec::new(vec![2, 4, 3], Activation::Relu)).is_ok());
    }

    #[test]
    fn layout_names_and_sizes() {
        let m = Mlp::new(MlpSpec::new(vec![2, 8, 2], Activation::Tanh)).unwrap();
        let names: Vec<_> = m.layout().segments().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]);
        assert_eq!(m.layout().len(), 2 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn init_is_seeded() {
        let m = Mlp::new(MlpSpec::new(vec![3, 5, 2], Activation::Relu)).unwrap();
        assert_eq!(m.init(4), m.init(4));
        assert_ne!(m.init(4), m.init(5));
        assert!(m.init(4).segment("layer0.bias").unwrap().iter().all(|&b| b == 0.0));
    }
}
