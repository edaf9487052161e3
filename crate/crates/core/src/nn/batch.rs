use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Which dataset part a batch was drawn from. Training, pruning and
/// prior-selection paths refuse [`Partition::Test`] batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
    Untagged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Tensor<f64>,
    labels: Vec<usize>,
    classes: usize,
    partition: Partition,
}

impl Batch {
    pub fn new(inputs: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = match inputs.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("batch inputs", "(n, d)", format!("{s:?}"))),
        };
        if n == 0 {
            return Err(Error::invalid("batch must hold at least one sample"));
        }
        if labels.len() != n {
            return Err(Error::shape("batch labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Batch {
            inputs,
            labels,
            classes,
            partition: Partition::Untagged,
        })
    }

    pub fn tagged(mut self, partition: Partition) -> Self {
        self.partition = partition;
        self
    }

    pub fn inputs(&self) -> &Tensor<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `idx` in the given order; keeps the partition tag.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Batch {
            inputs: Tensor::from_parts(vec![idx.len(), d], data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            partition: self.partition,
        }
    }

    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Batch {
        Batch {
            labels,
            ..self.clone()
        }
    }

    /// Fails if the batch came from the held-out part.
    pub fn require_not_test(&self, context: &str) -> Result<()> {
        if self.partition == Partition::Test {
            return Err(Error::invalid(format!(
                "{context}: test data may not enter training, pruning or prior selection"
            )));
        }
        Ok(())
    }
}
