//! Mini-batch assembly.

use rand::seq::SliceRandom;

use super::augment::augment;
use super::{DataError, SamplePair};
use crate::tensor::Tensor;
use crate::Rng;

/// Stacked `[B, 1, H, W]` inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub ids: Vec<String>,
}

/// Yields batches of `batch_size` pairs; the last batch may be smaller.
///
/// With a generator the order is shuffled once at construction and every
/// pair is augmented as it is emitted, drawing from the same generator.
/// Without one, pairs come out in the given order, untouched.
pub struct BatchIter<'a> {
    pairs: &'a [SamplePair],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Option<&'a mut Rng>,
}

impl<'a> BatchIter<'a> {
    pub fn new(pairs: &'a [SamplePair], batch_size: usize, mut rng: Option<&'a mut Rng>) -> Self {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        if let Some(r) = rng.as_deref_mut() {
            order.shuffle(r);
        }
        Self {
            pairs,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            rng,
        }
    }

    /// Number of batches, counting a final partial one.
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Stacks pairs of identical size into a batch.
pub fn collate(pairs: &[SamplePair]) -> Result<Batch, DataError> {
    let first = pairs.first().ok_or_else(|| DataError::Sample {
        id: String::new(),
        message: "empty batch".into(),
    })?;
    let dims = first.dims()?;
    for p in pairs {
        if p.dims()? != dims {
            return Err(DataError::Sample {
                id: p.id.clone(),
                message: format!("size {:?} differs from batch size {dims:?}", p.dims()?),
            });
        }
    }
    let noisy: Vec<&Tensor> = pairs.iter().map(|p| &p.noisy).collect();
    let clean: Vec<&Tensor> = pairs.iter().map(|p| &p.clean).collect();
    Ok(Batch {
        noisy: Tensor::stack(&noisy)?,
        clean: Tensor::stack(&clean)?,
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<SamplePair> = self.order[self.pos..end]
            .iter()
            .map(|&i| match self.rng.as_deref_mut() {
                Some(r) => augment(&self.pairs[i], r),
                None => self.pairs[i].clone(),
            })
            .collect();
        self.pos = end;
        Some(collate(&picked))
    }
}
