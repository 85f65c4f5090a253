use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::tensor::Real;
use crate::error::{Error, Result};

/// What a parameter block is used for; decides init and regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// 3x3x3 convolution kernel; the only kind that receives the L2 penalty.
    ConvKernel,
    Bias,
    DenseWeight,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::ConvKernel => 0,
            ParamKind::Bias => 1,
            ParamKind::DenseWeight => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamKind::ConvKernel),
            1 => Some(ParamKind::Bias),
            2 => Some(ParamKind::DenseWeight),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Inputs feeding one output unit, for He scaling.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Values plus gradient accumulator and Adam moments, all the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub spec: ParamSpec,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> ParamBlock<T> {
    pub fn new(spec: ParamSpec, value: Vec<T>) -> Self {
        let n = value.len();
        ParamBlock {
            spec,
            value,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// Ordered, name-addressable parameter blocks of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    blocks: Vec<ParamBlock<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(blocks: Vec<ParamBlock<T>>) -> Self {
        ParamSet { blocks }
    }

    /// He-uniform weights (`U(-a, a)`, `a = sqrt(6 / fan_in)`), zero biases.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let blocks = specs
            .iter()
            .map(|spec| {
                let value = match spec.kind {
                    ParamKind::Bias => vec![T::zero(); spec.len()],
                    ParamKind::ConvKernel | ParamKind::DenseWeight => {
                        let limit = (6.0 / spec.fan_in.max(1) as f64).sqrt();
                        (0..spec.len()).map(|_| T::lit(rng.random_range(-limit..limit))).collect()
                    }
                };
                ParamBlock::new(spec.clone(), value)
            })
            .collect();
        ParamSet { blocks }
    }

    /// Every value set to zero.
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        ParamSet {
            blocks: specs
                .iter()
                .map(|s| ParamBlock::new(s.clone(), vec![T::zero(); s.len()]))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock<T>> {
        self.blocks.iter().find(|b| b.spec.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamBlock<T>> {
        self.blocks.iter_mut().find(|b| b.spec.name == name)
    }

    #[inline]
    pub(crate) fn value(&self, idx: usize) -> &[T] {
        &self.blocks[idx].value
    }

    pub(crate) fn accumulate(&mut self, idx: usize, grad: &[T]) {
        for (g, &d) in self.blocks[idx].grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(T::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.value.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum()
    }

    /// Same values in another precision; gradients and moments reset.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock::new(b.spec.clone(), b.value.iter().map(|&v| U::lit(v.to_f64_lossy())).collect()))
                .collect(),
        }
    }

    /// Checks that this set lines up block-for-block with `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for (i, spec) in specs.iter().enumerate() {
            let Some(block) = self.blocks.get(i) else {
                return Err(Error::ParamMismatch {
                    block: spec.name.clone(),
                    reason: "missing from parameter set".into(),
                });
            };
            if block.spec.name != spec.name {
                return Err(Error::ParamMismatch {
                    block: spec.name.clone(),
                    reason: format!("found `{}` in its place", block.spec.name),
                });
            }
            if block.spec.shape != spec.shape || block.spec.kind != spec.kind {
                return Err(Error::ParamMismatch {
                    block: spec.name.clone(),
                    reason: format!("shape {:?} does not match expected {:?}", block.spec.shape, spec.shape),
                });
            }
        }
        if let Some(extra) = self.blocks.get(specs.len()) {
            return Err(Error::ParamMismatch {
                block: extra.spec.name.clone(),
                reason: "not part of the architecture".into(),
            });
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) {
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            dst.value.copy_from_slice(&src.value);
        }
    }
}
