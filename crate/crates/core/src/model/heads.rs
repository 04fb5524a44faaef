use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_step, Chain, ForwardTrace, GradientVector, Layer, Matrix, MlpParams};
use crate::error::{shape, Error, Result};
use crate::scalar::{scalar_bytes, Real};

/// Linear classifier head over the trunk output; output `k` scores global
/// class `classes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub layer: Layer<T>,
    pub classes: Vec<u32>,
}

impl<T> Head<T> {
    pub fn local_index(&self, class: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRef {
    Task(u32),
    Temporary,
}

/// Shared trunk `f(x)` with one head per task plus an optional temporary head
/// used while fine-tuning the trunk. Every trunk layer is followed by a
/// rectifier; heads are linear.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet<T> {
    trunk: MlpParams<T>,
    heads: BTreeMap<u32, Head<T>>,
    temporary: Option<Head<T>>,
}

impl<T: Real> HeadSet<T> {
    pub fn new(trunk: MlpParams<T>) -> Self {
        Self {
            trunk,
            heads: BTreeMap::new(),
            temporary: None,
        }
    }

    pub fn trunk(&self) -> &MlpParams<T> {
        &self.trunk
    }

    pub fn trunk_width(&self) -> usize {
        *self.trunk.layer_sizes().last().expect("nonempty")
    }

    pub fn tasks(&self) -> impl Iterator<Item = u32> + '_ {
        self.heads.keys().copied()
    }

    pub fn add_head(&mut self, task: u32, classes: Vec<u32>, seed: u64) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::Precondition(format!("head for task {task} exists")));
        }
        if classes.is_empty() {
            return Err(shape("a head needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Layer::init(self.trunk_width(), classes.len(), &mut rng);
        self.heads.insert(task, Head { layer, classes });
        Ok(())
    }

    /// Ensures the temporary head scores exactly `classes` (in order), keeping
    /// the rows of classes it already had and initializing the rest.
    pub fn set_temporary_classes(&mut self, classes: &[u32], seed: u64) {
        let width = self.trunk_width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = Layer::<T>::init(width, classes.len(), &mut rng);
        let mut weights = Vec::with_capacity(classes.len() * width);
        let mut bias = Vec::with_capacity(classes.len());
        for (k, c) in classes.iter().enumerate() {
            let old = self
                .temporary
                .as_ref()
                .and_then(|h| h.local_index(*c).map(|i| (h, i)));
            match old {
                Some((h, i)) => {
                    weights.extend_from_slice(h.layer.weights.row(i));
                    bias.push(h.layer.bias[i]);
                }
                None => {
                    weights.extend_from_slice(fresh.weights.row(k));
                    bias.push(fresh.bias[k]);
                }
            }
        }
        self.temporary = Some(Head {
            layer: Layer {
                weights: Matrix::from_vec(classes.len(), width, weights).expect("sized"),
                bias,
            },
            classes: classes.to_vec(),
        });
    }

    pub fn head(&self, which: HeadRef) -> Result<&Head<T>> {
        match which {
            HeadRef::Task(t) => self
                .heads
                .get(&t)
                .ok_or_else(|| Error::Precondition(format!("unknown task id {t}"))),
            HeadRef::Temporary => self
                .temporary
                .as_ref()
                .ok_or_else(|| Error::Precondition("no temporary head".into())),
        }
    }

    fn head_mut(&mut self, which: HeadRef) -> Result<&mut Head<T>> {
        match which {
            HeadRef::Task(t) => self
                .heads
                .get_mut(&t)
                .ok_or_else(|| Error::Precondition(format!("unknown task id {t}"))),
            HeadRef::Temporary => self
                .temporary
                .as_mut()
                .ok_or_else(|| Error::Precondition("no temporary head".into())),
        }
    }

    /// Trunk layers followed by the selected head.
    pub fn chain(&self, which: HeadRef) -> Result<Chain<'_, T>> {
        let head = self.head(which)?;
        let mut layers: Vec<&Layer<T>> = self.trunk.layers().iter().collect();
        layers.push(&head.layer);
        Chain::new(layers)
    }

    pub fn forward(&self, input: &Matrix<T>, which: HeadRef) -> Result<ForwardTrace<T>> {
        self.chain(which)?.forward(input)
    }

    /// Applies an SGD step from a gradient over `chain(which)`; the trunk part
    /// is skipped when `train_trunk` is false.
    pub fn descend(
        &mut self,
        which: HeadRef,
        grad: &GradientVector<T>,
        lr: T,
        train_trunk: bool,
    ) -> Result<()> {
        let trunk_n = self.trunk.param_count();
        let head_n = self.head(which)?.layer.param_count();
        check_step(grad, trunk_n + head_n, lr)?;
        if train_trunk {
            self.trunk
                .descend(&GradientVector(grad.0[..trunk_n].to_vec()), lr)?;
        }
        self.head_mut(which)?.layer.descend(&grad.0[trunk_n..], lr);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self
                .heads
                .values()
                .chain(self.temporary.iter())
                .map(|h| h.layer.param_count())
                .sum::<usize>()
    }

    pub fn size_bytes(&self) -> usize {
        self.param_count() * scalar_bytes::<T>()
    }
}
