//! Named parameter tensors with per-tensor trainable flags.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type the network is generic over (f32 for training, f64 for gradient checks).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Float for f32 {}
impl Float for f64 {}

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

impl<F: Float> Tensor<F> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Which tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    All,
    /// Adapters, every layer norm and the action head.
    FinetuneSet,
}

impl std::str::FromStr for TrainableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainableSet::All),
            "finetune_set" => Ok(TrainableSet::FinetuneSet),
            other => Err(Error::InvalidParameter(format!("unknown selector `{other}`"))),
        }
    }
}

pub fn is_finetune_tensor(name: &str) -> bool {
    name.starts_with("head.")
        || name
            .split('.')
            .any(|part| part == "adapter" || part.starts_with("ln"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<F> {
    tensors: Vec<Tensor<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Float> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidParameter(format!("duplicate tensor `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "`{name}`: shape {shape:?} holds {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        &self.tensors[id].data
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.tensors[id].data[..])
    }

    /// Views a tensor as `[rows, numel / rows]`.
    pub fn view2(&self, id: ParamId, rows: usize) -> ArrayView2<'_, F> {
        let t = &self.tensors[id];
        ArrayView2::from_shape((rows, t.data.len() / rows), &t.data).expect("2-d tensor view")
    }

    pub fn count_params(&self, only_trainable: bool) -> usize {
        self.tensors
            .iter()
            .filter(|t| !only_trainable || t.trainable)
            .map(Tensor::numel)
            .sum()
    }

    pub fn set_trainable(&mut self, selector: TrainableSet) {
        for t in &mut self.tensors {
            t.trainable = match selector {
                TrainableSet::All => true,
                TrainableSet::FinetuneSet => is_finetune_tensor(&t.name),
            };
        }
    }

    pub fn cast<G: Float>(&self) -> ParameterStore<G> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| G::of(x.to_f64_lossy())).collect(),
                    trainable: t.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Byte-level fingerprint of every frozen tensor, for freeze checks.
    pub fn frozen_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| !t.trainable) {
            h.update(t.name.as_bytes());
            for x in &t.data {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers, allocated exactly for the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn for_store(store: &ParameterStore<F>) -> Self {
        Self {
            bufs: store
                .tensors
                .iter()
                .map(|t| t.trainable.then(|| vec![F::zero(); t.numel()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn has(&self, id: ParamId) -> bool {
        self.bufs[id].is_some()
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.bufs[id].as_deref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [F]> {
        self.bufs[id].as_deref_mut()
    }

    pub fn view2_mut(&mut self, id: ParamId, rows: usize) -> Option<ArrayViewMut2<'_, F>> {
        self.bufs[id].as_mut().map(|b| {
            let cols = b.len() / rows;
            ArrayViewMut2::from_shape((rows, cols), &mut b[..]).expect("2-d gradient view")
        })
    }

    /// Mutable weight and bias buffers of one linear map at once.
    pub fn linear_mut(
        &mut self,
        w: ParamId,
        rows: usize,
        b: ParamId,
    ) -> (Option<ArrayViewMut2<'_, F>>, Option<&mut [F]>) {
        assert_ne!(w, b, "weight and bias must be distinct tensors");
        let split = w.max(b);
        let (lo, hi) = self.bufs.split_at_mut(split);
        let (wb, bb) = if w < b {
            (&mut lo[w], &mut hi[0])
        } else {
            (&mut hi[0], &mut lo[b])
        };
        let wv = wb.as_mut().map(|buf| {
            let cols = buf.len() / rows;
            ArrayViewMut2::from_shape((rows, cols), &mut buf[..]).expect("2-d gradient view")
        });
        (wv, bb.as_deref_mut())
    }

    pub fn allocated(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|_| i))
    }

    pub fn global_norm_excluding(&self, skip: &[ParamId]) -> F {
        self.bufs
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i))
            .filter_map(|(_, b)| b.as_ref())
            .flat_map(|b| b.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }
}
