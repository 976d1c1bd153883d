//! Dense feed-forward model with an optional auxiliary classifier head.
//!
//! The trunk is a stack of relu layers; the main head reads the last trunk
//! activation (the "representation"). An auxiliary head, when present, taps a
//! strictly earlier trunk activation and runs its own relu stack plus linear
//! classifier. Gradients flowing from the auxiliary head re-enter the trunk at
//! the tap layer and below only.
//!
//! All parameters live in one flat [`ParameterVector`] whose [`ParamLayout`]
//! names each weight matrix and bias with its offset and shape. Layout order
//! is fixed (trunk bottom-up, main head, aux stack, aux head) so that two
//! architectures sharing a trunk prefix initialize that prefix identically
//! from the same seed.

mod backward;
mod forward;
mod optim;

pub use backward::{backward, UpstreamGrads};
pub use forward::{argmax_rows, forward, ForwardTrace};
pub use optim::{grad_check, sgd_step, OptimizerSettings, OptimizerState};

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};

/// Hidden-layer nonlinearity. Only relu is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Auxiliary classifier specification: taps the post-activation output of
/// trunk layer `tap_index` and runs `hidden_dims` relu layers before its own
/// linear classifier. The last hidden width is the auxiliary representation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxHead {
    pub tap_index: usize,
    pub hidden_dims: Vec<usize>,
}

/// Model architecture. `trunk_dims` are the widths of the relu trunk layers;
/// the main classifier reads the last of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub trunk_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub aux_head: Option<AuxHead>,
    #[serde(default)]
    pub activation: Activation,
}

/// One named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub id: String,
    pub offset: usize,
    /// `[rows, cols]` for weights, `[rows]` for biases.
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared, immutable description of how a flat value vector maps to layers.
pub type ParamLayout = Arc<Vec<ParamEntry>>;

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.trunk_dims.is_empty() || self.trunk_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(
                "trunk_dims must be nonempty with positive widths".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if let Some(aux) = &self.aux_head {
            if aux.hidden_dims.is_empty() || aux.hidden_dims.iter().any(|&d| d == 0) {
                return Err(Error::Config(
                    "aux_head.hidden_dims must be nonempty with positive widths".into(),
                ));
            }
            // The aux head must branch strictly below the representation layer.
            if aux.tap_index + 1 >= self.trunk_dims.len() {
                return Err(Error::Config(format!(
                    "aux_head.tap_index {} must satisfy tap_index + 1 < trunk depth {}",
                    aux.tap_index,
                    self.trunk_dims.len()
                )));
            }
        }
        Ok(())
    }

    /// Width of the representation read by the main head.
    pub fn representation_dim(&self) -> usize {
        *self.trunk_dims.last().expect("validated nonempty trunk")
    }

    /// Width of the auxiliary representation, if an aux head is attached.
    pub fn aux_representation_dim(&self) -> Option<usize> {
        self.aux_head
            .as_ref()
            .map(|aux| *aux.hidden_dims.last().expect("validated nonempty aux"))
    }

    /// Deterministic layer order: trunk bottom-up, main head, aux stack, aux head.
    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |id: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            entries.push(ParamEntry { id, offset, shape });
            offset += len;
        };

        let mut in_dim = self.input_dim;
        for (i, &out) in self.trunk_dims.iter().enumerate() {
            push(format!("trunk{i}.weight"), vec![out, in_dim]);
            push(format!("trunk{i}.bias"), vec![out]);
            in_dim = out;
        }
        push("head.weight".into(), vec![self.num_classes, in_dim]);
        push("head.bias".into(), vec![self.num_classes]);

        if let Some(aux) = &self.aux_head {
            let mut aux_in = self.trunk_dims[aux.tap_index];
            for (j, &out) in aux.hidden_dims.iter().enumerate() {
                push(format!("aux{j}.weight"), vec![out, aux_in]);
                push(format!("aux{j}.bias"), vec![out]);
                aux_in = out;
            }
            push("aux_head.weight".into(), vec![self.num_classes, aux_in]);
            push("aux_head.bias".into(), vec![self.num_classes]);
        }

        Arc::new(entries)
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|e| e.len()).sum()
    }

    /// Xavier-uniform weights (±sqrt(6 / (fan_in + fan_out))), zero biases.
    /// Values are drawn in layout order, row-major within each matrix, from a
    /// single stream, so architectures sharing a layout prefix share its
    /// initial values for the same seed.
    pub fn init_params(&self, seed: u64) -> Result<ParameterVector> {
        self.validate()?;
        let layout = self.layout();
        let mut rng = derive_rng(seed, stream::INIT, 0, 0);
        let total: usize = layout.iter().map(|e| e.len()).sum();
        let mut values = Vec::with_capacity(total);
        for entry in layout.iter() {
            match entry.shape.as_slice() {
                [out, inp] => {
                    let limit = (6.0 / (*inp as f64 + *out as f64)).sqrt();
                    let dist = Uniform::new(-limit, limit);
                    values.extend((0..out * inp).map(|_| dist.sample(&mut rng)));
                }
                [n] => values.extend(std::iter::repeat(0.0).take(*n)),
                other => unreachable!("layout shape {other:?}"),
            }
        }
        ParameterVector::from_values(layout, values)
    }
}

/// Flat parameter (or gradient/update) vector plus its layout.
#[derive(Debug, Clone)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParameterVector {
    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(|e| e.len()).sum();
        if values.len() != expected {
            return Err(Error::Input(format!(
                "parameter vector has {} values, layout expects {expected}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let total: usize = layout.iter().map(|e| e.len()).sum();
        Self {
            values: vec![0.0; total],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entry(&self, id: &str) -> Option<&ParamEntry> {
        self.layout.iter().find(|e| e.id == id)
    }

    pub fn block(&self, entry: &ParamEntry) -> &[f64] {
        &self.values[entry.offset..entry.offset + entry.len()]
    }

    pub fn block_mut(&mut self, entry: &ParamEntry) -> &mut [f64] {
        &mut self.values[entry.offset..entry.offset + entry.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_same_layout(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    /// `self += coeff * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, coeff: f64) -> Result<()> {
        check_same_layout(self, other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += coeff * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, coeff: f64) {
        for v in &mut self.values {
            *v *= coeff;
        }
    }
}

/// Layouts must describe the same parameterization for any pairwise operation.
pub fn check_same_layout(a: &ParameterVector, b: &ParameterVector) -> Result<()> {
    if Arc::ptr_eq(&a.layout, &b.layout) || a.layout == b.layout {
        Ok(())
    } else {
        Err(Error::Input(
            "parameter vectors have incompatible layouts".into(),
        ))
    }
}

/// Entry indices for each structural piece of a layout, in layout order.
/// Weight entry index is returned; the matching bias is always `index + 1`.
pub(crate) struct Wiring {
    pub trunk: Vec<usize>,
    pub head: usize,
    pub aux: Vec<usize>,
    pub aux_head: Option<usize>,
}

impl Wiring {
    pub fn of(arch: &ModelArch) -> Self {
        let depth = arch.trunk_dims.len();
        let trunk: Vec<usize> = (0..depth).map(|i| 2 * i).collect();
        let head = 2 * depth;
        let (aux, aux_head) = match &arch.aux_head {
            Some(spec) => {
                let base = head + 2;
                let aux: Vec<usize> = (0..spec.hidden_dims.len()).map(|j| base + 2 * j).collect();
                (aux, Some(base + 2 * spec.hidden_dims.len()))
            }
            None => (Vec::new(), None),
        };
        Self {
            trunk,
            head,
            aux,
            aux_head,
        }
    }
}

/// Borrow the weight matrix and bias vector at weight-entry index `idx`.
pub(crate) fn layer_views<'a>(
    params: &'a ParameterVector,
    idx: usize,
) -> (ndarray::ArrayView2<'a, f64>, ndarray::ArrayView1<'a, f64>) {
    let entries = params.layout();
    let w = &entries[idx];
    let b = &entries[idx + 1];
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let wv = ndarray::ArrayView2::from_shape((rows, cols), params.block(w))
        .expect("layout shape matches block length");
    let bv = ndarray::ArrayView1::from_shape(b.shape[0], params.block(b))
        .expect("layout shape matches block length");
    (wv, bv)
}

/// Verify `params` was built for `arch`'s layout.
pub(crate) fn check_layout_for_arch(arch: &ModelArch, params: &ParameterVector) -> Result<()> {
    let expected = arch.layout();
    if *params.layout() == expected {
        Ok(())
    } else {
        Err(Error::Input(
            "parameter vector layout does not match architecture".into(),
        ))
    }
}
