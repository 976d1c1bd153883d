use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

use super::{check_layout_for_arch, layer_views, ModelArch, ParameterVector, Wiring};

/// Everything the forward pass computed, retained so [`super::backward`] can
/// replay it. Activations are post-relu; logits have no activation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) input: Array2<f64>,
    pub(crate) trunk_activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub(crate) aux_activations: Vec<Array2<f64>>,
    pub aux_logits: Option<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Last trunk activation — the representation read by the main head.
    pub fn representation(&self) -> &Array2<f64> {
        self.trunk_activations
            .last()
            .expect("trace always has at least one trunk layer")
    }

    /// Last aux activation, when an aux head is attached.
    pub fn aux_representation(&self) -> Option<&Array2<f64>> {
        if self.aux_logits.is_some() {
            self.aux_activations.last()
        } else {
            None
        }
    }

    /// Post-activation output of every trunk layer, bottom-up.
    pub fn trunk_activations(&self) -> &[Array2<f64>] {
        &self.trunk_activations
    }
}

fn affine(x: &Array2<f64>, w: ArrayView2<f64>, b: ndarray::ArrayView1<f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// Run the network on a batch (rows = examples). The trace keeps every
/// intermediate needed for backprop. Logits are checked finite; a non-finite
/// forward is a numeric error, not a silent NaN propagation.
pub fn forward(arch: &ModelArch, params: &ParameterVector, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
    arch.validate()?;
    check_layout_for_arch(arch, params)?;
    if batch.nrows() == 0 {
        return Err(Error::Input("forward pass requires a nonempty batch".into()));
    }
    if batch.ncols() != arch.input_dim {
        return Err(Error::Input(format!(
            "batch has {} columns, architecture expects {}",
            batch.ncols(),
            arch.input_dim
        )));
    }

    let wiring = Wiring::of(arch);
    let input = batch.to_owned();

    let mut trunk_activations = Vec::with_capacity(arch.trunk_dims.len());
    let mut x = input.clone();
    for &idx in &wiring.trunk {
        let (w, b) = layer_views(params, idx);
        let mut z = affine(&x, w, b);
        relu_inplace(&mut z);
        trunk_activations.push(z.clone());
        x = z;
    }

    let (w_head, b_head) = layer_views(params, wiring.head);
    let logits = affine(&x, w_head, b_head);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("forward pass produced non-finite logits".into()));
    }

    let mut aux_activations = Vec::new();
    let mut aux_logits = None;
    if let Some(aux_head_idx) = wiring.aux_head {
        let tap = arch.aux_head.as_ref().expect("wiring has aux").tap_index;
        let mut y = trunk_activations[tap].clone();
        for &idx in &wiring.aux {
            let (w, b) = layer_views(params, idx);
            let mut z = affine(&y, w, b);
            relu_inplace(&mut z);
            aux_activations.push(z.clone());
            y = z;
        }
        let (w, b) = layer_views(params, aux_head_idx);
        let al = affine(&y, w, b);
        if !al.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "forward pass produced non-finite auxiliary logits".into(),
            ));
        }
        aux_logits = Some(al);
    }

    Ok(ForwardTrace {
        input,
        trunk_activations,
        logits,
        aux_activations,
        aux_logits,
    })
}

/// Row-wise argmax (ties resolve to the lowest index).
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, AuxHead};
    use ndarray::array;
    use rand::Rng;

    fn arch_with_aux() -> ModelArch {
        ModelArch {
            input_dim: 8,
            trunk_dims: vec![6, 4],
            num_classes: 3,
            aux_head: Some(AuxHead {
                tap_index: 0,
                hidden_dims: vec![4],
            }),
            activation: Activation::Relu,
        }
    }

    #[test]
    fn identity_layer_passes_nonnegative_input_through() {
        let arch = ModelArch {
            input_dim: 3,
            trunk_dims: vec![3],
            num_classes: 2,
            aux_head: None,
            activation: Activation::Relu,
        };
        let mut params = ParameterVector::zeros(arch.layout());
        let w = params.entry("trunk0.weight").unwrap().clone();
        for i in 0..3 {
            params.block_mut(&w)[i * 3 + i] = 1.0;
        }
        let batch = array![[0.0, 0.5, 1.0], [2.0, 0.0, 3.0]];
        let trace = forward(&arch, &params, batch.view()).unwrap();
        assert_eq!(trace.representation(), &batch);
        assert!(trace.logits.iter().all(|v| *v == 0.0));
    }

    /// Straight-line oracle: explicit loops over the named weight blocks,
    /// no shared code with the production matmul path.
    fn oracle_forward(
        arch: &ModelArch,
        params: &ParameterVector,
        batch: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dense =
            |x: &Array2<f64>, wid: &str, bid: &str, out: usize, relu: bool| -> Array2<f64> {
                let we = params.entry(wid).unwrap().clone();
                let be = params.entry(bid).unwrap().clone();
                let w = params.block(&we);
                let b = params.block(&be);
                let inp = x.ncols();
                let mut z = Array2::<f64>::zeros((x.nrows(), out));
                for r in 0..x.nrows() {
                    for o in 0..out {
                        let mut acc = b[o];
                        for i in 0..inp {
                            acc += x[[r, i]] * w[o * inp + i];
                        }
                        z[[r, o]] = if relu { acc.max(0.0) } else { acc };
                    }
                }
                z
            };
        let a0 = dense(batch, "trunk0.weight", "trunk0.bias", arch.trunk_dims[0], true);
        let a1 = dense(&a0, "trunk1.weight", "trunk1.bias", arch.trunk_dims[1], true);
        let logits = dense(&a1, "head.weight", "head.bias", arch.num_classes, false);
        let aux_dims = &arch.aux_head.as_ref().unwrap().hidden_dims;
        let h0 = dense(&a0, "aux0.weight", "aux0.bias", aux_dims[0], true);
        let aux_logits = dense(&h0, "aux_head.weight", "aux_head.bias", arch.num_classes, false);
        (logits, aux_logits)
    }

    #[test]
    fn logits_match_hand_rolled_oracle() {
        let arch = arch_with_aux();
        let params = arch.init_params(11).unwrap();
        let mut rng = crate::rng::derive_rng(11, 99, 0, 0);
        let batch = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));

        let trace = forward(&arch, &params, batch.view()).unwrap();
        let (logits, aux_logits) = oracle_forward(&arch, &params, &batch);

        for (a, b) in trace.logits.iter().zip(logits.iter()) {
            assert!((a - b).abs() < 1e-10, "logits diverge: {a} vs {b}");
        }
        for (a, b) in trace.aux_logits.as_ref().unwrap().iter().zip(aux_logits.iter()) {
            assert!((a - b).abs() < 1e-10, "aux logits diverge: {a} vs {b}");
        }
    }

    #[test]
    fn aux_head_never_changes_main_logits() {
        let with_aux = arch_with_aux();
        let without = ModelArch {
            aux_head: None,
            ..arch_with_aux()
        };
        let pa = with_aux.init_params(21).unwrap();
        let pb = without.init_params(21).unwrap();
        let mut rng = crate::rng::derive_rng(21, 98, 0, 0);
        let batch = Array2::from_shape_fn((7, 8), |_| rng.gen_range(-2.0..2.0));

        let ta = forward(&with_aux, &pa, batch.view()).unwrap();
        let tb = forward(&without, &pb, batch.view()).unwrap();
        assert_eq!(ta.logits, tb.logits);
        assert!(ta.aux_logits.is_some());
        assert!(tb.aux_logits.is_none());
    }

    #[test]
    fn rejects_bad_batches_and_params() {
        let arch = arch_with_aux();
        let params = arch.init_params(1).unwrap();
        let empty = Array2::<f64>::zeros((0, 8));
        assert!(forward(&arch, &params, empty.view()).is_err());
        let narrow = Array2::<f64>::zeros((2, 5));
        assert!(forward(&arch, &params, narrow.view()).is_err());

        let other = ModelArch {
            aux_head: None,
            ..arch_with_aux()
        };
        let wrong = other.init_params(1).unwrap();
        let batch = Array2::<f64>::zeros((2, 8));
        assert!(forward(&arch, &wrong, batch.view()).is_err());
    }

    #[test]
    fn non_finite_parameters_surface_as_numeric_error() {
        let arch = arch_with_aux();
        let mut params = arch.init_params(1).unwrap();
        params.values_mut()[0] = f64::INFINITY;
        let batch = Array2::from_elem((2, 8), 1.0);
        match forward(&arch, &params, batch.view()) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        let logits = array![[1.0, 1.0, 0.5], [0.1, 0.9, 0.9]];
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}
