use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

use super::{check_layout_for_arch, layer_views, ForwardTrace, ModelArch, ParameterVector, Wiring};

/// Gradients of the scalar loss with respect to the four tensors a loss may
/// read from a trace. `None` means zero. Shapes must match the trace.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub logits: Option<Array2<f64>>,
    pub aux_logits: Option<Array2<f64>>,
    pub representation: Option<Array2<f64>>,
    pub aux_representation: Option<Array2<f64>>,
}

impl UpstreamGrads {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        Self {
            logits: Some(logits),
            ..Self::default()
        }
    }

    /// Accumulate another set of upstream gradients into this one.
    pub fn accumulate(&mut self, other: UpstreamGrads) {
        fn merge(dst: &mut Option<Array2<f64>>, src: Option<Array2<f64>>) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => *d += &s,
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
        merge(&mut self.logits, other.logits);
        merge(&mut self.aux_logits, other.aux_logits);
        merge(&mut self.representation, other.representation);
        merge(&mut self.aux_representation, other.aux_representation);
    }
}

fn check_shape(name: &str, grad: Option<&Array2<f64>>, rows: usize, cols: usize) -> Result<()> {
    if let Some(g) = grad {
        if g.nrows() != rows || g.ncols() != cols {
            return Err(Error::Input(format!(
                "upstream gradient for {name} has shape {:?}, expected [{rows}, {cols}]",
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Zero the positions where the stored post-relu activation is zero.
fn apply_relu_mask(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    grad.zip_mut_with(activation, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Backpropagate `upstream` through the trace, producing a gradient vector in
/// the same layout as `params`. Auxiliary-head gradients re-enter the trunk at
/// the tap layer, so with only auxiliary upstream gradients every trunk layer
/// above the tap (and the main head) receives an exactly-zero gradient.
pub fn backward(
    arch: &ModelArch,
    params: &ParameterVector,
    trace: &ForwardTrace,
    upstream: &UpstreamGrads,
) -> Result<ParameterVector> {
    arch.validate()?;
    check_layout_for_arch(arch, params)?;
    let batch = trace.batch_size();
    if trace.input.ncols() != arch.input_dim
        || trace.trunk_activations.len() != arch.trunk_dims.len()
    {
        return Err(Error::Input("trace does not match architecture".into()));
    }
    check_shape("logits", upstream.logits.as_ref(), batch, arch.num_classes)?;
    check_shape(
        "representation",
        upstream.representation.as_ref(),
        batch,
        arch.representation_dim(),
    )?;
    if arch.aux_head.is_some() {
        if trace.aux_logits.is_none() {
            return Err(Error::Input("trace has no auxiliary outputs".into()));
        }
        check_shape(
            "aux_logits",
            upstream.aux_logits.as_ref(),
            batch,
            arch.num_classes,
        )?;
        check_shape(
            "aux_representation",
            upstream.aux_representation.as_ref(),
            batch,
            arch.aux_representation_dim().expect("aux arch"),
        )?;
    } else if upstream.aux_logits.is_some() || upstream.aux_representation.is_some() {
        return Err(Error::Input(
            "auxiliary upstream gradients supplied but architecture has no aux head".into(),
        ));
    }

    let wiring = Wiring::of(arch);
    let mut grads = ParameterVector::zeros(params.layout().clone());
    let layout = params.layout().clone();

    let write_layer = |grads: &mut ParameterVector, idx: usize, dw: &Array2<f64>, db: &ndarray::Array1<f64>| {
        let w_entry = layout[idx].clone();
        let b_entry = layout[idx + 1].clone();
        grads
            .block_mut(&w_entry)
            .copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
        grads
            .block_mut(&b_entry)
            .copy_from_slice(db.as_slice().expect("contiguous"));
    };

    // Gradient w.r.t. the representation: main-head backprop plus any direct
    // representation-level upstream.
    let rep = trace.representation();
    let mut g: Array2<f64> = match &upstream.logits {
        Some(gl) => {
            let (w_head, _) = layer_views(params, wiring.head);
            let dw = gl.t().dot(rep);
            let db = gl.sum_axis(Axis(0));
            let g = gl.dot(&w_head);
            write_layer(&mut grads, wiring.head, &dw, &db);
            g
        }
        None => Array2::zeros((batch, arch.representation_dim())),
    };
    if let Some(gr) = &upstream.representation {
        g += gr;
    }

    // Auxiliary chain: backprop down to the tap activation.
    let mut aux_tap_grad: Option<Array2<f64>> = None;
    if let Some(aux_head_idx) = wiring.aux_head {
        if upstream.aux_logits.is_some() || upstream.aux_representation.is_some() {
            let aux_spec = arch.aux_head.as_ref().expect("aux arch");
            let aux_rep_dim = arch.aux_representation_dim().expect("aux arch");
            let aux_rep = trace
                .aux_activations
                .last()
                .expect("aux trace activations");
            let mut ga: Array2<f64> = match &upstream.aux_logits {
                Some(gal) => {
                    let (w, _) = layer_views(params, aux_head_idx);
                    let dw = gal.t().dot(aux_rep);
                    let db = gal.sum_axis(Axis(0));
                    let g = gal.dot(&w);
                    write_layer(&mut grads, aux_head_idx, &dw, &db);
                    g
                }
                None => Array2::zeros((batch, aux_rep_dim)),
            };
            if let Some(gar) = &upstream.aux_representation {
                ga += gar;
            }
            for (j, &idx) in wiring.aux.iter().enumerate().rev() {
                apply_relu_mask(&mut ga, &trace.aux_activations[j]);
                let below: &Array2<f64> = if j == 0 {
                    &trace.trunk_activations[aux_spec.tap_index]
                } else {
                    &trace.aux_activations[j - 1]
                };
                let dw = ga.t().dot(below);
                let db = ga.sum_axis(Axis(0));
                write_layer(&mut grads, idx, &dw, &db);
                let (w, _) = layer_views(params, idx);
                ga = ga.dot(&w);
            }
            aux_tap_grad = Some(ga);
        }
    }

    let tap_index = arch.aux_head.as_ref().map(|a| a.tap_index);
    for (i, &idx) in wiring.trunk.iter().enumerate().rev() {
        if Some(i) == tap_index {
            if let Some(atg) = aux_tap_grad.take() {
                g += &atg;
            }
        }
        apply_relu_mask(&mut g, &trace.trunk_activations[i]);
        let below: &Array2<f64> = if i == 0 {
            &trace.input
        } else {
            &trace.trunk_activations[i - 1]
        };
        let dw = g.t().dot(below);
        let db = g.sum_axis(Axis(0));
        write_layer(&mut grads, idx, &dw, &db);
        if i > 0 {
            let (w, _) = layer_views(params, idx);
            g = g.dot(&w);
        }
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, grad_check, Activation, AuxHead};
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

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::derive_rng(seed, 97, 0, 0);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = arch_with_aux();
        let params = arch.init_params(2).unwrap();
        let batch = random_batch(4, 8, 2);
        let trace = forward(&arch, &params, batch.view()).unwrap();
        let grads = backward(&arch, &params, &trace, &UpstreamGrads::default()).unwrap();
        assert!(grads.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aux_only_upstream_leaves_layers_above_tap_untouched() {
        let arch = arch_with_aux();
        let params = arch.init_params(3).unwrap();
        let batch = random_batch(5, 8, 3);
        let trace = forward(&arch, &params, batch.view()).unwrap();

        let mut rng = crate::rng::derive_rng(3, 96, 0, 0);
        let upstream = UpstreamGrads {
            aux_logits: Some(Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0))),
            ..Default::default()
        };
        let grads = backward(&arch, &params, &trace, &upstream).unwrap();

        // Trunk layer 1 (above the tap) and the main head see exactly zero.
        for id in ["trunk1.weight", "trunk1.bias", "head.weight", "head.bias"] {
            let entry = grads.entry(id).unwrap().clone();
            assert!(grads.block(&entry).iter().all(|v| *v == 0.0), "{id} leaked gradient");
        }
        // The aux chain and the tapped layer do receive gradient.
        for id in ["aux0.weight", "aux_head.weight", "trunk0.weight"] {
            let entry = grads.entry(id).unwrap().clone();
            assert!(grads.block(&entry).iter().any(|v| *v != 0.0), "{id} unexpectedly zero");
        }
    }

    #[test]
    fn backward_is_exactly_linear_in_upstream() {
        let arch = arch_with_aux();
        let params = arch.init_params(4).unwrap();
        let batch = random_batch(6, 8, 4);
        let trace = forward(&arch, &params, batch.view()).unwrap();

        let mut rng = crate::rng::derive_rng(4, 95, 0, 0);
        let gl = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let g1 = backward(
            &arch,
            &params,
            &trace,
            &UpstreamGrads::from_logits(gl.clone()),
        )
        .unwrap();
        let g2 = backward(
            &arch,
            &params,
            &trace,
            &UpstreamGrads::from_logits(&gl * 2.0),
        )
        .unwrap();
        // Doubling is exact in binary floating point, so this holds bitwise.
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    /// Finite-difference check of the full pipeline through all four upstream
    /// ports: loss = 0.5(|logits|^2 + |aux_logits|^2 + |rep|^2 + |aux_rep|^2).
    #[test]
    fn quadratic_head_loss_matches_finite_differences() {
        let arch = arch_with_aux();
        let params = arch.init_params(6).unwrap();
        let batch = random_batch(4, 8, 6);

        let f = |p: &ParameterVector| {
            let trace = forward(&arch, p, batch.view())?;
            let sq = |m: &Array2<f64>| 0.5 * m.iter().map(|v| v * v).sum::<f64>();
            let loss = sq(&trace.logits)
                + sq(trace.aux_logits.as_ref().unwrap())
                + sq(trace.representation())
                + sq(trace.aux_representation().unwrap());
            let upstream = UpstreamGrads {
                logits: Some(trace.logits.clone()),
                aux_logits: trace.aux_logits.clone(),
                representation: Some(trace.representation().clone()),
                aux_representation: trace.aux_representation().cloned(),
            };
            let grad = backward(&arch, p, &trace, &upstream)?;
            Ok((loss, grad))
        };

        let max_rel = grad_check(&params, f, 1e-5).unwrap();
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn shape_mismatches_rejected() {
        let arch = arch_with_aux();
        let params = arch.init_params(7).unwrap();
        let batch = random_batch(3, 8, 7);
        let trace = forward(&arch, &params, batch.view()).unwrap();

        let bad = UpstreamGrads {
            logits: Some(Array2::zeros((3, 5))),
            ..Default::default()
        };
        assert!(backward(&arch, &params, &trace, &bad).is_err());

        let no_aux_arch = ModelArch {
            aux_head: None,
            ..arch_with_aux()
        };
        let no_aux_params = no_aux_arch.init_params(7).unwrap();
        let no_aux_trace = forward(&no_aux_arch, &no_aux_params, batch.view()).unwrap();
        let aux_up = UpstreamGrads {
            aux_logits: Some(Array2::zeros((3, 3))),
            ..Default::default()
        };
        assert!(backward(&no_aux_arch, &no_aux_params, &no_aux_trace, &aux_up).is_err());
    }
}
