//! From-scratch GCN engine: parameters and masks, forward and backward
//! passes, Adam, and evaluation metrics.

mod adam;
mod auc;
pub mod gradcheck;
mod model;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use auc::roc_auc;
pub use model::{
    accuracy_from_logits, apply_mask_threshold, argmax, edge_scores, forward, forward_input,
    forward_layers, loss_and_grads, loss_only, mean_rows, predict_accuracy, sigmoid, Gradients,
    LossBreakdown, PropagatedInput, Regularization, Targets,
};
pub use params::{MaskParams, ModelDims, ModelParams, TensorSet, CLASSIFIER_START, TENSOR_NAMES};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_instance, CheckTask, GradcheckReport, Instance};
    use super::*;
    use crate::graph::{generate_er, normalized_adjacency, Graph};
    use ndarray::{Array1, Array2};

    const DIMS: ModelDims = ModelDims {
        input: 3,
        hidden: 5,
        classes: 3,
    };

    fn path_graph() -> Graph {
        let x = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.3 - 1.0);
        Graph::new(3, [(0, 1), (1, 2)], x, vec![0, 2, 1], 3).unwrap()
    }

    /// Straight-line dense reimplementation of the forward pass.
    fn dense_forward(
        p: &ModelParams,
        a: &Array2<f64>,
        x: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = a.nrows();
        let mut z1 = Array2::<f64>::zeros((n, p.w1.ncols()));
        for i in 0..n {
            for k in 0..p.w1.ncols() {
                let mut acc = p.b1[k];
                for j in 0..n {
                    for f in 0..x.ncols() {
                        acc += a[[i, j]] * x[[j, f]] * p.w1[[f, k]];
                    }
                }
                z1[[i, k]] = acc.max(0.0);
            }
        }
        let h = p.w2.ncols();
        let mut z2 = Array2::<f64>::zeros((n, h));
        for i in 0..n {
            for k in 0..h {
                let mut acc = p.b2[k];
                for j in 0..n {
                    for f in 0..h {
                        acc += a[[i, j]] * z1[[j, f]] * p.w2[[f, k]];
                    }
                }
                z2[[i, k]] = acc.max(0.0);
            }
        }
        let c = p.wc.ncols();
        let mut logits = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for k in 0..c {
                logits[[i, k]] = p.bc[k] + (0..h).map(|f| z2[[i, f]] * p.wc[[f, k]]).sum::<f64>();
            }
        }
        (z2, logits)
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let g = path_graph();
        let adj = normalized_adjacency(&g);
        for seed in 0..5 {
            let mut p = ModelParams::glorot(DIMS, seed);
            p.b1 = Array1::from_elem(5, 0.1);
            p.b2 = Array1::from_elem(5, -0.05);
            p.bc = Array1::from_vec(vec![0.2, -0.1, 0.0]);
            let (h, logits) = forward(&p, None, &adj, g.features()).unwrap();
            let (h_ref, logits_ref) = dense_forward(&p, &adj.to_dense(), g.features());
            for (a, b) in h
                .iter()
                .zip(h_ref.iter())
                .chain(logits.iter().zip(logits_ref.iter()))
            {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_and_zero_mask_give_zero_logits() {
        let dims = ModelDims {
            input: 4,
            hidden: 3,
            classes: 2,
        };
        let single = Graph::new(1, [], Array2::zeros((1, 4)), vec![0], 2).unwrap();
        let input = PropagatedInput::from_graph(&single).unwrap();
        let p = ModelParams::glorot(dims, 1);
        let (_, logits) = forward_input(&p, None, &input).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));

        let g = generate_er(6, 0.5, 4, 2).unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let zeros = MaskParams::from_values(ModelParams::zeros(dims), true);
        let (_, logits) = forward_input(&p, Some(&zeros), &input).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn all_ones_mask_is_bit_identical() {
        let g = generate_er(8, 0.4, 3, 3).unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let mut p = ModelParams::glorot(DIMS, 3);
        p.b2.fill(0.3);
        let plain = forward_input(&p, None, &input).unwrap();
        let masked = forward_input(&p, Some(&MaskParams::ones(DIMS, true)), &input).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_values() {
        let g = generate_er(4, 0.5, 2, 0).unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let p = ModelParams::glorot(DIMS, 0);
        assert!(matches!(
            forward_input(&p, None, &input),
            Err(crate::Error::Param(_))
        ));
        let dims2 = ModelDims { input: 2, ..DIMS };
        let mut p = ModelParams::glorot(dims2, 0);
        let wrong_mask = MaskParams::ones(DIMS, true);
        assert!(forward_input(&p, Some(&wrong_mask), &input).is_err());
        p.w2[[0, 0]] = f64::NAN;
        assert!(matches!(
            forward_input(&p, None, &input),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn loss_terms_at_identity_mask() {
        let g = path_graph();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let p = ModelParams::glorot(DIMS, 2);
        let masks = MaskParams::ones(DIMS, true);
        let targets = Targets::Nodes {
            labels: g.labels(),
            train_ids: &[0, 2],
        };
        let reg = Regularization {
            l1: 0.001,
            prox: 0.001,
        };
        let (loss, _) = loss_and_grads(&p, Some(&masks), Some(&p), &input, &targets, reg).unwrap();
        assert_eq!(loss.l1_term, DIMS.num_params() as f64);
        assert_eq!(loss.prox_term, 0.0);
        let expected = loss.task_loss + 0.001 * loss.l1_term + 0.001 * loss.prox_term;
        assert!((loss.total - expected).abs() < 1e-12);

        let empty = Targets::Nodes {
            labels: g.labels(),
            train_ids: &[],
        };
        assert!(matches!(
            loss_and_grads(&p, None, None, &input, &empty, reg),
            Err(crate::Error::Param(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let g = path_graph();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let p = ModelParams::glorot(DIMS, 9);
        let (_, logits) = forward_input(&p, None, &input).unwrap();
        let ids = [0usize, 1, 2];
        let direct: f64 = ids
            .iter()
            .map(|&i| {
                let row = logits.row(i);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                -(row[g.labels()[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / 3.0;
        let targets = Targets::Nodes {
            labels: g.labels(),
            train_ids: &ids,
        };
        let loss = loss_only(&p, None, None, &input, &targets, Regularization::default()).unwrap();
        assert!((loss.task_loss - direct).abs() < 1e-12);
        assert_eq!(loss.total, loss.task_loss);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let reg = Regularization {
            l1: 0.001,
            prox: 0.001,
        };
        let mut report = GradcheckReport::default();
        for seed in 0..6 {
            let inst = Instance::random(seed, 10, 8).unwrap();
            check_instance(&inst, CheckTask::Nodes, reg, &mut report).unwrap();
            check_instance(&inst, CheckTask::Links, reg, &mut report).unwrap();
        }
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn mask_gradient_is_chain_rule_of_effective_gradient() {
        let inst = Instance::random(42, 8, 6).unwrap();
        let targets = inst.targets(CheckTask::Nodes);
        let reg = Regularization {
            l1: 0.0,
            prox: 0.01,
        };
        let (_, g) = loss_and_grads(
            &inst.params,
            Some(&inst.masks),
            Some(&inst.anchor),
            &inst.input,
            &targets,
            reg,
        )
        .unwrap();
        let gm = g.masks.unwrap();
        // Gradient w.r.t. the effective weight, recovered from the param gradient.
        let geff = g.params.zip_map(inst.masks.values(), |gp, m| gp / m);
        let expected = geff.hadamard(&inst.params);
        for (a, b) in gm.flatten().iter().zip(expected.flatten()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero() {
        let inst = Instance::random(5, 6, 4).unwrap();
        let mut masks = inst.masks.clone();
        masks.values_mut().bc[0] = 0.0;
        let targets = inst.targets(CheckTask::Links);
        let reg = Regularization { l1: 0.5, prox: 0.0 };
        let (_, g) =
            loss_and_grads(&inst.params, Some(&masks), None, &inst.input, &targets, reg).unwrap();
        // Link task never touches the classifier, so only the L1 term remains.
        assert_eq!(g.masks.as_ref().unwrap().bc[0], 0.0);
        let sign1 = masks.values().bc[1].signum() * 0.5;
        assert_eq!(g.masks.unwrap().bc[1], sign1);
    }

    #[test]
    fn unmasked_classifier_gets_no_mask_gradient() {
        let inst = Instance::random(8, 6, 4).unwrap();
        let masks = MaskParams::from_values(inst.masks.values().clone(), false);
        let targets = inst.targets(CheckTask::Nodes);
        let reg = Regularization { l1: 0.1, prox: 0.1 };
        let (loss, g) =
            loss_and_grads(&inst.params, Some(&masks), None, &inst.input, &targets, reg).unwrap();
        let gm = g.masks.unwrap();
        assert!(gm.wc.iter().chain(gm.bc.iter()).all(|&x| x == 0.0));
        assert_eq!(loss.l1_term, masks.l1());
    }

    #[test]
    fn threshold_cases() {
        let p = ModelParams::glorot(DIMS, 0);
        let ones = MaskParams::ones(DIMS, true);
        let (eff, sparsity) = apply_mask_threshold(&p, &ones, 0.5).unwrap();
        assert_eq!(sparsity, 0.0);
        assert_eq!(eff, p);
        let zeros = MaskParams::from_values(ModelParams::zeros(DIMS), true);
        let (eff, sparsity) = apply_mask_threshold(&p, &zeros, 0.5).unwrap();
        assert_eq!(sparsity, 1.0);
        assert_eq!(eff.nonzero_count(), 0);
        assert!(apply_mask_threshold(&p, &ones, -1.0).is_err());
    }

    #[test]
    fn zero_threshold_is_plain_masking() {
        let inst = Instance::random(11, 6, 5).unwrap();
        let mut masks = inst.masks.clone();
        masks.values_mut().w2[[0, 1]] = 0.0;
        masks.values_mut().b1[0] = 0.0;
        let (eff, sparsity) = apply_mask_threshold(&inst.params, &masks, 0.0).unwrap();
        assert_eq!(eff, masks.apply(&inst.params));
        let zero_frac = masks
            .values()
            .flatten()
            .iter()
            .filter(|&&m| m == 0.0)
            .count() as f64
            / inst.params.num_params() as f64;
        assert_eq!(sparsity, zero_frac);
    }

    #[test]
    fn accuracy_cases() {
        let g = generate_er(10, 0.3, 3, 4).unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let constant = ModelParams::zeros(DIMS);
        let labels = vec![0; 10];
        let ids: Vec<usize> = (0..10).collect();
        assert_eq!(
            predict_accuracy(&constant, None, &input, &labels, &ids).unwrap(),
            1.0
        );
        assert!(predict_accuracy(&constant, None, &input, &labels, &[]).is_err());

        let p = ModelParams::glorot(DIMS, 6);
        let (_, logits) = forward_input(&p, None, &input).unwrap();
        let predicted: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
        assert_eq!(
            predict_accuracy(&p, None, &input, &predicted, &ids).unwrap(),
            1.0
        );
    }

    #[test]
    fn accuracy_matches_per_node_oracle() {
        let g = generate_er(20, 0.2, 3, 7).unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let p = ModelParams::glorot(DIMS, 7);
        let labels: Vec<usize> = (0..20).map(|i| (i * 7) % 3).collect();
        let ids: Vec<usize> = (0..20).step_by(2).collect();
        let (_, logits) = forward_input(&p, None, &input).unwrap();
        let mut hits = 0;
        for &i in &ids {
            let row = logits.row(i);
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            hits += usize::from(best == labels[i]);
        }
        let acc = predict_accuracy(&p, None, &input, &labels, &ids).unwrap();
        assert_eq!(acc, hits as f64 / ids.len() as f64);
    }

    #[test]
    fn training_reduces_loss() {
        let g = generate_er(10, 0.4, 3, 1).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let g = Graph::new(
            10,
            g.edges().iter().copied(),
            g.features().clone(),
            labels,
            3,
        )
        .unwrap();
        let input = PropagatedInput::from_graph(&g).unwrap();
        let mut p = ModelParams::glorot(DIMS, 1);
        let mut masks = MaskParams::ones(DIMS, true);
        let anchor = p.clone();
        let mut opt_p = AdamState::for_params(&p);
        let mut opt_m = AdamState::for_params(masks.values());
        let ids: Vec<usize> = (0..10).collect();
        let targets = Targets::Nodes {
            labels: g.labels(),
            train_ids: &ids,
        };
        let reg = Regularization {
            l1: 0.001,
            prox: 0.001,
        };
        let start = loss_only(&p, Some(&masks), Some(&anchor), &input, &targets, reg).unwrap();
        for _ in 0..200 {
            let (_, grads) =
                loss_and_grads(&p, Some(&masks), Some(&anchor), &input, &targets, reg).unwrap();
            opt_p.step(&mut p, &grads.params, 0.01).unwrap();
            opt_m
                .step(masks.values_mut(), grads.masks.as_ref().unwrap(), 0.01)
                .unwrap();
        }
        let end = loss_only(&p, Some(&masks), Some(&anchor), &input, &targets, reg).unwrap();
        assert!(
            end.task_loss < 0.5 * start.task_loss,
            "{start:?} -> {end:?}"
        );
    }
}
