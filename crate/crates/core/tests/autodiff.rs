mod common;

use std::sync::Arc;

use approx::assert_abs_diff_eq;
use leaklab::autodiff::{self, Graph, ParamVar, Primitive};
use leaklab::model::{self, Batch};
use leaklab::params::{ParamLayout, ParamVector};
use leaklab::tensor::Tensor;
use leaklab::Error;
use proptest::prelude::*;

use common::*;

fn flat(values: Vec<f64>) -> ParamVector {
    let layout = Arc::new(ParamLayout::new([("theta", vec![values.len()])]).unwrap());
    ParamVector::new(layout, values).unwrap()
}

fn batch_of(p: &RandomProblem) -> Batch {
    let m = p.spec.input_dim();
    Batch::new(
        Tensor::matrix(p.y.len(), m, p.x.clone()).unwrap(),
        p.y.clone(),
    )
    .unwrap()
}

#[test]
fn matmul_by_identity() {
    let g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let out = g.apply(Primitive::MatMul, &[a, i]).unwrap();
    assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_definition() {
    let g = Graph::new();
    let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(
        g.apply(Primitive::Relu, &[a]).unwrap().value().data(),
        &[0.0, 0.0, 2.0]
    );
}

#[test]
fn cross_entropy_of_even_logits() {
    let g = Graph::new();
    let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let l = g
        .apply(Primitive::SoftmaxCrossEntropy(vec![0]), &[z])
        .unwrap();
    assert_abs_diff_eq!(l.item(), std::f64::consts::LN_2, epsilon = 1e-15);
}

#[test]
fn shape_mismatch_names_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(a.add(g.constant(Tensor::zeros(vec![3]))).is_err());
}

#[test]
fn grad_of_half_square_norm() {
    let g = autodiff::gradient(&flat(vec![1.0, 2.0]), |_, t| {
        Ok(t.flat().l2_norm_sq().scale(0.5))
    })
    .unwrap();
    assert_eq!(g.values(), &[1.0, 2.0]);
}

#[test]
fn grad_of_constant_is_zero() {
    let g = autodiff::gradient(
        &flat(vec![1.0, -3.0, 4.0]),
        |graph, _| Ok(graph.scalar(7.0)),
    )
    .unwrap();
    assert_eq!(g.values(), &[0.0, 0.0, 0.0]);
}

#[test]
fn grad_rejects_non_scalar_output() {
    let graph = Graph::new();
    let x = graph.var(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(graph.grad(x.relu(), &[x]).is_err());
}

#[test]
fn grad_is_itself_differentiable() {
    // f = sum(x^3) => grad = 3x^2, grad of sum(grad) = 6x
    let graph = Graph::new();
    let x = graph.var(Tensor::vector(vec![1.0, -2.0]).unwrap());
    let f = x.mul(x).unwrap().mul(x).unwrap().sum();
    let g = graph.grad(f, &[x]).unwrap()[0];
    assert_eq!(g.value().data(), &[3.0, 12.0]);
    let gg = graph.grad(g.sum(), &[x]).unwrap()[0];
    assert_eq!(gg.value().data(), &[6.0, -12.0]);
}

#[test]
fn hvp_identity_hessian() {
    let v = vec![0.3, -1.5, 2.0];
    let hv = autodiff::hvp(&flat(vec![1.0, 2.0, 3.0]), &v, |_, t| {
        Ok(t.flat().l2_norm_sq().scale(0.5))
    })
    .unwrap();
    assert_eq!(hv, v);
}

#[test]
fn hvp_of_bilinear_product() {
    let hv = autodiff::hvp(&flat(vec![2.0, 5.0]), &[1.0, 0.0], |_, t| {
        let a = t.flat().slice(0, 1)?;
        let b = t.flat().slice(1, 1)?;
        Ok(a.mul(b)?.sum())
    })
    .unwrap();
    assert_eq!(hv, vec![0.0, 1.0]);
}

#[test]
fn hvp_rejects_bad_direction() {
    let err = autodiff::hvp(&flat(vec![1.0, 2.0]), &[1.0], |_, t| Ok(t.flat().sum())).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn detached_leaf_gets_zero_gradient() {
    let graph = Graph::new();
    let x = graph.var(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let unused = graph.var(Tensor::vector(vec![5.0]).unwrap());
    let f = x.l2_norm_sq();
    let g = graph.grad(f, &[x, unused]).unwrap();
    assert_eq!(g[1].value().data(), &[0.0]);
}

#[test]
fn mlp_grad_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..40 {
        let p = random_problem(seed);
        let n = p.y.len();
        if min_relu_margin(&p.spec, p.params.values(), &p.x, n) < 1e-3 {
            continue;
        }
        let batch = batch_of(&p);
        let g =
            autodiff::gradient(&p.params, |_, t| model::batch_loss(&p.spec, t, &batch)).unwrap();
        let fd = central_grad(
            |th| mlp_loss(&p.spec, th, &p.x, &p.y),
            p.params.values(),
            1e-5,
        );
        let err = max_rel_err(g.values(), &fd, 1e-8);
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn mlp_hvp_matches_gradient_differences() {
    for seed in 100..120 {
        let p = random_problem(seed);
        let n = p.y.len();
        if min_relu_margin(&p.spec, p.params.values(), &p.x, n) < 1e-2 {
            continue;
        }
        let batch = batch_of(&p);
        let v: Vec<f64> = (0..p.params.len())
            .map(|i| ((i * 7919) % 13) as f64 / 6.5 - 1.0)
            .collect();
        let hv =
            autodiff::hvp(&p.params, &v, |_, t| model::batch_loss(&p.spec, t, &batch)).unwrap();
        let h = 1e-4;
        let shifted = |sign: f64| {
            let vals = p
                .params
                .values()
                .iter()
                .zip(&v)
                .map(|(a, b)| a + sign * h * b)
                .collect();
            let q = p.params.with_values(vals).unwrap();
            autodiff::gradient(&q, |_, t| model::batch_loss(&p.spec, t, &batch))
                .unwrap()
                .into_values()
        };
        let (gp, gm) = (shifted(1.0), shifted(-1.0));
        let fd: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let err = max_rel_err(&hv, &fd, 1e-8);
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn gradient_is_linear_in_the_objective() {
    let p = random_problem(7);
    let batch = batch_of(&p);
    let (a, b) = (0.7, -1.3);
    let gf = autodiff::gradient(&p.params, |_, t| model::batch_loss(&p.spec, t, &batch)).unwrap();
    let gg = autodiff::gradient(&p.params, |_, t| Ok(t.flat().l2_norm_sq())).unwrap();
    let gsum = autodiff::gradient(&p.params, |_, t| {
        let f = model::batch_loss(&p.spec, t, &batch)?.scale(a);
        f.add(t.flat().l2_norm_sq().scale(b))
    })
    .unwrap();
    let combo: Vec<f64> = gf
        .values()
        .iter()
        .zip(gg.values())
        .map(|(x, y)| a * x + b * y)
        .collect();
    assert!(max_abs_diff(gsum.values(), &combo) < 1e-12);
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let p = random_problem(11);
    let batch = batch_of(&p);
    let run =
        || autodiff::gradient(&p.params, |_, t| model::batch_loss(&p.spec, t, &batch)).unwrap();
    assert_eq!(run().values(), run().values());
}

#[test]
fn replay_reproduces_forward_values() {
    let p = random_problem(5);
    let batch = batch_of(&p);
    let graph = Graph::new();
    let t = ParamVar::bind(&graph, &p.params);
    let l = model::batch_loss(&p.spec, &t, &batch).unwrap();
    let _ = graph.grad(l, &[t.flat()]).unwrap();
    let replayed = graph.replay();
    assert_eq!(replayed.len(), graph.len());
    assert_eq!(replayed[l.id()], l.value());
    // Compare against a second identical recording.
    let graph2 = Graph::new();
    let t2 = ParamVar::bind(&graph2, &p.params);
    let l2 = model::batch_loss(&p.spec, &t2, &batch).unwrap();
    let _ = graph2.grad(l2, &[t2.flat()]).unwrap();
    assert_eq!(replayed, graph2.replay());
    assert_eq!(replayed[l.id()].item().to_bits(), l2.item().to_bits());
}

#[test]
fn per_sample_mean_matches_batch_gradient() {
    for seed in 0..10 {
        let mut p = random_problem(300 + seed);
        // force B = 4
        let m = p.spec.input_dim();
        p.x = (0..4 * m)
            .map(|i| ((i * 37 + seed as usize) % 17) as f64 / 17.0)
            .collect();
        p.y = (0..4).map(|i| i % p.spec.num_classes()).collect();
        let batch = batch_of(&p);
        let per = autodiff::per_sample_grads(&p.params, &batch, |_, t, b| {
            model::batch_loss(&p.spec, t, b)
        })
        .unwrap();
        assert_eq!(per.len(), 4);
        let whole =
            autodiff::gradient(&p.params, |_, t| model::batch_loss(&p.spec, t, &batch)).unwrap();
        let mean: Vec<f64> = (0..p.params.len())
            .map(|j| per.iter().map(|g| g.values()[j]).sum::<f64>() / 4.0)
            .collect();
        assert!(max_abs_diff(&mean, whole.values()) < 1e-9);
    }
}

#[test]
fn per_sample_singleton_and_duplicates() {
    let p = random_problem(21);
    let m = p.spec.input_dim();
    let one = Batch::new(
        Tensor::matrix(1, m, p.x[..m].to_vec()).unwrap(),
        vec![p.y[0]],
    )
    .unwrap();
    let per =
        autodiff::per_sample_grads(&p.params, &one, |_, t, b| model::batch_loss(&p.spec, t, b))
            .unwrap();
    let whole = autodiff::gradient(&p.params, |_, t| model::batch_loss(&p.spec, t, &one)).unwrap();
    assert_eq!(per.len(), 1);
    assert_eq!(per[0].values(), whole.values());

    let mut twice = p.x[..m].to_vec();
    twice.extend_from_slice(&p.x[..m]);
    let dup = Batch::new(Tensor::matrix(2, m, twice).unwrap(), vec![p.y[0]; 2]).unwrap();
    let per =
        autodiff::per_sample_grads(&p.params, &dup, |_, t, b| model::batch_loss(&p.spec, t, b))
            .unwrap();
    assert_eq!(per[0].values(), per[1].values());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Each primitive, wrapped as sum(w * op(x)), matches central differences.
    #[test]
    fn primitives_match_finite_differences(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        ws in prop::collection::vec(-1.0f64..1.0, 6),
        which in 0usize..9,
    ) {
        // keep relu/abs away from their kinks
        prop_assume!(xs.iter().all(|v| v.abs() > 1e-3));
        let eval = |g: &Graph, x: leaklab::autodiff::Var<'_>| -> leaklab::Result<f64> {
            let w = g.constant(Tensor::matrix(2, 3, ws.clone()).unwrap());
            let k = g.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap());
            let out = match which {
                0 => x.matmul(k)?.matmul(w)?.sum(),
                1 => x.add(w)?.mul(x)?.sum(),
                2 => x.sub(w)?.l2_norm_sq(),
                3 => x.scale(-2.5).mul(w)?.sum(),
                4 => x.relu().mul(w)?.sum(),
                5 => x.tanh().mul(w)?.sum(),
                6 => x.mean().scale(3.0).add(x.mul(w)?.sum())?,
                7 => x.softmax_cross_entropy(&[2, 0])?,
                _ => x.abs().add(w)?.mul(w)?.sum(),
            };
            Ok(out.item())
        };
        let graph = Graph::new();
        let x = graph.var(Tensor::matrix(2, 3, xs.clone()).unwrap());
        let w = graph.constant(Tensor::matrix(2, 3, ws.clone()).unwrap());
        let k = graph.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap());
        let out = match which {
            0 => x.matmul(k).unwrap().matmul(w).unwrap().sum(),
            1 => x.add(w).unwrap().mul(x).unwrap().sum(),
            2 => x.sub(w).unwrap().l2_norm_sq(),
            3 => x.scale(-2.5).mul(w).unwrap().sum(),
            4 => x.relu().mul(w).unwrap().sum(),
            5 => x.tanh().mul(w).unwrap().sum(),
            6 => x.mean().scale(3.0).add(x.mul(w).unwrap().sum()).unwrap(),
            7 => x.softmax_cross_entropy(&[2, 0]).unwrap(),
            _ => x.abs().add(w).unwrap().mul(w).unwrap().sum(),
        };
        let g = graph.grad(out, &[x]).unwrap()[0].value().into_data();
        let fd = central_grad(|v| {
            let gr = Graph::new();
            let xv = gr.var(Tensor::matrix(2, 3, v.to_vec()).unwrap());
            eval(&gr, xv).unwrap()
        }, &xs, 1e-6);
        prop_assert!(max_rel_err(&g, &fd, 1e-6) < 1e-6, "op {which}: {g:?} vs {fd:?}");
    }
}

#[test]
fn gather_from_matrix_routes_gradient_back_in_shape() {
    let graph = Graph::new();
    let x = graph.var(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = x.gather(&[0, 4, 4]).unwrap().sum();
    let g = graph.grad(y, &[x]).unwrap()[0].value();
    assert_eq!(g.shape(), &[2, 3]);
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
}
