//! Reverse-mode differentiation over dense tensors, differentiable to any
//! order.
//!
//! The typical flow binds a [`ParamVector`] as a single flat leaf, builds a
//! scalar objective from it, and asks for its gradient:
//!
//! ```
//! use std::sync::Arc;
//! use leaklab::autodiff::{self, Graph};
//! use leaklab::params::{ParamLayout, ParamVector};
//!
//! let layout = Arc::new(ParamLayout::new([("theta", vec![2])]).unwrap());
//! let theta = ParamVector::new(layout, vec![1.0, 2.0]).unwrap();
//! let g = autodiff::gradient(&theta, |_, t| Ok(t.flat().l2_norm_sq().scale(0.5))).unwrap();
//! assert_eq!(g.values(), &[1.0, 2.0]);
//! ```

mod graph;

pub(crate) use graph::softmax_row;
pub use graph::{Graph, Primitive, Var};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

/// A [`ParamVector`] bound to a graph as one flat leaf.
#[derive(Clone, Copy)]
pub struct ParamVar<'g, 'l> {
    flat: Var<'g>,
    layout: &'l ParamLayout,
}

impl<'g, 'l> ParamVar<'g, 'l> {
    /// Binds `params` as a differentiable leaf.
    pub fn bind(graph: &'g Graph, params: &'l ParamVector) -> Self {
        let flat = graph.var(Tensor::from_parts(
            vec![params.len()],
            params.values().to_vec(),
        ));
        Self {
            flat,
            layout: params.layout(),
        }
    }

    /// Binds `params` as a constant (no gradient flows into it).
    pub fn bind_constant(graph: &'g Graph, params: &'l ParamVector) -> Self {
        let flat = graph.constant(Tensor::from_parts(
            vec![params.len()],
            params.values().to_vec(),
        ));
        Self {
            flat,
            layout: params.layout(),
        }
    }

    /// Wraps an existing flat var (for example, an updated parameter state).
    pub fn from_var(flat: Var<'g>, layout: &'l ParamLayout) -> Result<Self> {
        if flat.shape() != [layout.total()] {
            return Err(Error::shape(
                "param_var",
                &[&flat.shape(), &[layout.total()]],
            ));
        }
        Ok(Self { flat, layout })
    }

    pub fn flat(&self) -> Var<'g> {
        self.flat
    }

    pub fn layout(&self) -> &'l ParamLayout {
        self.layout
    }

    /// The named segment, reshaped to its declared shape.
    pub fn segment(&self, name: &str) -> Result<Var<'g>> {
        let seg = self.layout.require(name)?;
        self.flat.slice(seg.offset, seg.len())?.reshape(&seg.shape)
    }
}

/// Reads a recorded flat gradient back into a [`ParamVector`].
pub fn to_param_vector(var: Var<'_>, layout: &Arc<ParamLayout>) -> Result<ParamVector> {
    ParamVector::new(layout.clone(), var.value().into_data())
}

/// Gradient of the scalar returned by `f` with respect to `params`.
pub fn gradient<F>(params: &ParamVector, f: F) -> Result<ParamVector>
where
    F: for<'g, 'l> Fn(&'g Graph, &ParamVar<'g, 'l>) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let theta = ParamVar::bind(&graph, params);
    let out = f(&graph, &theta)?;
    let g = graph.grad(out, &[theta.flat()])?;
    to_param_vector(g[0], params.layout())
}

/// Value and gradient of `f` at `params`.
pub fn value_and_gradient<F>(params: &ParamVector, f: F) -> Result<(f64, ParamVector)>
where
    F: for<'g, 'l> Fn(&'g Graph, &ParamVar<'g, 'l>) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let theta = ParamVar::bind(&graph, params);
    let out = f(&graph, &theta)?;
    let g = graph.grad(out, &[theta.flat()])?;
    Ok((out.item(), to_param_vector(g[0], params.layout())?))
}

/// Hessian-vector product `(d^2 f / d theta^2) v`, obtained by differentiating
/// `<grad f, v>` a second time.
pub fn hvp<F>(params: &ParamVector, direction: &[f64], f: F) -> Result<Vec<f64>>
where
    F: for<'g, 'l> Fn(&'g Graph, &ParamVar<'g, 'l>) -> Result<Var<'g>>,
{
    if direction.len() != params.len() {
        return Err(Error::Shape {
            op: "hvp",
            shapes: format!("direction {} vs params {}", direction.len(), params.len()),
        });
    }
    let graph = Graph::new();
    let theta = ParamVar::bind(&graph, params);
    let out = f(&graph, &theta)?;
    let g = graph.grad(out, &[theta.flat()])?[0];
    let v = graph.constant(Tensor::from_parts(
        vec![direction.len()],
        direction.to_vec(),
    ));
    let gv = g.dot(v)?;
    let hv = graph.grad(gv, &[theta.flat()])?[0];
    Ok(hv.value().into_data())
}

/// One gradient per sample, each from its own backward pass.
///
/// `loss_fn` receives a single-sample batch; the mean of the returned
/// gradients equals the gradient of the batch-mean loss.
pub fn per_sample_grads<F>(
    params: &ParamVector,
    batch: &Batch,
    loss_fn: F,
) -> Result<Vec<ParamVector>>
where
    F: for<'g, 'l> Fn(&'g Graph, &ParamVar<'g, 'l>, &Batch) -> Result<Var<'g>>,
{
    if batch.is_empty() {
        return Err(Error::invalid("per-sample gradients of an empty batch"));
    }
    (0..batch.len())
        .map(|i| {
            let sample = batch.sample(i)?;
            gradient(params, |g, t| loss_fn(g, t, &sample))
        })
        .collect()
}
