//! Gradient and Hessian-vector product of an MLP loss, checked against
//! central differences.

use leaklab::autodiff;
use leaklab::model::{self, Activation, Batch, InitScheme, ModelSpec};
use leaklab::params::ParamVector;

fn main() -> leaklab::Result<()> {
    let spec = ModelSpec::mlp(&[3, 5, 2], Activation::Tanh);
    let theta = model::init(&spec, InitScheme::Xavier, 1)?;
    let batch = Batch::from_rows(&[vec![0.2, 0.9, 0.4], vec![0.7, 0.1, 0.3]], vec![0, 1])?;
    let loss = |g: &ParamVector| {
        autodiff::value_and_gradient(g, |_, t| model::batch_loss(&spec, t, &batch))
    };

    let (value, grad) = loss(&theta)?;
    println!("loss {value:.6}, |grad| {:.6}", grad.norm());

    let v: Vec<f64> = (0..theta.len())
        .map(|i| ((i % 7) as f64 - 3.0) / 10.0)
        .collect();
    let hv = autodiff::hvp(&theta, &v, |_, t| model::batch_loss(&spec, t, &batch))?;

    // Hv ~ (grad(theta + h v) - grad(theta - h v)) / 2h
    let h = 1e-5;
    let shifted = |s: f64| {
        let vals: Vec<f64> = theta
            .values()
            .iter()
            .zip(&v)
            .map(|(p, d)| p + s * h * d)
            .collect();
        loss(&theta.with_values(vals).unwrap()).map(|(_, g)| g)
    };
    let (up, down) = (shifted(1.0)?, shifted(-1.0)?);
    let worst = hv
        .iter()
        .zip(up.values().iter().zip(down.values()))
        .map(|(a, (u, d))| (a - (u - d) / (2.0 * h)).abs())
        .fold(0.0, f64::max);
    println!(
        "{} parameters, max |Hv - finite difference| = {worst:.2e}",
        theta.len()
    );
    Ok(())
}
