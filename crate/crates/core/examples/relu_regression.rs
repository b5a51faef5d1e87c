//! Fits two-layer ReLU networks of growing width to a Lipschitz function
//! with both trainers and reports held-out error.
//!
//! cargo run --release --example relu_regression

use nnfvi::neural::{fit, split_neurons, RegressionSet, TrainConfig, TrainMethod};
use nnfvi::rng::substream;
use rand::Rng;

fn target(x: &[f64]) -> f64 {
    (x[0] - 0.3).abs() + 0.5 * (2.0 * x[1]).sin() - (x[0] + x[1] - 1.0).max(0.0)
}

fn main() -> nnfvi::Result<()> {
    let mut rng = substream(1, &[]);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    };
    let (train_x, test_x) = (draw(500), draw(500));
    let train = RegressionSet::new(train_x.clone(), train_x.iter().map(|x| target(x)).collect())?;

    for method in [TrainMethod::GradientDescent, TrainMethod::LevenbergMarquardt] {
        let max_epochs = if method == TrainMethod::GradientDescent { 4000 } else { 500 };
        let config = TrainConfig { method, restarts: 3, max_epochs, ..TrainConfig::default() };
        println!("{method:?}, {max_epochs} iterations, best of 3 restarts");
        for neurons in [2, 8, 32] {
            let out = fit(&train, neurons, &config, &mut substream(2, &[neurons as u64]))?;
            let test_mse =
                test_x.iter().map(|x| (out.net.eval(x) - target(x)).powi(2)).sum::<f64>() / test_x.len() as f64;
            let (positive, negative) = split_neurons(&out.net);
            println!(
                "  J = {neurons:>2}: train loss {:.2e}, test MSE {test_mse:.2e} ({} positive / {} non-positive output weights)",
                out.loss,
                positive.len(),
                negative.len()
            );
        }
    }
    Ok(())
}
