//! Checks the analytic gradient of the joint loss against central
//! differences on a small random problem.
//!
//! The attention weights are constants in the backward pass, so the
//! numeric side has to hold them fixed too: `forward` accepts the weights
//! computed at the unperturbed point and reuses them.

use ide::config::ExperimentConfig;
use ide::data::build_benchmark;
use ide::model::Model;
use ide::train::{batch_at, forward, loss_and_gradients};

fn main() -> ide::Result<()> {
    let mut config = ExperimentConfig::default();
    config.benchmark.train_identities = 6;
    config.benchmark.test_identities = 3;
    config.benchmark.cross_scene = None;
    config.model.hidden_dims = vec![6];
    config.model.embed_dim = 4;
    let bench = build_benchmark(&config.benchmark, 1)?;
    let model = Model::new(config.embedder())?;
    let params = model.init_params(2)?;
    let train = config.train_config();
    let batch = batch_at(&bench.train.training_view(), &train, 0)?;

    let (fwd, grads) = loss_and_gradients(&model, &params, &batch, &train, None)?;
    println!(
        "loss {:.6} (wcel {:.6}, cl {:.6})",
        fwd.losses.total, fwd.losses.wcel, fwd.losses.cl
    );

    let h = 1e-5;
    let total = |p: &ide::ParamStore| -> ide::Result<f64> {
        Ok(forward(&model, p, &batch, &train, Some(&fwd.weights))?
            .losses
            .total)
    };
    for name in params.names() {
        let analytic = &grads[name];
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= h;
            let numeric = (total(&plus)? - total(&minus)?) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!(
            "{name:<16} {:>5} entries  max rel err {worst:.2e}",
            analytic.len()
        );
    }
    Ok(())
}
