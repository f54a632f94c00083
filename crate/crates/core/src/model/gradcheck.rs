use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_params, loss_and_grad, Batch, GraphInput, Mode, ModelConfig, ModelError, Params};
use crate::autodiff::{finite_diff_check, GradCheckReport, Objective, Tensor, TensorError};
use crate::datasets::random_dag;
use crate::seed::{splitmix64, substream, DATA, DROPOUT, INIT};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Parameter holding the worst coordinate.
    pub param: String,
    pub offset: usize,
}

/// Squared error of the model on one random `nodes`-node graph, as a
/// function of the flat parameter vector. Every evaluation draws a fresh
/// dropout seed, so enabled dropout makes the function nondeterministic.
struct ModelObjective<'a> {
    params: Params,
    graph: &'a GraphInput,
    target: f64,
    dropout_seed: u64,
    calls: u64,
}

impl ModelObjective<'_> {
    fn eval(&mut self, theta: &[f64]) -> Result<(f64, Vec<Tensor>), TensorError> {
        let to_tensor = |e: ModelError| match e {
            ModelError::Tensor(t) => t,
            e => TensorError::InvalidArgument(e.to_string()),
        };
        self.params.set_flat(theta).map_err(to_tensor)?;
        let batch = Batch::single(self.graph).map_err(to_tensor)?;
        self.calls += 1;
        let mode = Mode::train(splitmix64(self.dropout_seed ^ self.calls));
        let mut grads: Vec<Tensor> = self.params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let loss = loss_and_grad(&batch, &[self.target], &self.params, mode, &mut grads).map_err(to_tensor)?;
        Ok((loss, grads))
    }
}

impl Objective for ModelObjective<'_> {
    fn value(&mut self, theta: &[f64]) -> Result<f64, TensorError> {
        Ok(self.eval(theta)?.0)
    }

    fn value_and_grad(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>), TensorError> {
        let (loss, grads) = self.eval(theta)?;
        Ok((loss, grads.iter().flat_map(|g| g.data().iter().copied()).collect()))
    }
}

/// Central-difference check of every parameter of a freshly initialized
/// model on a random graph.
pub fn check_gradients(cfg: &ModelConfig, nodes: usize, seed: u64, h: f64, tol: f64) -> Result<ModelGradCheck, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, DATA));
    let dag = random_dag(&mut rng, nodes, 0.4, cfg.encoding.op_onehot_dim.min(8) as u32);
    let graph = GraphInput::new(&dag, cfg)?;
    let params = init_params(cfg, substream(seed, INIT))?;
    let theta = params.flatten();
    let mut obj =
        ModelObjective { params, graph: &graph, target: 1.0, dropout_seed: substream(seed, DROPOUT), calls: 0 };
    let report = finite_diff_check(&mut obj, &theta, h, tol)?;
    let (param, offset) = obj
        .params
        .name_of_scalar(report.worst_index)
        .map(|(n, o)| (n.to_string(), o))
        .unwrap_or_default();
    Ok(ModelGradCheck { report, param, offset })
}
