//! A sequential stack of layers with owned parameters.

use super::layers::{self, LayerSpec, LayerTrace};
use super::tensor::Tensor;
use super::NetError;
use rand::Rng;

/// Layer stack plus parameters; the shape chain is validated at
/// construction so forward passes only need to check the input.
#[derive(Debug, Clone)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Everything the backward pass needs from one traced forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    traces: Vec<LayerTrace>,
}

/// Gradients with the same nesting as [`Sequential`] parameters.
#[derive(Debug, Clone)]
pub struct GradientSet(pub Vec<Vec<Tensor>>);

impl GradientSet {
    pub fn zeros_like(params: &[Vec<Tensor>]) -> GradientSet {
        GradientSet(
            params
                .iter()
                .map(|layer| layer.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
                .collect(),
        )
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.0 {
            for t in layer {
                for x in t.data_mut() {
                    *x *= factor;
                }
            }
        }
    }
}

impl Sequential {
    pub fn new<R: Rng>(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Sequential, NetError> {
        let mut shape = input_shape.clone();
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            spec.validate()?;
            shape = spec.output_shape(&shape)?;
            params.push(spec.init_params(rng));
        }
        Ok(Sequential { specs, params, input_shape, output_shape: shape })
    }

    /// Rebuilds a network from persisted specs and parameters, revalidating
    /// the shape chain and parameter shapes.
    pub fn from_parts(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        params: Vec<Vec<Tensor>>,
    ) -> Result<Sequential, NetError> {
        if specs.len() != params.len() {
            return Err(NetError::ShapeMismatch {
                context: "network reconstruction".into(),
                expected: format!("{} parameter groups", specs.len()),
                actual: format!("{}", params.len()),
            });
        }
        let mut shape = input_shape.clone();
        for (spec, group) in specs.iter().zip(&params) {
            spec.validate()?;
            shape = spec.output_shape(&shape)?;
            let expected = spec.param_shapes();
            if expected.len() != group.len()
                || expected.iter().zip(group).any(|(a, b)| a.as_slice() != b.shape())
            {
                return Err(NetError::ShapeMismatch {
                    context: format!("parameters of {spec:?}"),
                    expected: format!("{expected:?}"),
                    actual: format!("{:?}", group.iter().map(|t| t.shape()).collect::<Vec<_>>()),
                });
            }
        }
        Ok(Sequential { specs, params, input_shape, output_shape: shape })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Vec<Tensor>> {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flat_map(|layer| layer.iter().map(Tensor::numel)).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NetError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(NetError::ShapeMismatch {
                context: "network input".into(),
                expected: format!("{:?}", self.input_shape),
                actual: format!("{:?}", input.shape()),
            });
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        self.check_input(input)?;
        let mut current = input.clone();
        for (spec, params) in self.specs.iter().zip(&self.params) {
            let (out, _) = layers::forward(spec, params, &current)?;
            current = out;
        }
        Ok(current)
    }

    /// Forward pass that records per-layer traces for a later backward.
    pub fn forward_traced(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace), NetError> {
        self.check_input(input)?;
        let mut current = input.clone();
        let mut traces = Vec::with_capacity(self.specs.len());
        for (spec, params) in self.specs.iter().zip(&self.params) {
            let (out, trace) = layers::forward(spec, params, &current)?;
            traces.push(trace);
            current = out;
        }
        Ok((current, ForwardTrace { traces }))
    }

    /// Walks the recorded traces backwards, returning parameter gradients
    /// and the gradient with respect to the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: &Tensor,
    ) -> Result<(GradientSet, Tensor), NetError> {
        if trace.traces.len() != self.specs.len() {
            return Err(NetError::BackwardWithoutForward);
        }
        let mut grads = GradientSet::zeros_like(&self.params);
        // An all-zero output gradient propagates to all-zero everywhere.
        if grad_output.data().iter().all(|&g| g == 0.0) {
            return Ok((grads, Tensor::zeros(self.input_shape.clone())));
        }
        let mut grad = grad_output.clone();
        for idx in (0..self.specs.len()).rev() {
            let (param_grads, grad_input) =
                layers::backward(&self.specs[idx], &self.params[idx], &trace.traces[idx], &grad)?;
            grads.0[idx] = param_grads;
            grad = grad_input;
        }
        Ok((grads, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_stack() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
            },
            LayerSpec::PRelu { channels: 2 },
            LayerSpec::MaxPool2d { pool_h: 2, pool_w: 2 },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { in_features: 2 * 2 * 3, out_features: 4 },
        ]
    }

    #[test]
    fn shape_chain_is_validated_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Sequential::new(vec![1, 4, 6], small_stack(), &mut rng).unwrap();
        assert_eq!(net.output_shape(), &[4]);

        let bad = Sequential::new(vec![1, 4, 5], small_stack(), &mut rng);
        assert!(bad.is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Sequential::new(vec![1, 4, 6], small_stack(), &mut rng).unwrap();
        let input = Tensor::new(vec![1, 4, 6], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = net.forward(&input).unwrap();
        let b = net.forward(&input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rebuild_from_parts_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Sequential::new(vec![1, 4, 6], small_stack(), &mut rng).unwrap();
        let rebuilt = Sequential::from_parts(
            net.input_shape().to_vec(),
            net.specs().to_vec(),
            net.params().to_vec(),
        )
        .unwrap();
        let input = Tensor::new(vec![1, 4, 6], vec![0.25; 24]).unwrap();
        assert_eq!(net.forward(&input).unwrap(), rebuilt.forward(&input).unwrap());
    }
}
