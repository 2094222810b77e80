use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{ModelSpec, Op};
use crate::error::{NnError, Result};
use crate::init::kaiming_uniform;
use crate::ops::{self, Activation, ConvGeometry};
use crate::tensor::Tensor;

/// A model spec with materialised parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    /// Index of the weight tensor in `params` for each conv node.
    slots: Vec<Option<usize>>,
}

/// Activations kept by a training forward pass.
pub struct Tape {
    values: Vec<Option<Tensor>>,
    argmax: Vec<Option<Vec<u32>>>,
    output: Tensor,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

fn slots_for(spec: &ModelSpec) -> Vec<Option<usize>> {
    let mut next = 0;
    spec.nodes
        .iter()
        .map(|n| {
            n.op.is_conv().then(|| {
                next += 2;
                next - 2
            })
        })
        .collect()
}

fn geometry(op: &Op, in_h: usize) -> ConvGeometry {
    match *op {
        Op::Conv { kernel, stride, .. } => ConvGeometry::same(kernel, stride, in_h),
        // Adjoint of the strided conv taking the enlarged map back down.
        Op::TransposedConv { kernel, stride, .. } => ConvGeometry::same(kernel, stride, in_h * stride),
        _ => unreachable!("geometry of a parameter-free node"),
    }
}

impl Model {
    /// Kaiming-uniform weights and zero biases from a seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (node, shapes) in spec.nodes.iter().zip(spec.param_shapes()) {
            let Some((w, b)) = shapes else { continue };
            let k2 = w[2] * w[3];
            let fan_in = match node.op {
                Op::Conv { .. } => w[1] * k2,
                // Each output cell of a stride-s transposed conv sees about k^2/s^2 taps per input channel.
                Op::TransposedConv { stride, .. } => w[0] * (k2 / (stride * stride)).max(1),
                _ => unreachable!(),
            };
            params.push(kaiming_uniform(&w, fan_in, &mut rng));
            params.push(Tensor::zeros(&b));
        }
        let slots = slots_for(&spec);
        Ok(Model { spec, params, slots })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let params = spec.flat_param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let slots = slots_for(&spec);
        Ok(Model { spec, params, slots })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Model> {
        spec.validate()?;
        let shapes = spec.flat_param_shapes();
        if shapes.len() != params.len() {
            return Err(NnError::shape("model parameters", format!("{} tensors", shapes.len()), params.len()));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if p.shape() != s.as_slice() {
                return Err(NnError::shape("model parameters", format!("{s:?}"), format!("{:?}", p.shape())));
            }
        }
        let slots = slots_for(&spec);
        Ok(Model { spec, params, slots })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        self.spec.check_input(c, h, w)
    }

    /// Number of consumers of each node, used to free activations early.
    fn use_counts(&self) -> Vec<usize> {
        let mut uses = vec![0usize; self.spec.nodes.len()];
        for n in &self.spec.nodes {
            for j in n.op.inputs() {
                uses[j] += 1;
            }
        }
        uses[self.spec.output] += 1;
        uses
    }

    fn eval_node(
        &self,
        i: usize,
        x: &Tensor,
        values: &[Option<Tensor>],
        argmax: Option<&mut Option<Vec<u32>>>,
    ) -> Result<Tensor> {
        let get = |j: usize| values[j].as_ref().expect("input evaluated before use");
        let node = &self.spec.nodes[i];
        Ok(match &node.op {
            Op::Input => x.clone(),
            Op::Conv { input, activation, .. } => {
                let xin = get(*input);
                let s = self.slots[i].expect("conv slot");
                let g = geometry(&node.op, xin.shape()[2]);
                let mut y = ops::conv2d_forward(xin, &self.params[s], Some(&self.params[s + 1]), g)?;
                activation.forward_inplace(&mut y);
                y
            }
            Op::TransposedConv { input, activation, stride, .. } => {
                let xin = get(*input);
                let s = self.slots[i].expect("conv slot");
                let (h, w) = (xin.shape()[2], xin.shape()[3]);
                let g = geometry(&node.op, h);
                let mut y = ops::conv_transpose2d_forward(xin, &self.params[s], Some(&self.params[s + 1]), g, (h * stride, w * stride))?;
                activation.forward_inplace(&mut y);
                y
            }
            Op::MaxPool { input } => {
                let (y, am) = ops::maxpool2d_forward(get(*input))?;
                if let Some(slot) = argmax {
                    *slot = Some(am);
                }
                y
            }
            Op::Upsample { input } => ops::upsample2x_forward(get(*input))?,
            Op::Concat { inputs, .. } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&j| get(j)).collect();
                ops::concat_channels(&parts)?
            }
            Op::Zeros { like } => Tensor::zeros(get(*like).shape()),
        })
    }

    /// Inference forward pass; `x` is `[N, C, H, W]`, output `[N, 1, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut uses = self.use_counts();
        let n = self.spec.nodes.len();
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        for i in 0..n {
            let y = self.eval_node(i, x, &values, None)?;
            values[i] = Some(y);
            for j in self.spec.nodes[i].op.inputs() {
                uses[j] -= 1;
                if uses[j] == 0 {
                    values[j] = None;
                }
            }
        }
        let mut out = values[self.spec.output].take().expect("output evaluated");
        self.spec.final_activation.forward_inplace(&mut out);
        Ok(out)
    }

    /// Training forward pass keeping every activation.
    pub fn forward_train(&self, x: &Tensor) -> Result<Tape> {
        self.check_batch(x)?;
        let n = self.spec.nodes.len();
        let mut values: Vec<Option<Tensor>> = vec![None; n];
        let mut argmax: Vec<Option<Vec<u32>>> = vec![None; n];
        for i in 0..n {
            let y = self.eval_node(i, x, &values, Some(&mut argmax[i]))?;
            values[i] = Some(y);
        }
        let mut output = values[self.spec.output].clone().expect("output evaluated");
        self.spec.final_activation.forward_inplace(&mut output);
        Ok(Tape { values, argmax, output })
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the output.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        if grad_output.shape() != tape.output.shape() {
            return Err(NnError::shape(
                "model backward",
                format!("{:?}", tape.output.shape()),
                format!("{:?}", grad_output.shape()),
            ));
        }
        let nodes = &self.spec.nodes;
        let n = nodes.len();
        // Gradients need not flow into nodes that only depend on constants.
        let mut live = vec![false; n];
        for (i, node) in nodes.iter().enumerate() {
            live[i] = node.op.is_conv() || (!matches!(node.op, Op::Zeros { .. }) && node.op.inputs().iter().any(|&j| live[j]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut g_out = grad_output.clone();
        self.spec
            .final_activation
            .backward_inplace(&tape.output, &mut g_out)?;
        grads[self.spec.output] = Some(g_out);
        let mut pgrads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let value = |j: usize| tape.values[j].as_ref().expect("tape value");

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..n).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input | Op::Zeros { .. } => {}
                Op::Conv { input, activation, .. } | Op::TransposedConv { input, activation, .. } => {
                    activation.backward_inplace(value(i), &mut g)?;
                    let s = self.slots[i].expect("conv slot");
                    let xin = value(*input);
                    let geo = geometry(&node.op, xin.shape()[2]);
                    let cg = if matches!(node.op, Op::Conv { .. }) {
                        ops::conv2d_backward(xin, &self.params[s], &g, geo, live[*input])?
                    } else {
                        ops::conv_transpose2d_backward(xin, &self.params[s], &g, geo, live[*input])?
                    };
                    pgrads[s] = Some(cg.weight);
                    pgrads[s + 1] = Some(cg.bias);
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads[*input], gx)?;
                    }
                }
                Op::MaxPool { input } => {
                    if live[*input] {
                        let am = tape.argmax[i].as_ref().expect("argmax recorded");
                        let gx = ops::maxpool2d_backward(value(*input).shape(), am, &g)?;
                        accumulate(&mut grads[*input], gx)?;
                    }
                }
                Op::Upsample { input } => {
                    if live[*input] {
                        accumulate(&mut grads[*input], ops::upsample2x_backward(&g)?)?;
                    }
                }
                Op::Concat { inputs, .. } => {
                    let chans: Vec<usize> = inputs.iter().map(|&j| value(j).shape()[1]).collect();
                    let parts = ops::concat_channels_backward(&g, &chans)?;
                    for (&j, gp) in inputs.iter().zip(parts) {
                        if live[j] {
                            accumulate(&mut grads[j], gp)?;
                        }
                    }
                }
            }
        }
        let shapes = self.spec.flat_param_shapes();
        Ok(pgrads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(&s)))
            .collect())
    }

    /// Sets the activation applied to the output node.
    pub fn set_final_activation(&mut self, act: Activation) {
        self.spec.final_activation = act;
    }
}
