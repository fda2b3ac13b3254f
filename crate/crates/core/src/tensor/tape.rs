//! Single-use reverse-mode tape.
//!
//! Every tensor routed through the tape gets a [`ValueId`]; ops record their
//! operand ids and whatever saved state their backward pass needs. Ids are
//! created in topological order, so one reverse sweep over the records yields
//! exact gradients for every leaf (parameters and inputs alike).

use crate::error::{Error, Result};

use super::ops;
use super::{Scalar, Tensor};

/// Handle to a tensor held by a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Node<T> {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
    Relu {
        input: ValueId,
    },
    ResidualAdd {
        lhs: ValueId,
        rhs: ValueId,
    },
    GlobalAvgPool {
        input: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    GaussianNll {
        pred: ValueId,
        target: Tensor<T>,
        sigma: T,
    },
}

/// Records one forward pass and plays it back in reverse.
///
/// The tape is confined to a single forward/backward pair: `backward` may be
/// called once, after which the tape only serves value lookups.
pub struct GradTape<T = f32> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, node: Node<T>) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(value);
        self.nodes.push(node);
        id
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Node::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let out = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Node::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn dense(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let out = ops::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Node::Dense { input, weight, bias }))
    }

    /// Inference-mode batch norm; `mean` and `var` are treated as constants.
    pub fn batchnorm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<ValueId> {
        let out = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        Ok(self.push(
            out,
            Node::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu_forward(self.value(input));
        self.push(out, Node::Relu { input })
    }

    pub fn residual_add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let out = ops::residual_add(self.value(lhs), self.value(rhs))?;
        Ok(self.push(out, Node::ResidualAdd { lhs, rhs }))
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let out = ops::global_avg_pool_forward(self.value(input))?;
        Ok(self.push(out, Node::GlobalAvgPool { input }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (loss, probs) = ops::softmax_cross_entropy_with_probs(self.value(logits), labels)?;
        Ok(self.push(
            loss,
            Node::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn gaussian_nll(&mut self, pred: ValueId, target: &Tensor<T>, sigma: T) -> Result<ValueId> {
        let loss = ops::gaussian_nll(self.value(pred), target, sigma)?;
        Ok(self.push(
            loss,
            Node::GaussianNll {
                pred,
                target: target.clone(),
                sigma,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Returns a gradient per value id;
    /// leaves untouched by the loss read back as `None`.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if matches!(self.nodes.get(loss.0), None | Some(Node::Leaf)) {
            return Err(Error::BackwardWithoutForward);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Node::Leaf => {
                    grads[i] = Some(gout);
                }
                Node::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gi, gk, gb) = ops::conv2d_backward(
                        &self.values[input.0],
                        &self.values[kernel.0],
                        *stride,
                        *padding,
                        &gout,
                    );
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                    accumulate(&mut grads, *bias, gb);
                }
                Node::Dense { input, weight, bias } => {
                    let (gi, gw, gb) =
                        ops::dense_backward(&self.values[input.0], &self.values[weight.0], &gout);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Node::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let (gi, gg, gb) = ops::batchnorm_backward(
                        &self.values[input.0],
                        &self.values[gamma.0],
                        mean,
                        var,
                        *eps,
                        &gout,
                    );
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Node::Relu { input } => {
                    let gi = ops::relu_backward(&self.values[input.0], &gout);
                    accumulate(&mut grads, *input, gi);
                }
                Node::ResidualAdd { lhs, rhs } => {
                    // the same upstream gradient flows to both branches
                    accumulate(&mut grads, *lhs, gout.clone());
                    accumulate(&mut grads, *rhs, gout);
                }
                Node::GlobalAvgPool { input } => {
                    let gi = ops::global_avg_pool_backward(self.values[input.0].shape(), &gout);
                    accumulate(&mut grads, *input, gi);
                }
                Node::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let gl = ops::softmax_cross_entropy_backward(probs, labels, gout.item());
                    accumulate(&mut grads, *logits, gl);
                }
                Node::GaussianNll { pred, target, sigma } => {
                    let gp = ops::gaussian_nll_backward(
                        &self.values[pred.0],
                        target,
                        *sigma,
                        gout.item(),
                    );
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ValueId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.elems_mut().iter_mut().zip(g.elems()) {
                *e += *v;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Gradients produced by [`GradTape::backward`], indexed by value id.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_the_input() {
        // loss = w . x with x fixed, so dL/dw == x
        for x in [1.0f64, 2.0] {
            let mut tape = GradTape::new();
            let input = tape.leaf(Tensor::new(vec![1, 1], vec![x]).unwrap());
            let w = tape.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
            let b = tape.leaf(Tensor::zeros(&[1]));
            let out = tape.dense(input, w, b).unwrap();
            let grads = tape.backward(out).unwrap();
            assert_eq!(grads.get(w).unwrap().item(), x);
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut tape = GradTape::<f32>::new();
        let leaf = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(
            tape.backward(leaf),
            Err(Error::BackwardWithoutForward)
        ));
    }

    #[test]
    fn backward_is_single_use() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let out = tape.dense(x, w, b).unwrap();
        tape.backward(out).unwrap();
        assert!(matches!(tape.backward(out), Err(Error::TapeConsumed)));
    }

    #[test]
    fn zero_upstream_gradient_zeroes_parameter_gradients() {
        // pred == target makes the loss gradient identically zero
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let pred = tape.dense(x, w, b).unwrap();
        let target = tape.value(pred).clone();
        let loss = tape.gaussian_nll(pred, &target, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().elems().iter().all(|&g| g == 0.0));
        assert!(grads.get(b).unwrap().elems().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn residual_add_routes_identical_gradient_to_both_branches() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, 0.4, -0.1]).unwrap());
        let sum = tape.residual_add(a, b).unwrap();
        let target = Tensor::zeros(&[1, 3]);
        let loss = tape.gaussian_nll(sum, &target, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), grads.get(b).unwrap());
    }

    /// Central finite difference of the loss against one parameter leaf.
    fn finite_diff_grad(
        build: &dyn Fn(&Tensor<f64>) -> f64,
        param: &Tensor<f64>,
        h: f64,
    ) -> Tensor<f64> {
        let mut grad = Tensor::zeros(param.shape());
        for i in 0..param.numel() {
            let mut plus = param.clone();
            plus.elems_mut()[i] += h;
            let mut minus = param.clone();
            minus.elems_mut()[i] -= h;
            grad.elems_mut()[i] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64) {
        for (a, n) in analytic.elems().iter().zip(numeric.elems()) {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / denom <= tol,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    fn pseudo(vals: &mut u64) -> f64 {
        *vals ^= *vals << 13;
        *vals ^= *vals >> 7;
        *vals ^= *vals << 17;
        (*vals >> 40) as f64 / 8388608.0 - 1.0
    }

    fn rand_tensor(shape: &[usize], seed: &mut u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| pseudo(seed)).collect()).unwrap()
    }

    #[test]
    fn three_layer_net_gradients_match_finite_differences() {
        let mut seed = 0xabcdef1234567890u64;
        let input = rand_tensor(&[1, 2, 5, 5], &mut seed);
        let kernel = rand_tensor(&[3, 2, 3, 3], &mut seed);
        let kbias = rand_tensor(&[3], &mut seed);
        let gamma = rand_tensor(&[3], &mut seed).map(|v| v + 1.5);
        let beta = rand_tensor(&[3], &mut seed);
        let mean = rand_tensor(&[3], &mut seed);
        let var = rand_tensor(&[3], &mut seed).map(|v| v.abs() + 0.5);
        let weight = rand_tensor(&[4, 3], &mut seed);
        let wbias = rand_tensor(&[4], &mut seed);

        let run = |k: &Tensor<f64>,
                   kb: &Tensor<f64>,
                   g: &Tensor<f64>,
                   be: &Tensor<f64>,
                   w: &Tensor<f64>,
                   wb: &Tensor<f64>|
         -> (GradTape<f64>, Vec<ValueId>, ValueId) {
            let mut tape = GradTape::new();
            let x = tape.leaf(input.clone());
            let kid = tape.leaf(k.clone());
            let kbid = tape.leaf(kb.clone());
            let gid = tape.leaf(g.clone());
            let bid = tape.leaf(be.clone());
            let wid = tape.leaf(w.clone());
            let wbid = tape.leaf(wb.clone());
            let conv = tape.conv2d(x, kid, kbid, 1, 1).unwrap();
            let bn = tape.batchnorm(conv, gid, bid, &mean, &var, 1e-5).unwrap();
            let act = tape.relu(bn);
            let pooled = tape.global_avg_pool(act).unwrap();
            let logits = tape.dense(pooled, wid, wbid).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
            (tape, vec![kid, kbid, gid, bid, wid, wbid], loss)
        };

        let (mut tape, ids, loss) = run(&kernel, &kbias, &gamma, &beta, &weight, &wbias);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-4;
        let params: [(&Tensor<f64>, Box<dyn Fn(&Tensor<f64>) -> f64>); 6] = [
            (&kernel, Box::new(|p: &Tensor<f64>| {
                let (mut t, _, l) = run(p, &kbias, &gamma, &beta, &weight, &wbias);
                let v = t.value(l).item();
                let _ = t.backward(l);
                v
            })),
            (&kbias, Box::new(|p: &Tensor<f64>| {
                let (t, _, l) = run(&kernel, p, &gamma, &beta, &weight, &wbias);
                t.value(l).item()
            })),
            (&gamma, Box::new(|p: &Tensor<f64>| {
                let (t, _, l) = run(&kernel, &kbias, p, &beta, &weight, &wbias);
                t.value(l).item()
            })),
            (&beta, Box::new(|p: &Tensor<f64>| {
                let (t, _, l) = run(&kernel, &kbias, &gamma, p, &weight, &wbias);
                t.value(l).item()
            })),
            (&weight, Box::new(|p: &Tensor<f64>| {
                let (t, _, l) = run(&kernel, &kbias, &gamma, &beta, p, &wbias);
                t.value(l).item()
            })),
            (&wbias, Box::new(|p: &Tensor<f64>| {
                let (t, _, l) = run(&kernel, &kbias, &gamma, &beta, &weight, p);
                t.value(l).item()
            })),
        ];
        for (idx, (param, eval)) in params.iter().enumerate() {
            let numeric = finite_diff_grad(eval.as_ref(), param, h);
            let analytic = grads.get(ids[idx]).unwrap();
            assert_close(analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let out = tape.dense(x, w, b).unwrap();
        assert!(tape.backward(out).is_err());
    }
}
