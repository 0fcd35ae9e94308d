use super::ops::{self, Activation, PoolMode};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        window: (usize, usize),
        stride: (usize, usize),
        argmax: Vec<usize>,
    },
    ChannelPool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannels {
        x: Var,
        gate: Var,
    },
    Scale(Var, T),
    Concat(Vec<Var>),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Blur {
        input: Var,
        kernel: Vec<f64>,
        ksize: usize,
    },
    Max {
        inputs: Vec<Var>,
        argmax: Vec<u8>,
    },
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    BceLogits {
        logits: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in execution order, which is a topological order;
/// [`Graph::backward`] replays them once each in reverse. Only nodes that
/// depend on a `requires_grad` leaf take part in the backward sweep.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    freed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            freed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) output with respect
    /// to a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Drop every intermediate value. Leaves and their gradients survive;
    /// a later `backward` is refused.
    pub fn free_intermediates(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = Tensor::zeros(vec![0]);
            }
        }
        self.freed = true;
    }

    // -- operations -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &deps,
        ))
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, window: usize, stride: usize) -> Result<Var> {
        self.pool_rect(input, mode, (window, window), (stride, stride))
    }

    pub fn global_pool2d(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        self.pool_rect(input, mode, (h, w), (h, w))
    }

    fn pool_rect(
        &mut self,
        input: Var,
        mode: PoolMode,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (value, argmax) = ops::pool2d_rect(self.value(input), mode, window, stride)?;
        Ok(self.push(
            value,
            Op::Pool {
                input,
                mode,
                window,
                stride,
                argmax,
            },
            &[input],
        ))
    }

    /// Mean or max across channels, `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (value, argmax) = ops::channel_reduce(self.value(input), mode)?;
        Ok(self.push(value, Op::ChannelPool { input, mode, argmax }, &[input]))
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::upsample_bilinear(self.value(input), out_h, out_w)?;
        Ok(self.push(value, Op::Upsample { input }, &[input]))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = ops::activation(self.value(input), kind);
        self.push(value, Op::Act { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.exp());
        self.push(value, Op::Exp(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x[n,c,h,w] * gate[n,0,h,w]`, the gate broadcast over channels.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gate).shape() != [n, 1, h, w] {
            return Err(Error::config(format!(
                "gate shape {:?} does not broadcast over {:?}",
                self.value(gate).shape(),
                self.value(x).shape()
            )));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gate).data();
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            let gp = &gs[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let xp = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                out.extend(xp.iter().zip(gp).map(|(&xv, &gv)| xv * gv));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::MulChannels { x, gate }, &[x, gate]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Inverted dropout; identity when `stochastic` is false or `rate` is 0.
    pub fn dropout(&mut self, input: Var, rate: f64, stochastic: bool, rng: &mut Rng) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if !stochastic || rate == 0.0 {
            return Ok(input);
        }
        let mask = ops::dropout_mask::<T>(self.value(input).numel(), rate, rng);
        let src = self.value(input);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    pub fn gaussian_blur(&mut self, input: Var, ksize: usize, sigma: f64) -> Result<Var> {
        let kernel = ops::gaussian_kernel(ksize, sigma)?;
        let value = ops::blur_with(self.value(input), &kernel, ksize)?;
        Ok(self.push(value, Op::Blur { input, kernel, ksize }, &[input]))
    }

    /// Elementwise maximum; ties route the gradient to the earliest input.
    pub fn max(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let (value, argmax) = ops::elementwise_max(&values)?;
        Ok(self.push(
            value,
            Op::Max {
                inputs: inputs.to_vec(),
                argmax,
            },
            inputs,
        ))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).mean());
        self.push(value, Op::Mean(input), &[input])
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::usage("weighted_sum expects scalar terms"));
            }
            total += w * t.item();
        }
        let deps: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &deps))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// with the probability clamp of [`ops::binary_cross_entropy`].
    /// The gradient with respect to each logit is `(p - y) / numel`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        x.expect_same_shape(target)?;
        let probs = x.map(ops::sigmoid);
        let value = Tensor::scalar(ops::binary_cross_entropy(&probs, target)?);
        Ok(self.push(
            value,
            Op::BceLogits {
                logits,
                target: target.clone(),
            },
            &[logits],
        ))
    }

    // -- reverse sweep ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `output`. Leaf gradients from any
    /// previous sweep are replaced.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.freed {
            return Err(Error::usage("backward on a graph whose intermediates were freed"));
        }
        if self.value(output).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), T::one()));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let node = &self.nodes[i];
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                    )?;
                    contribs.push((*input, cg.input));
                    contribs.push((*kernel, cg.kernel));
                    if let Some(b) = bias {
                        contribs.push((*b, cg.bias));
                    }
                }
                Op::Pool {
                    input,
                    mode,
                    window,
                    stride,
                    argmax,
                } => {
                    let shape = self.value(*input).shape();
                    let dx = ops::pool2d_rect_backward(shape, *mode, *window, *stride, argmax, &g)?;
                    contribs.push((*input, dx));
                }
                Op::ChannelPool { input, mode, argmax } => {
                    let shape = self.value(*input).shape();
                    contribs.push((*input, ops::channel_reduce_backward(shape, *mode, argmax, &g)));
                }
                Op::Upsample { input } => {
                    let (_, _, h, w) = self.value(*input).dims4()?;
                    contribs.push((*input, ops::upsample_bilinear_backward(&g, h, w)?));
                }
                Op::Act { input, kind } => {
                    let out = &node.value;
                    let dx = match kind {
                        Activation::Relu => g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() })?,
                        Activation::Sigmoid => g.zip_map(out, |gv, s| gv * s * (T::one() - s))?,
                    };
                    contribs.push((*input, dx));
                }
                Op::Exp(input) => {
                    contribs.push((*input, g.zip_map(&node.value, |gv, y| gv * y)?));
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.map(|v| -v)));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    contribs.push((*a, g.zip_map(self.value(*b), |gv, y| gv * y)?));
                    contribs.push((*b, g.zip_map(self.value(*a), |gv, x| gv * x)?));
                }
                Op::MulChannels { x, gate } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let plane = h * w;
                    let xs = self.value(*x).data();
                    let gs = self.value(*gate).data();
                    let gd = g.data();
                    let mut dx = vec![T::zero(); xs.len()];
                    let mut dgate = vec![T::zero(); gs.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for p in 0..plane {
                                dx[off + p] = gd[off + p] * gs[b * plane + p];
                                dgate[b * plane + p] += gd[off + p] * xs[off + p];
                            }
                        }
                    }
                    contribs.push((*x, Tensor::new(vec![n, c, h, w], dx)?));
                    contribs.push((*gate, Tensor::new(vec![n, 1, h, w], dgate)?));
                }
                Op::Scale(input, factor) => {
                    let f = *factor;
                    contribs.push((*input, g.map(|v| v * f)));
                }
                Op::Concat(inputs) => {
                    let (n, total_c, h, w) = g.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &v in inputs {
                        let c = self.value(v).shape()[1];
                        let mut part = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            part.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        contribs.push((v, Tensor::new(vec![n, c, h, w], part)?));
                        offset += c;
                    }
                }
                Op::Dropout { input, mask } => {
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                    )?;
                    contribs.push((*input, dx));
                }
                Op::Blur { input, kernel, ksize } => {
                    contribs.push((*input, ops::blur_backward(&g, kernel, *ksize)?));
                }
                Op::Max { inputs, argmax } => {
                    for (s, &v) in inputs.iter().enumerate() {
                        let dx: Vec<T> = g
                            .data()
                            .iter()
                            .zip(argmax)
                            .map(|(&gv, &a)| if a as usize == s { gv } else { T::zero() })
                            .collect();
                        contribs.push((v, Tensor::new(g.shape().to_vec(), dx)?));
                    }
                }
                Op::Mean(input) => {
                    let src = self.value(*input);
                    let per = g.item() / T::from_usize(src.numel()).unwrap();
                    contribs.push((*input, Tensor::full(src.shape().to_vec(), per)));
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        let shape = self.value(v).shape().to_vec();
                        contribs.push((v, Tensor::full(shape, gv * w)));
                    }
                }
                Op::BceLogits { logits, target } => {
                    let x = self.value(*logits);
                    let scale = g.item() / T::from_usize(x.numel()).unwrap();
                    let dx = x.zip_map(target, |xv, y| (ops::sigmoid(xv) - y) * scale)?;
                    contribs.push((*logits, dx));
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph<f64>, x: f64) -> Var {
        g.leaf(Tensor::from_f64(vec![1], &[x]).unwrap(), true)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 3.0);
        let y = g.mul(x, x).unwrap();
        let out = g.mean(y);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 0.0);
        let y = g.sigmoid(x);
        let out = g.mean(y);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x*x + 3x at x = 2 -> f' = 2x + 3 = 7
        let mut g = Graph::new();
        let x = scalar(&mut g, 2.0);
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let s = g.add(sq, lin).unwrap();
        let out = g.mean(s);
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(vec![1], &[2.0]).unwrap());
        let x = scalar(&mut g, 1.0);
        let y = g.mul(c, x).unwrap();
        let out = g.mean(y);
        g.backward(out).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap(), true);
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
        let out = g.mean(y);
        g.free_intermediates();
        assert!(matches!(g.backward(out), Err(Error::Usage(_))));
    }

    #[test]
    fn bce_logit_gradient_is_p_minus_y_over_n() {
        let mut g = Graph::<f64>::new();
        let xs = [0.3, -1.2, 2.0, 0.0];
        let ys = [1.0, 0.0, 0.0, 1.0];
        let x = g.leaf(Tensor::from_f64(vec![4], &xs).unwrap(), true);
        let y = Tensor::from_f64(vec![4], &ys).unwrap();
        let l = g.bce_with_logits(x, &y).unwrap();
        g.backward(l).unwrap();
        for ((&xi, &yi), &gi) in xs.iter().zip(&ys).zip(g.grad(x).unwrap().data()) {
            assert!((gi - (ops::sigmoid(xi) - yi) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_routes_to_first_on_ties() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap(), true);
        let b = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap(), true);
        let m = g.max(&[a, b]).unwrap();
        let out = g.mean(m);
        g.backward(out).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 0.5]);
    }
}
