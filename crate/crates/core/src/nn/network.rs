use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::layer::{numel, Layer, LayerSpec, Shape3};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Feed-forward classifier producing logits. There is no softmax inside the network.
#[derive(Clone, Debug)]
pub struct Network<T> {
    input_shape: Shape3,
    layers: Vec<Layer<T>>,
    version: u64,
}

/// Activations recorded by [`Network::forward`] for the reverse passes.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    version: u64,
    batch: usize,
    /// `acts[l]` is the input of layer `l`; the last entry holds the logits.
    acts: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
}

impl<T> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Gradients aligned with [`Network::params`]: weight then bias of every parametrized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            tensors: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads<T>, s: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&x| x == T::zero()))
    }
}

fn infer_out_shape(spec: &LayerSpec, s: Shape3) -> Result<Shape3> {
    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if kernel == 0 || stride == 0 || out_channels == 0 {
                return Err(Error::Argument(format!("invalid convolution {spec:?}")));
            }
            let h = s[1] + 2 * padding;
            let w = s[2] + 2 * padding;
            if h < kernel || w < kernel {
                return Err(Error::Shape(format!("kernel {kernel} larger than padded input {s:?}")));
            }
            Ok([out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerSpec::MaxPool { window } => {
            if window == 0 || s[1] < window || s[2] < window {
                return Err(Error::Shape(format!("pool window {window} does not fit {s:?}")));
            }
            Ok([s[0], s[1] / window, s[2] / window])
        }
        LayerSpec::Dense { out_features } => {
            if out_features == 0 {
                return Err(Error::Argument("dense layer with zero outputs".into()));
            }
            Ok([out_features, 1, 1])
        }
        LayerSpec::Relu => Ok(s),
    }
}

fn param_shapes(spec: &LayerSpec, in_shape: Shape3) -> Option<(Vec<usize>, Vec<usize>, usize)> {
    match *spec {
        LayerSpec::Conv2d {
            out_channels, kernel, ..
        } => Some((
            vec![out_channels, in_shape[0], kernel, kernel],
            vec![out_channels],
            in_shape[0] * kernel * kernel,
        )),
        LayerSpec::Dense { out_features } => {
            let fan_in = numel(in_shape);
            Some((vec![out_features, fan_in], vec![out_features], fan_in))
        }
        _ => None,
    }
}

impl<T: Scalar> Network<T> {
    /// Assembles a network with Kaiming-uniform weights and zero biases.
    pub fn new(input_shape: Shape3, specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        Self::assemble(input_shape, specs, |w_shape, fan_in| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(w_shape, |_| T::of(rng.uniform_range(-bound, bound)))
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeros(input_shape: Shape3, specs: &[LayerSpec]) -> Result<Self> {
        Self::assemble(input_shape, specs, |w_shape, _| Tensor::zeros(w_shape))
    }

    /// Rebuilds a network from an architecture and parameters in [`Network::params`] order.
    pub fn from_params(input_shape: Shape3, specs: &[LayerSpec], params: Vec<Tensor<T>>) -> Result<Self> {
        let mut net = Self::zeros(input_shape, specs)?;
        if params.len() != net.params().len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameter tensors, got {}",
                net.params().len(),
                params.len()
            )));
        }
        for (slot, p) in net.params_mut().into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} does not match architecture {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    fn assemble(
        input_shape: Shape3,
        specs: &[LayerSpec],
        mut init: impl FnMut(&[usize], usize) -> Tensor<T>,
    ) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty input shape {input_shape:?}")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        for spec in specs {
            let out_shape = infer_out_shape(spec, shape)?;
            let (weight, bias) = match param_shapes(spec, shape) {
                Some((ws, bs, fan_in)) => (Some(init(&ws, fan_in)), Some(Tensor::zeros(&bs))),
                None => (None, None),
            };
            layers.push(Layer {
                spec: *spec,
                in_shape: shape,
                out_shape,
                weight,
                bias,
            });
            shape = out_shape;
        }
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            version: fresh_version(),
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        numel(self.input_shape)
    }

    pub fn num_classes(&self) -> usize {
        numel(self.layers.last().unwrap().out_shape)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter_map(|l| Some([l.weight.as_ref()?, l.bias.as_ref()?]))
            .flatten()
            .collect()
    }

    /// Mutable parameter access. Invalidates every outstanding trace.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.version = fresh_version();
        self.layers
            .iter_mut()
            .filter_map(|l| Some([l.weight.as_mut()?, l.bias.as_mut()?]))
            .flatten()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    in_shape: l.in_shape,
                    out_shape: l.out_shape,
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            version: fresh_version(),
        }
    }

    fn batch_size_of(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        let ok = match s.len() {
            4 => s[1..] == self.input_shape,
            2 => s[1] == self.input_len(),
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "batch shape {s:?} does not match network input {:?}",
                self.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Logits `B x d` for a batch shaped `B x C x H x W` (or `B x C*H*W`).
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let b = self.batch_size_of(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_idx = Vec::with_capacity(self.layers.len());
        acts.push(batch.data().to_vec());
        for layer in &self.layers {
            let mut idx = Vec::new();
            let out = layer.forward(acts.last().unwrap(), b, true, &mut idx);
            acts.push(out);
            pool_idx.push(idx);
        }
        let logits = Tensor::from_parts_unchecked(vec![b, self.num_classes()], acts.last().unwrap().clone());
        if !logits.is_finite() {
            return Err(Error::Numerical {
                msg: "non-finite logits".into(),
                residual: f64::NAN,
            });
        }
        Ok((
            logits,
            ForwardTrace {
                version: self.version,
                batch: b,
                acts,
                pool_idx,
            },
        ))
    }

    /// Relu on/off bits and pool argmax indices recorded in a trace. Two inputs
    /// with equal patterns lie in the same linear region of the network.
    pub fn activation_pattern(&self, trace: &ForwardTrace<T>) -> Vec<u32> {
        let mut pattern = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer.spec {
                LayerSpec::Relu => pattern.extend(trace.acts[l].iter().map(|&x| (x > T::zero()) as u32)),
                LayerSpec::MaxPool { .. } => pattern.extend_from_slice(&trace.pool_idx[l]),
                _ => {}
            }
        }
        pattern
    }

    /// Forward pass without keeping the trace.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.batch_size_of(batch)?;
        let mut cur = batch.data().to_vec();
        let mut idx = Vec::new();
        for layer in &self.layers {
            cur = layer.forward(&cur, b, true, &mut idx);
        }
        Ok(Tensor::from_parts_unchecked(vec![b, self.num_classes()], cur))
    }

    fn check_trace(&self, trace: &ForwardTrace<T>, upstream: &Tensor<T>) -> Result<()> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                network: self.version,
            });
        }
        if upstream.shape() != [trace.batch, self.num_classes()] {
            return Err(Error::Shape(format!(
                "upstream {:?} does not match logits [{}, {}]",
                upstream.shape(),
                trace.batch,
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn reverse(
        &self,
        trace: &ForwardTrace<T>,
        upstream: &[T],
        mut grads: Option<&mut ParamGrads<T>>,
        want_input: bool,
        keep: bool,
    ) -> (Option<Vec<T>>, Vec<Vec<T>>) {
        let b = trace.batch;
        let mut kept = if keep { vec![Vec::new(); self.layers.len()] } else { Vec::new() };
        let mut slot = self.params().len();
        let mut g = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.has_params() {
                slot -= 2;
                if let Some(pg) = grads.as_deref_mut() {
                    let (w, rest) = pg.tensors[slot..].split_at_mut(1);
                    layer.accumulate_param_grads(
                        &trace.acts[l],
                        &g,
                        b,
                        w[0].data_mut(),
                        Some(rest[0].data_mut()),
                    );
                }
            }
            let next = if l > 0 || want_input {
                Some(layer.backward_input(&trace.acts[l], &trace.pool_idx[l], &g, b))
            } else {
                None
            };
            if keep {
                kept[l] = std::mem::take(&mut g);
            }
            match next {
                Some(n) => g = n,
                None => return (None, kept),
            }
        }
        (Some(g), kept)
    }

    /// Gradients of `⟨upstream, logits⟩` with respect to every parameter.
    pub fn backward_params(&self, trace: &ForwardTrace<T>, upstream: &Tensor<T>) -> Result<ParamGrads<T>> {
        self.check_trace(trace, upstream)?;
        let mut grads = ParamGrads::zeros_like(self);
        self.reverse(trace, upstream.data(), Some(&mut grads), false, false);
        Ok(grads)
    }

    /// Gradient of `⟨upstream, logits⟩` with respect to the inputs, shaped like the batch.
    pub fn backward_input(&self, trace: &ForwardTrace<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_trace(trace, upstream)?;
        let (g, _) = self.reverse(trace, upstream.data(), None, true, false);
        Ok(self.input_tensor(trace.batch, g.unwrap()))
    }

    /// Parameter and input gradients from a single reverse pass.
    pub fn backward(&self, trace: &ForwardTrace<T>, upstream: &Tensor<T>) -> Result<(ParamGrads<T>, Tensor<T>)> {
        self.check_trace(trace, upstream)?;
        let mut grads = ParamGrads::zeros_like(self);
        let (g, _) = self.reverse(trace, upstream.data(), Some(&mut grads), true, false);
        Ok((grads, self.input_tensor(trace.batch, g.unwrap())))
    }

    fn input_tensor(&self, b: usize, data: Vec<T>) -> Tensor<T> {
        let [c, h, w] = self.input_shape;
        Tensor::from_parts_unchecked(vec![b, c, h, w], data)
    }

    /// For projections `v` (`B x d`), returns the per-sample `‖vᵦᵀ J(xᵦ)‖²` and
    /// the parameter gradient of `scale · Σᵦ ‖vᵦᵀ J(xᵦ)‖²`.
    ///
    /// `vᵀJ` is the input gradient of `⟨v, f(x)⟩`. Its parameter derivative is
    /// obtained by pushing the cotangent `2·scale·vᵀJ` forward through the
    /// linearized network (relu masks and pool routing frozen) and pairing the
    /// result with the reverse-pass gradients at every parametrized layer. This
    /// is exact wherever the activation pattern is locally constant.
    pub fn input_gradient_penalty(
        &self,
        trace: &ForwardTrace<T>,
        projections: &Tensor<T>,
        scale: T,
    ) -> Result<(Vec<T>, ParamGrads<T>)> {
        self.check_trace(trace, projections)?;
        let b = trace.batch;
        let n = self.input_len();
        let (g0, kept) = self.reverse(trace, projections.data(), None, true, true);
        let g0 = g0.unwrap();
        let sq: Vec<T> = g0.chunks(n).map(|row| row.iter().map(|&x| x * x).sum()).collect();

        let mut grads = ParamGrads::zeros_like(self);
        let last_param = self.layers.iter().rposition(|l| l.has_params());
        let Some(last_param) = last_param else {
            return Ok((sq, grads));
        };
        let two_s = T::of(2.0) * scale;
        let mut z: Vec<T> = g0.iter().map(|&x| x * two_s).collect();
        let mut slot = 0;
        for (l, layer) in self.layers.iter().enumerate().take(last_param + 1) {
            if layer.has_params() {
                let (w, _) = grads.tensors[slot..].split_at_mut(1);
                layer.accumulate_param_grads(&z, &kept[l], b, w[0].data_mut(), None);
                slot += 2;
            }
            if l < last_param {
                z = layer.tangent(&trace.acts[l], &trace.pool_idx[l], &z, b);
            }
        }
        Ok((sq, grads))
    }
}

/// Modernized LeNet-5: conv(6,5x5,pad 2)-relu-pool(2)-conv(16,5x5)-relu-pool(2)-dense(120)-relu-dense(84)-relu-dense(d).
pub fn lenet_specs(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 6,
            kernel: 5,
            stride: 1,
            padding: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Conv2d {
            out_channels: 16,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Dense { out_features: 120 },
        LayerSpec::Relu,
        LayerSpec::Dense { out_features: 84 },
        LayerSpec::Relu,
        LayerSpec::Dense {
            out_features: num_classes,
        },
    ]
}

pub fn build_lenet<T: Scalar>(input_shape: Shape3, num_classes: usize, rng: &mut RngStream) -> Result<Network<T>> {
    Network::new(input_shape, &lenet_specs(num_classes), rng)
}
