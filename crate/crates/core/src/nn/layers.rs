//! Layers with hand-written forward and backward passes.
//!
//! Every layer has two forward paths: [`Layer::forward`] runs in training
//! mode and caches what the backward pass needs, [`Layer::infer`] runs in
//! inference mode (batch-norm uses running statistics) and touches no state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Param {
            name,
            shape,
            value,
            grad,
        }
    }

    fn uniform(name: String, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let len = shape.iter().product();
        let value = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Param::new(name, shape, value)
    }

    fn filled(name: String, shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Param::new(name, shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-learnable state that is still part of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

fn out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

/// Output positions `o` for which `o * stride + offset - padding` lands inside the input.
fn valid_outputs(offset: usize, padding: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    let end = if in_len + padding > offset {
        ((in_len - 1 + padding - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (start, end.max(start))
}

impl Conv2d {
    /// He-uniform weights scaled by fan-in; bias (when present) uses the
    /// `1/sqrt(fan_in)` bound.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let fan_in = (in_channels / groups) * kernel * kernel;
        let weight = Param::uniform(
            format!("{prefix}.weight"),
            vec![out_channels, in_channels / groups, kernel, kernel],
            (6.0 / fan_in as f64).sqrt(),
            rng,
        );
        let bias = bias.then(|| {
            Param::uniform(
                format!("{prefix}.bias"),
                vec![out_channels],
                1.0 / (fan_in as f64).sqrt(),
                rng,
            )
        });
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias,
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_len(h, self.kernel, self.stride, self.padding),
            out_len(w, self.kernel, self.stride, self.padding),
        )
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh_n, ow_n) = self.output_hw(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh_n, ow_n]);
        let xd = x.data();
        let wd = &self.weight.value;
        let od = out.data_mut();
        for b in 0..n {
            for oc in 0..self.out_channels {
                let g = oc / cout_g;
                let o_base = (b * self.out_channels + oc) * oh_n * ow_n;
                let plane = &mut od[o_base..o_base + oh_n * ow_n];
                if let Some(bias) = &self.bias {
                    plane.fill(bias.value[oc]);
                }
                for icl in 0..cin_g {
                    let ic = g * cin_g + icl;
                    let x_base = (b * c + ic) * h * w;
                    let xp = &xd[x_base..x_base + h * w];
                    for kh in 0..k {
                        let (r0, r1) = valid_outputs(kh, p, s, h, oh_n);
                        for kw in 0..k {
                            let (c0, c1) = valid_outputs(kw, p, s, w, ow_n);
                            let wv = wd[((oc * cin_g + icl) * k + kh) * k + kw];
                            for oh in r0..r1 {
                                let ih = oh * s + kh - p;
                                let xrow = &xp[ih * w..(ih + 1) * w];
                                let orow = &mut plane[oh * ow_n..(oh + 1) * ow_n];
                                for ow in c0..c1 {
                                    orow[ow] += wv * xrow[ow * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward");
        let (n, c, h, w) = x.dims4();
        let (_, _, oh_n, ow_n) = grad.dims4();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        let mut gx = Tensor::zeros(x.shape());
        let xd = x.data();
        let gd = grad.data();
        let gxd = gx.data_mut();
        let wd = &self.weight.value;
        let gw = &mut self.weight.grad;
        for b in 0..n {
            for oc in 0..self.out_channels {
                let g = oc / cout_g;
                let o_base = (b * self.out_channels + oc) * oh_n * ow_n;
                let gplane = &gd[o_base..o_base + oh_n * ow_n];
                if let Some(bias) = &mut self.bias {
                    bias.grad[oc] += gplane.iter().sum::<f64>();
                }
                for icl in 0..cin_g {
                    let ic = g * cin_g + icl;
                    let x_base = (b * c + ic) * h * w;
                    for kh in 0..k {
                        let (r0, r1) = valid_outputs(kh, p, s, h, oh_n);
                        for kw in 0..k {
                            let (c0, c1) = valid_outputs(kw, p, s, w, ow_n);
                            let widx = ((oc * cin_g + icl) * k + kh) * k + kw;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            for oh in r0..r1 {
                                let ih = oh * s + kh - p;
                                let row_base = x_base + ih * w;
                                let grow = &gplane[oh * ow_n..(oh + 1) * ow_n];
                                for ow in c0..c1 {
                                    let xi = row_base + ow * s + kw - p;
                                    acc += grow[ow] * xd[xi];
                                    gxd[xi] += wv * grow[ow];
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(format!("{prefix}.weight"), vec![channels], 1.0),
            beta: Param::filled(format!("{prefix}.bias"), vec![channels], 0.0),
            running_mean: Buffer {
                name: format!("{prefix}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{prefix}.running_var"),
                value: vec![1.0; channels],
            },
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        let xd = x.data();
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                sum += xd[base..base + plane].iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                sq += xd[base..base + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xd[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gm * xh + bt;
                }
            }
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut out = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                let base = (b * c + ch) * plane;
                for v in &mut out.data_mut()[base..base + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward");
        let (n, c, h, w) = grad.dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let gd = grad.data();
        let xd = xhat.data();
        let mut gx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    sum_g += gd[i];
                    sum_gx += gd[i] * xd[i];
                }
            }
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let k = self.gamma.value[ch] * inv_std[ch] / m;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    gx.data_mut()[i] = k * (m * gd[i] - sum_g - xd[i] * sum_gx);
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    fn compute(x: &Tensor) -> (Tensor, Vec<usize>) {
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut idx = vec![0; n * c * oh * ow];
        let xd = x.data();
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.data_mut()[o] = xd[best];
                    idx[o] = best;
                    o += 1;
                }
            }
        }
        (out, idx)
    }
}

/// Adaptive average pooling to a 1×1 map, emitted flattened as `(n, c)`.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveAvgPool {
    input_shape: Option<Vec<usize>>,
}

fn global_avg(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        out.data_mut()[i] = x.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            in_features,
            out_features,
            weight: Param::uniform(format!("{prefix}.weight"), vec![out_features, in_features], bound, rng),
            bias: Param::uniform(format!("{prefix}.bias"), vec![out_features], bound, rng),
            input: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let (n, d) = x.dims2();
        assert_eq!(d, self.in_features, "linear input width");
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for b in 0..n {
            let xr = x.row(b);
            for o in 0..self.out_features {
                let wr = &self.weight.value[o * d..(o + 1) * d];
                out.data_mut()[b * self.out_features + o] =
                    self.bias.value[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward");
        let (n, d) = x.dims2();
        let mut gx = Tensor::zeros(&[n, d]);
        for b in 0..n {
            let xr = x.row(b);
            for o in 0..self.out_features {
                let g = grad.data()[b * self.out_features + o];
                self.bias.grad[o] += g;
                let wr = &self.weight.value[o * d..(o + 1) * d];
                let gw = &mut self.weight.grad[o * d..(o + 1) * d];
                let gxr = &mut gx.data_mut()[b * d..(b + 1) * d];
                for i in 0..d {
                    gw[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        }
        gx
    }
}

/// `body(x) + shortcut(x)`, optionally followed by a ReLU. An empty
/// shortcut is the identity.
#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Vec<Layer>,
    pub relu_after: bool,
    mask: Option<Vec<bool>>,
}

impl Residual {
    pub fn new(body: Vec<Layer>, shortcut: Vec<Layer>, relu_after: bool) -> Self {
        Residual {
            body,
            shortcut,
            relu_after,
            mask: None,
        }
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "residual branch shapes differ");
    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu(Relu),
    MaxPool(MaxPool2d),
    AvgPool(AdaptiveAvgPool),
    Linear(Linear),
    Residual(Box<Residual>),
}

pub(crate) fn run_train(layers: &mut [Layer], x: &Tensor) -> Tensor {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(&h);
    }
    h
}

pub(crate) fn run_infer(layers: &[Layer], x: &Tensor) -> Tensor {
    let mut h = x.clone();
    for layer in layers {
        h = layer.infer(&h);
    }
    h
}

pub(crate) fn run_backward(layers: &mut [Layer], grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for layer in layers.iter_mut().rev() {
        g = layer.backward(&g);
    }
    g
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn max_pool() -> Self {
        Layer::MaxPool(MaxPool2d::default())
    }

    pub fn avg_pool() -> Self {
        Layer::AvgPool(AdaptiveAvgPool::default())
    }

    /// Training-mode forward; caches activations for [`Layer::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => {
                let out = conv.compute(x);
                conv.input = Some(x.clone());
                out
            }
            Layer::BatchNorm(bn) => bn.forward(x),
            Layer::Relu(r) => {
                r.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
                relu(x)
            }
            Layer::MaxPool(mp) => {
                let (out, idx) = MaxPool2d::compute(x);
                mp.argmax = Some((idx, x.shape().to_vec()));
                out
            }
            Layer::AvgPool(ap) => {
                ap.input_shape = Some(x.shape().to_vec());
                global_avg(x)
            }
            Layer::Linear(lin) => {
                let out = lin.compute(x);
                lin.input = Some(x.clone());
                out
            }
            Layer::Residual(res) => {
                let mut out = run_train(&mut res.body, x);
                let skip = if res.shortcut.is_empty() {
                    x.clone()
                } else {
                    run_train(&mut res.shortcut, x)
                };
                add_into(&mut out, &skip);
                if res.relu_after {
                    res.mask = Some(out.data().iter().map(|&v| v > 0.0).collect());
                    out = relu(&out);
                }
                out
            }
        }
    }

    /// Inference-mode forward. Leaves every cache and running statistic untouched.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => conv.compute(x),
            Layer::BatchNorm(bn) => bn.infer(x),
            Layer::Relu(_) => relu(x),
            Layer::MaxPool(_) => MaxPool2d::compute(x).0,
            Layer::AvgPool(_) => global_avg(x),
            Layer::Linear(lin) => lin.compute(x),
            Layer::Residual(res) => {
                let mut out = run_infer(&res.body, x);
                let skip = if res.shortcut.is_empty() {
                    x.clone()
                } else {
                    run_infer(&res.shortcut, x)
                };
                add_into(&mut out, &skip);
                if res.relu_after {
                    out = relu(&out);
                }
                out
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => conv.backward(grad),
            Layer::BatchNorm(bn) => bn.backward(grad),
            Layer::Relu(r) => {
                let mask = r.mask.take().expect("relu backward without forward");
                let mut g = grad.clone();
                g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| {
                    if !m {
                        *v = 0.0
                    }
                });
                g
            }
            Layer::MaxPool(mp) => {
                let (idx, shape) = mp.argmax.take().expect("maxpool backward without forward");
                let mut g = Tensor::zeros(&shape);
                for (o, &i) in idx.iter().enumerate() {
                    g.data_mut()[i] += grad.data()[o];
                }
                g
            }
            Layer::AvgPool(ap) => {
                let shape = ap.input_shape.take().expect("pool backward without forward");
                let plane = shape[2] * shape[3];
                let mut g = Tensor::zeros(&shape);
                for (i, &gv) in grad.data().iter().enumerate() {
                    let v = gv / plane as f64;
                    g.data_mut()[i * plane..(i + 1) * plane].fill(v);
                }
                g
            }
            Layer::Linear(lin) => lin.backward(grad),
            Layer::Residual(res) => {
                let mut g = grad.clone();
                if res.relu_after {
                    let mask = res.mask.take().expect("residual backward without forward");
                    g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| {
                        if !m {
                            *v = 0.0
                        }
                    });
                }
                let mut gx = run_backward(&mut res.body, &g);
                let gs = if res.shortcut.is_empty() {
                    g
                } else {
                    run_backward(&mut res.shortcut, &g)
                };
                add_into(&mut gx, &gs);
                gx
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(conv) => std::iter::once(&conv.weight).chain(conv.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(lin) => vec![&lin.weight, &lin.bias],
            Layer::Residual(res) => res.body.iter().chain(&res.shortcut).flat_map(Layer::params).collect(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(conv) => std::iter::once(&mut conv.weight).chain(conv.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(lin) => vec![&mut lin.weight, &mut lin.bias],
            Layer::Residual(res) => res
                .body
                .iter_mut()
                .chain(res.shortcut.iter_mut())
                .flat_map(Layer::params_mut)
                .collect(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => Vec::new(),
        }
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        match self {
            Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            Layer::Residual(res) => res.body.iter().chain(&res.shortcut).flat_map(Layer::buffers).collect(),
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            Layer::Residual(res) => res
                .body
                .iter_mut()
                .chain(res.shortcut.iter_mut())
                .flat_map(Layer::buffers_mut)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Appends one `layer_kind shape` line per primitive layer.
    pub fn fingerprint(&self, out: &mut Vec<String>) {
        match self {
            Layer::Conv(c) => out.push(format!(
                "conv2d {:?} stride={} padding={} groups={} bias={}",
                c.weight.shape,
                c.stride,
                c.padding,
                c.groups,
                c.bias.is_some()
            )),
            Layer::BatchNorm(bn) => out.push(format!("batchnorm2d [{}]", bn.channels)),
            Layer::Relu(_) => out.push("relu []".into()),
            Layer::MaxPool(_) => out.push("maxpool2d [2, 2]".into()),
            Layer::AvgPool(_) => out.push("adaptive_avg_pool2d [1, 1]".into()),
            Layer::Linear(l) => out.push(format!("linear {:?}", l.weight.shape)),
            Layer::Residual(res) => {
                out.push("residual_begin []".into());
                res.body.iter().for_each(|l| l.fingerprint(out));
                out.push(format!(
                    "residual_add [{}] relu={}",
                    if res.shortcut.is_empty() { "identity" } else { "projection" },
                    res.relu_after
                ));
                res.shortcut.iter().for_each(|l| l.fingerprint(out));
                out.push("residual_end []".into());
            }
        }
    }

    /// Output shape for a single sample of shape `input` (`[c, h, w]` or `[d]`).
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv(c) => {
                let (h, w) = c.output_hw(input[1], input[2]);
                vec![c.out_channels, h, w]
            }
            Layer::BatchNorm(_) | Layer::Relu(_) => input.to_vec(),
            Layer::MaxPool(_) => vec![input[0], input[1] / 2, input[2] / 2],
            Layer::AvgPool(_) => vec![input[0]],
            Layer::Linear(l) => vec![l.out_features],
            Layer::Residual(res) => res.body.iter().fold(input.to_vec(), |s, l| l.output_shape(&s)),
        }
    }
}
