use rand::Rng;

use super::{gemm, Param, Real, Tensor};

/// Geometry of a strided 2-D window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    k: usize,
    s: usize,
    p: usize,
}

impl Window {
    /// Output extent of a convolution over an input of extent `len`.
    fn conv_out(&self, len: usize) -> usize {
        (len + 2 * self.p - self.k) / self.s + 1
    }

    /// Output extent of a transposed convolution over an input of extent `len`.
    fn deconv_out(&self, len: usize) -> usize {
        (len - 1) * self.s + self.k - 2 * self.p
    }
}

/// Lower an image batch `[c, n, h, w]` to columns `[c*k*k, n*oh*ow]`.
fn im2col<F: Real>(x: &Tensor<F>, win: Window, oh: usize, ow: usize) -> Vec<F> {
    let Window { k, s, p } = win;
    let ncol = x.n * oh * ow;
    let mut cols = vec![F::zero(); x.c * k * k * ncol];
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for ni in 0..x.n {
                    let src = x.sample_plane(ci, ni);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns `[c*k*k, n*oh*ow]` back onto an image batch `[c, n, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(cols: &[F], c: usize, n: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Tensor<F> {
    let Window { k, s, p } = win;
    let ncol = n * oh * ow;
    let mut out = Tensor::zeros(c, n, h, w);
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for ni in 0..n {
                    let dst = &mut out.data[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                        for (ox, v) in src_row.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_channel_bias<F: Real>(t: &mut Tensor<F>, bias: &[F]) {
    let per = t.n * t.plane();
    for (ci, chunk) in t.data.chunks_mut(per).enumerate() {
        let b = bias[ci];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<F: Real>(t: &Tensor<F>, acc: &mut [F]) {
    let per = t.n * t.plane();
    for (ci, chunk) in t.data.chunks(per).enumerate() {
        acc[ci] += chunk.iter().copied().sum::<F>();
    }
}

/// 2-D convolution, weight layout `[cout, cin, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub cin: usize,
    pub cout: usize,
    win: Window,
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<(Vec<F>, usize, usize, usize)>,
}

impl<F: Real> Conv2d<F> {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            cin,
            cout,
            win: Window { k, s, p },
            weight: Param::uniform(format!("{prefix}.weight"), vec![cout, cin, k, k], fan_in, rng),
            bias: Param::uniform(format!("{prefix}.bias"), vec![cout], fan_in, rng),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<F>) -> (Tensor<F>, Vec<F>) {
        assert_eq!(x.c, self.cin, "conv2d: input channel mismatch");
        let (oh, ow) = (self.win.conv_out(x.h), self.win.conv_out(x.w));
        let cols = im2col(x, self.win, oh, ow);
        let kk = self.cin * self.win.k * self.win.k;
        let ncol = x.n * oh * ow;
        let mut out = Tensor::zeros(self.cout, x.n, oh, ow);
        gemm(self.cout, kk, ncol, &self.weight.value, false, &cols, false, &mut out.data, false);
        add_channel_bias(&mut out, &self.bias.value);
        (out, cols)
    }

    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        self.run(x).0
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let (out, cols) = self.run(x);
        self.cache = Some((cols, x.n, x.h, x.w));
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (cols, n, h, w) = self.cache.take().expect("conv2d: backward without forward");
        let kk = self.cin * self.win.k * self.win.k;
        let ncol = n * dy.h * dy.w;
        gemm(self.cout, ncol, kk, &dy.data, false, &cols, true, &mut self.weight.grad, true);
        channel_sums(dy, &mut self.bias.grad);
        let mut dcols = vec![F::zero(); kk * ncol];
        gemm(kk, self.cout, ncol, &self.weight.value, true, &dy.data, false, &mut dcols, false);
        col2im(&dcols, self.cin, n, h, w, self.win, dy.h, dy.w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
}

/// 2-D transposed convolution, weight layout `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<F> {
    pub cin: usize,
    pub cout: usize,
    win: Window,
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Tensor<F>>,
}

impl<F: Real> ConvTranspose2d<F> {
    pub fn new(prefix: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut impl Rng) -> Self {
        // torch computes fan_in from dim 1 of the weight for transposed convs
        let fan_in = cout * k * k;
        ConvTranspose2d {
            cin,
            cout,
            win: Window { k, s, p },
            weight: Param::uniform(format!("{prefix}.weight"), vec![cin, cout, k, k], fan_in, rng),
            bias: Param::uniform(format!("{prefix}.bias"), vec![cout], fan_in, rng),
            cache: None,
        }
    }

    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.cin, "conv_transpose2d: input channel mismatch");
        let (oh, ow) = (self.win.deconv_out(x.h), self.win.deconv_out(x.w));
        let kk = self.cout * self.win.k * self.win.k;
        let ncol = x.n * x.h * x.w;
        let mut cols = vec![F::zero(); kk * ncol];
        gemm(kk, self.cin, ncol, &self.weight.value, true, &x.data, false, &mut cols, false);
        let mut out = col2im(&cols, self.cout, x.n, oh, ow, self.win, x.h, x.w);
        add_channel_bias(&mut out, &self.bias.value);
        out
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let out = self.eval(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.cache.take().expect("conv_transpose2d: backward without forward");
        let kk = self.cout * self.win.k * self.win.k;
        let ncol = x.n * x.h * x.w;
        let dcols = im2col(dy, self.win, x.h, x.w);
        gemm(self.cin, ncol, kk, &x.data, false, &dcols, true, &mut self.weight.grad, true);
        channel_sums(dy, &mut self.bias.grad);
        let mut dx = Tensor::zeros(self.cin, x.n, x.h, x.w);
        gemm(self.cin, kk, ncol, &self.weight.value, false, &dcols, false, &mut dx.data, false);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
}

/// Fully connected layer over `[fin, n, 1, 1]` activations, weight layout `[fout, fin]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub fin: usize,
    pub fout: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Tensor<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(prefix: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Linear {
            fin,
            fout,
            weight: Param::uniform(format!("{prefix}.weight"), vec![fout, fin], fin, rng),
            bias: Param::uniform(format!("{prefix}.bias"), vec![fout], fin, rng),
            cache: None,
        }
    }

    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c * x.plane(), self.fin, "linear: feature size mismatch");
        let mut out = Tensor::zeros(self.fout, x.n, 1, 1);
        gemm(self.fout, self.fin, x.n, &self.weight.value, false, &x.data, false, &mut out.data, false);
        add_channel_bias(&mut out, &self.bias.value);
        out
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let out = self.eval(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.cache.take().expect("linear: backward without forward");
        gemm(self.fout, x.n, self.fin, &dy.data, false, &x.data, true, &mut self.weight.grad, true);
        channel_sums(dy, &mut self.bias.grad);
        let mut dx = Tensor::zeros(self.fin, x.n, 1, 1);
        gemm(self.fin, self.fout, x.n, &self.weight.value, true, &dy.data, false, &mut dx.data, false);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
}

/// Per-channel batch normalization. Training uses batch statistics and updates the running
/// estimates with momentum 0.1 (unbiased variance); evaluation uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub channels: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    eps: F,
    momentum: F,
    cache: Option<(Vec<F>, Vec<F>)>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(format!("{prefix}.gamma"), vec![channels], 1.0, true),
            beta: Param::filled(format!("{prefix}.beta"), vec![channels], 0.0, true),
            running_mean: Param::filled(format!("{prefix}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::filled(format!("{prefix}.running_var"), vec![channels], 1.0, false),
            eps: F::lit(1e-5),
            momentum: F::lit(0.1),
            cache: None,
        }
    }

    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.channels, "batchnorm: channel mismatch");
        let per = x.n * x.plane();
        let mut out = x.clone();
        for (ci, chunk) in out.data.chunks_mut(per).enumerate() {
            let inv = (self.running_var.value[ci] + self.eps).sqrt().recip();
            let scale = self.gamma.value[ci] * inv;
            let shift = self.beta.value[ci] - self.running_mean.value[ci] * scale;
            chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        out
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.channels, "batchnorm: channel mismatch");
        let per = x.n * x.plane();
        let m = F::from_usize(per).unwrap();
        let mut out = x.clone();
        let mut xhat = vec![F::zero(); x.data.len()];
        let mut inv_std = vec![F::zero(); self.channels];
        for ci in 0..self.channels {
            let src = &x.data[ci * per..(ci + 1) * per];
            let mean = src.iter().copied().sum::<F>() / m;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / m;
            let inv = (var + self.eps).sqrt().recip();
            inv_std[ci] = inv;
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            let xh = &mut xhat[ci * per..(ci + 1) * per];
            let dst = &mut out.data[ci * per..(ci + 1) * per];
            for ((d, h), v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                *h = (*v - mean) * inv;
                *d = *h * g + b;
            }
            let unbiased = if per > 1 { var * m / (m - F::one()) } else { var };
            let mom = self.momentum;
            let rm = &mut self.running_mean.value[ci];
            *rm = (F::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.value[ci];
            *rv = (F::one() - mom) * *rv + mom * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm: backward without forward");
        let per = dy.n * dy.plane();
        let m = F::from_usize(per).unwrap();
        let mut dx = dy.clone();
        for ci in 0..self.channels {
            let g = &dy.data[ci * per..(ci + 1) * per];
            let xh = &xhat[ci * per..(ci + 1) * per];
            let sum_g = g.iter().copied().sum::<F>();
            let sum_gx = g.iter().zip(xh).map(|(a, b)| *a * *b).sum::<F>();
            self.gamma.grad[ci] += sum_gx;
            self.beta.grad[ci] += sum_g;
            let k = self.gamma.value[ci] * inv_std[ci] / m;
            let dst = &mut dx.data[ci * per..(ci + 1) * per];
            for ((d, gv), h) in dst.iter_mut().zip(g).zip(xh) {
                *d = k * (m * *gv - sum_g - *h * sum_gx);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
}

/// The linear operator at the head of a [`Block`].
#[derive(Clone, Debug)]
pub enum Op<F> {
    Conv(Conv2d<F>),
    Deconv(ConvTranspose2d<F>),
    Linear(Linear<F>),
}

impl<F: Real> Op<F> {
    fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Op::Conv(l) => l.eval(x),
            Op::Deconv(l) => l.eval(x),
            Op::Linear(l) => l.eval(x),
        }
    }

    fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Op::Conv(l) => l.train_forward(x),
            Op::Deconv(l) => l.train_forward(x),
            Op::Linear(l) => l.train_forward(x),
        }
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        match self {
            Op::Conv(l) => l.backward(dy),
            Op::Deconv(l) => l.backward(dy),
            Op::Linear(l) => l.backward(dy),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        match self {
            Op::Conv(l) => l.params_mut(),
            Op::Deconv(l) => l.params_mut(),
            Op::Linear(l) => l.params_mut(),
        }
    }

    fn params(&self) -> Vec<&Param<F>> {
        match self {
            Op::Conv(l) => l.params(),
            Op::Deconv(l) => l.params(),
            Op::Linear(l) => l.params(),
        }
    }
}

/// `op -> [batch-norm] -> [ReLU]`.
#[derive(Clone, Debug)]
pub struct Block<F> {
    pub op: Op<F>,
    pub bn: Option<BatchNorm<F>>,
    pub relu: bool,
    mask: Vec<bool>,
}

impl<F: Real> Block<F> {
    pub fn new(op: Op<F>, bn: Option<BatchNorm<F>>, relu: bool) -> Self {
        Block { op, bn, relu, mask: Vec::new() }
    }

    pub fn eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut y = self.op.eval(x);
        if let Some(bn) = &self.bn {
            y = bn.eval(&y);
        }
        if self.relu {
            y.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
        }
        y
    }

    pub fn train_forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut y = self.op.train_forward(x);
        if let Some(bn) = &mut self.bn {
            y = bn.train_forward(&y);
        }
        if self.relu {
            self.mask = y.data.iter().map(|v| *v > F::zero()).collect();
            y.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let mut g = dy.clone();
        if self.relu {
            for (v, keep) in g.data.iter_mut().zip(&self.mask) {
                if !keep {
                    *v = F::zero();
                }
            }
        }
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g);
        }
        self.op.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.op.params_mut();
        if let Some(bn) = &mut self.bn {
            p.extend(bn.params_mut());
        }
        p
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.op.params();
        if let Some(bn) = &self.bn {
            p.extend(bn.params());
        }
        p
    }
}
