use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, GradScope};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride-1 convolution with odd square kernel and "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × (in·k·k)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Option<Vec<f64>>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let wlen = out_channels * in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; wlen],
            bias: bias.then(|| vec![0.0; out_channels]),
            grad_weight: vec![0.0; wlen],
            grad_bias: bias.then(|| vec![0.0; out_channels]),
            input: None,
        }
    }

    /// He-normal weights, zero bias.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut self.weight {
            *w = normal.sample(rng);
        }
        if let Some(b) = &mut self.bias {
            b.fill(0.0);
        }
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let plane = h * w;
        let rows = self.col_rows();
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut col = vec![0.0; if self.kernel == 1 { 0 } else { rows * plane }];
        for i in 0..n {
            let src: &[f64] = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, &mut col);
                &col
            };
            let dst = out.item_mut(i);
            if let Some(bias) = &self.bias {
                for (o, b) in bias.iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].fill(*b);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            gemm(
                self.out_channels,
                rows,
                plane,
                &self.weight,
                false,
                src,
                false,
                beta,
                dst,
            );
        }
        self.input = record.then(|| x.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients (when `scope` allows) and returns the
    /// input gradient when `need_input_grad`.
    pub fn backward(
        &mut self,
        dy: &Tensor,
        scope: GradScope,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("conv backward without recorded forward".into()))?;
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let rows = self.col_rows();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        let mut col = vec![0.0; if self.kernel == 1 { 0 } else { rows * plane }];
        let mut dcol = vec![0.0; rows * plane];
        for i in 0..n {
            let g = dy.item(i);
            if scope.conv() {
                let src: &[f64] = if self.kernel == 1 {
                    x.item(i)
                } else {
                    im2col(x.item(i), c, h, w, self.kernel, &mut col);
                    &col
                };
                gemm(
                    self.out_channels,
                    plane,
                    rows,
                    g,
                    false,
                    src,
                    true,
                    1.0,
                    &mut self.grad_weight,
                );
                if let Some(gb) = &mut self.grad_bias {
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
            if let Some(dx) = &mut dx {
                if self.kernel == 1 {
                    gemm(
                        rows,
                        self.out_channels,
                        plane,
                        &self.weight,
                        true,
                        g,
                        false,
                        0.0,
                        dx.item_mut(i),
                    );
                } else {
                    gemm(
                        rows,
                        self.out_channels,
                        plane,
                        &self.weight,
                        true,
                        g,
                        false,
                        0.0,
                        &mut dcol,
                    );
                    col2im(&dcol, c, h, w, self.kernel, dx.item_mut(i));
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        if let Some(g) = &mut self.grad_bias {
            g.fill(0.0);
        }
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let chan = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &chan[sy as usize * w..(sy as usize + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    drow[..lo.min(w)].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                    }
                    drow[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let chan = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let srow = &src[y * w + lo..y * w + hi];
                    let drow = &mut chan[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out·4) × in`, row index `o*4 + dy*2 + dx`.
    pub weight: Vec<f64>,
    pub grad_weight: Vec<f64>,
    input: Option<Tensor>,
}

impl ConvTranspose2x2 {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        let len = out_channels * 4 * in_channels;
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; len],
            grad_weight: vec![0.0; len],
            input: None,
        }
    }

    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, (2.0 / self.in_channels as f64).sqrt()).expect("valid std");
        for w in &mut self.weight {
            *w = normal.sample(rng);
        }
    }

    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "up-convolution expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let plane = h * w;
        let rows = self.out_channels * 4;
        let mut z = vec![0.0; rows * plane];
        let mut out = Tensor::zeros([n, self.out_channels, 2 * h, 2 * w]);
        for i in 0..n {
            gemm(rows, c, plane, &self.weight, false, x.item(i), false, 0.0, &mut z);
            let dst = out.item_mut(i);
            for o in 0..self.out_channels {
                for q in 0..4 {
                    let (dy, dx) = (q / 2, q % 2);
                    let src = &z[(o * 4 + q) * plane..(o * 4 + q + 1) * plane];
                    for y in 0..h {
                        let base = o * 4 * plane + (2 * y + dy) * 2 * w + dx;
                        for xx in 0..w {
                            dst[base + 2 * xx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
        self.input = record.then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor, scope: GradScope) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("up-convolution backward without forward".into()))?;
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let rows = self.out_channels * 4;
        let mut dz = vec![0.0; rows * plane];
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let g = dy.item(i);
            for o in 0..self.out_channels {
                for q in 0..4 {
                    let (oy, ox) = (q / 2, q % 2);
                    let dst = &mut dz[(o * 4 + q) * plane..(o * 4 + q + 1) * plane];
                    for y in 0..h {
                        let base = o * 4 * plane + (2 * y + oy) * 2 * w + ox;
                        for xx in 0..w {
                            dst[y * w + xx] = g[base + 2 * xx];
                        }
                    }
                }
            }
            if scope.conv() {
                gemm(rows, plane, c, &dz, false, x.item(i), true, 1.0, &mut self.grad_weight);
            }
            gemm(c, rows, plane, &self.weight, true, &dz, false, 0.0, dx.item_mut(i));
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let [n, c, h, w] = x.shape();
        let k = conv.kernel;
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for i in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight[((o * c + ci) * k + ky) * k + kx]
                                        * x.channel(i, ci)[sy as usize * w + sx as usize];
                                }
                            }
                        }
                        out.channel_mut(i, o)[y * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv3x3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, true);
        conv.init_kaiming(&mut rng);
        conv.bias = Some(vec![0.1, -0.2, 0.3]);
        let x = random_tensor([2, 2, 5, 4], &mut rng);
        let y = conv.forward(&x, false).unwrap();
        let reference = direct_conv(&x, &conv);
        for (a, b) in y.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 2, 3, true);
        conv.init_kaiming(&mut rng);
        let x = random_tensor([2, 2, 4, 3], &mut rng);
        let r = random_tensor([2, 2, 4, 3], &mut rng);
        let loss = |conv: &mut Conv2d, x: &Tensor| -> f64 {
            let y = conv.forward(x, false).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        conv.forward(&x, true).unwrap();
        let dx = conv.backward(&r, GradScope::All, true).unwrap().unwrap();
        let h = 1e-6;
        for idx in [0, 5, 11, 17, 30] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7, "dx[{idx}]");
        }
        let gw = conv.grad_weight.clone();
        for idx in [0, 7, 20, 35] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight[idx] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight[idx] = orig;
            assert!(((lp - lm) / (2.0 * h) - gw[idx]).abs() < 1e-7, "dw[{idx}]");
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut up = ConvTranspose2x2::new(3, 2);
        up.init_kaiming(&mut rng);
        let x = random_tensor([1, 3, 2, 3], &mut rng);
        let r = random_tensor([1, 2, 4, 6], &mut rng);
        let loss = |up: &mut ConvTranspose2x2, x: &Tensor| -> f64 {
            let y = up.forward(x, false).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        up.forward(&x, true).unwrap();
        let dx = up.backward(&r, GradScope::All).unwrap();
        let h = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&mut up, &xp) - loss(&mut up, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
        let gw = up.grad_weight.clone();
        for idx in [0, 4, 13, 23] {
            let orig = up.weight[idx];
            up.weight[idx] = orig + h;
            let lp = loss(&mut up, &x);
            up.weight[idx] = orig - h;
            let lm = loss(&mut up, &x);
            up.weight[idx] = orig;
            assert!(((lp - lm) / (2.0 * h) - gw[idx]).abs() < 1e-7);
        }
    }
}
