//! Minimal 3x3 convolutional stacks with hand-written backpropagation.
//!
//! Feature maps are flat `[channel][row][col]` slices, the same layout as a
//! standard-order `Array3`. All parameters of a network live in one flat
//! vector so optimisers and parameter files can treat them uniformly.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    pub fn code(self) -> u16 {
        match self {
            Activation::Tanh => 1,
            Activation::Silu => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Silu),
            3 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Stack of stride-1, zero-padded 3x3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    channels: Vec<usize>,
    hidden: Activation,
    output: Option<Activation>,
    params: Vec<f64>,
}

/// Activations retained from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    height: usize,
    width: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl ConvNet {
    /// All-zero parameters.
    pub fn zeros(channels: &[usize], hidden: Activation, output: Option<Activation>) -> Self {
        assert!(channels.len() >= 2, "a network needs at least one layer");
        let count = channels
            .windows(2)
            .map(|w| w[1] * w[0] * 9 + w[1])
            .sum();
        Self {
            channels: channels.to_vec(),
            hidden,
            output,
            params: vec![0.0; count],
        }
    }

    /// Variance-scaled normal weights, zero biases. `final_scale` multiplies the
    /// last layer's weights (0 gives a zero-output network).
    pub fn init<R: Rng + ?Sized>(
        channels: &[usize],
        hidden: Activation,
        output: Option<Activation>,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(channels, hidden, output);
        let layers = net.layers();
        for l in 0..layers {
            let fan_in = (net.channels[l] * 9) as f64;
            let gain = match hidden {
                Activation::Silu => 2.0,
                _ => 1.0,
            };
            let mut std = (gain / fan_in).sqrt();
            if l + 1 == layers {
                std *= final_scale;
            }
            let (w0, w1) = net.weight_range(l);
            for p in &mut net.params[w0..w1] {
                let z: f64 = rng.sample(StandardNormal);
                *p = std * z;
            }
        }
        net
    }

    pub fn from_parts(
        channels: Vec<usize>,
        hidden: Activation,
        output: Option<Activation>,
        params: Vec<f64>,
    ) -> Option<Self> {
        let expected = Self::zeros(&channels, hidden, output);
        (expected.params.len() == params.len()).then_some(Self {
            channels,
            hidden,
            output,
            params,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Option<Activation> {
        self.output
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.channels[..=layer]
            .windows(2)
            .map(|w| w[1] * w[0] * 9 + w[1])
            .sum()
    }

    /// Parameter index range of a layer's weights.
    pub fn weight_range(&self, layer: usize) -> (usize, usize) {
        let start = self.layer_offset(layer);
        let (cin, cout) = (self.channels[layer], self.channels[layer + 1]);
        (start, start + cin * cout * 9)
    }

    /// Parameter index range of a layer's biases.
    pub fn bias_range(&self, layer: usize) -> (usize, usize) {
        let (_, w1) = self.weight_range(layer);
        (w1, w1 + self.channels[layer + 1])
    }

    fn activation_for(&self, layer: usize) -> Option<Activation> {
        if layer + 1 == self.layers() {
            self.output
        } else {
            Some(self.hidden)
        }
    }

    pub fn forward(&self, input: &[f64], height: usize, width: usize) -> Vec<f64> {
        self.forward_cached(input, height, width).0
    }

    pub fn forward_cached(&self, input: &[f64], height: usize, width: usize) -> (Vec<f64>, ConvCache) {
        let plane = height * width;
        assert_eq!(input.len(), self.in_channels() * plane, "input size");
        let mut cache = ConvCache {
            height,
            width,
            inputs: Vec::with_capacity(self.layers()),
            pre: Vec::with_capacity(self.layers()),
        };
        let mut current = input.to_vec();
        for l in 0..self.layers() {
            let (w0, w1) = self.weight_range(l);
            let (b0, b1) = self.bias_range(l);
            let mut out = vec![0.0; self.channels[l + 1] * plane];
            conv_forward(
                &current,
                &self.params[w0..w1],
                &self.params[b0..b1],
                self.channels[l],
                self.channels[l + 1],
                height,
                width,
                &mut out,
            );
            let act = self.activation_for(l);
            let post = match act {
                Some(a) => out.iter().map(|&v| a.apply(v)).collect(),
                None => out.clone(),
            };
            cache.inputs.push(std::mem::replace(&mut current, post));
            cache.pre.push(out);
        }
        (current, cache)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, cache: &ConvCache, grad_output: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad_params.len(), self.params.len());
        let (height, width) = (cache.height, cache.width);
        let mut grad = grad_output.to_vec();
        for l in (0..self.layers()).rev() {
            if let Some(a) = self.activation_for(l) {
                for (g, &x) in grad.iter_mut().zip(&cache.pre[l]) {
                    *g *= a.derivative(x);
                }
            }
            let (w0, w1) = self.weight_range(l);
            let (b0, b1) = self.bias_range(l);
            let mut grad_in = vec![0.0; self.channels[l] * height * width];
            let (gw, gb) = grad_params[w0..b1].split_at_mut(w1 - w0);
            debug_assert_eq!(gb.len(), b1 - b0);
            conv_backward(
                &cache.inputs[l],
                &self.params[w0..w1],
                &grad,
                self.channels[l],
                self.channels[l + 1],
                height,
                width,
                &mut grad_in,
                gw,
                gb,
            );
            grad = grad_in;
        }
        grad
    }
}

#[inline]
fn tap_bounds(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)) as usize;
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    out: &mut [f64],
) {
    let plane = height * width;
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let k = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_bounds(dy, height);
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_bounds(dx, width);
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * width;
                        let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let dst = &mut out_plane[y * width + x0..y * width + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    grad_in: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let plane = height * width;
    for o in 0..cout {
        let g_plane = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] += g_plane.iter().sum::<f64>();
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let gi_plane = &mut grad_in[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_bounds(dy, height);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_bounds(dx, width);
                    let wv = weight[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_start = ((y as isize + dy) as usize * width) as isize + x0 as isize + dx;
                        let len = x1 - x0;
                        let src = &in_plane[src_start as usize..src_start as usize + len];
                        let g = &g_plane[y * width + x0..y * width + x1];
                        let gi = &mut gi_plane[src_start as usize..src_start as usize + len];
                        for ((gv, sv), giv) in g.iter().zip(src).zip(gi.iter_mut()) {
                            acc += gv * sv;
                            *giv += wv * gv;
                        }
                    }
                    grad_w[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel convolution used as an oracle.
    fn naive_conv(input: &[f64], weight: &[f64], bias: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let yy = y as isize + ky as isize - 1;
                                let xx = x as isize + kx as isize - 1;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * cin + i) * 3 + ky) * 3 + kx]
                                    * input[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ConvNet::init(&[2, 3], Activation::Tanh, None, 1.0, &mut rng);
        let (h, w) = (5, 4);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
        let out = net.forward(&input, h, w);
        let (w0, w1) = net.weight_range(0);
        let (b0, b1) = net.bias_range(0);
        let expected = naive_conv(&input, &net.params()[w0..w1], &net.params()[b0..b1], 2, 3, h, w);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (hidden, output) in [
            (Activation::Tanh, Some(Activation::Sigmoid)),
            (Activation::Silu, None),
        ] {
            let net = ConvNet::init(&[3, 4, 2], hidden, output, 1.0, &mut rng);
            let (h, w) = (4, 5);
            let input: Vec<f64> = (0..3 * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
            let probe: Vec<f64> = (0..2 * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
            let loss = |n: &ConvNet, x: &[f64]| -> f64 {
                n.forward(x, h, w).iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = net.forward_cached(&input, h, w);
            let mut grad = vec![0.0; net.params().len()];
            let grad_in = net.backward(&cache, &probe, &mut grad);
            let eps = 1e-6;
            for idx in (0..net.params().len()).step_by(7) {
                let mut plus = net.clone();
                plus.params_mut()[idx] += eps;
                let mut minus = net.clone();
                minus.params_mut()[idx] -= eps;
                let fd = (loss(&plus, &input) - loss(&minus, &input)) / (2.0 * eps);
                assert!((fd - grad[idx]).abs() < 1e-7, "param {idx}: {fd} vs {}", grad[idx]);
            }
            for idx in (0..input.len()).step_by(5) {
                let mut xp = input.clone();
                xp[idx] += eps;
                let mut xm = input.clone();
                xm[idx] -= eps;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
                assert!((fd - grad_in[idx]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_network_outputs_activation_of_zero() {
        let net = ConvNet::zeros(&[5, 8, 16, 2], Activation::Tanh, Some(Activation::Sigmoid));
        let out = net.forward(&vec![0.3; 5 * 3 * 3], 3, 3);
        assert!(out.iter().all(|&v| v == 0.5));
    }
}
