//! Shared test support: an independent discrete pre-activation
//! ResNet-with-BN, implemented with plain f64 loops and hand-written
//! backpropagation. It shares no code with the library's tape, basis, or
//! integrator, and serves as the oracle for the reduction claim that an
//! Euler / piecewise-constant / K = N_T / dt = 1 ODE block computes exactly
//! this network.

#![allow(dead_code)]

pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ResnetLayerParams {
    pub bn1_scale: Vec<f64>,
    pub bn1_bias: Vec<f64>,
    pub dense1_kernel: Vec<f64>, // d*d, row-major: [in][out]
    pub dense1_bias: Vec<f64>,
    pub bn2_scale: Vec<f64>,
    pub bn2_bias: Vec<f64>,
    pub dense2_kernel: Vec<f64>,
    pub dense2_bias: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ResnetLayerState {
    pub bn1_mean: Vec<f64>,
    pub bn1_var: Vec<f64>,
    pub bn2_mean: Vec<f64>,
    pub bn2_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ResnetLayerGrads {
    pub bn1_scale: Vec<f64>,
    pub bn1_bias: Vec<f64>,
    pub dense1_kernel: Vec<f64>,
    pub dense1_bias: Vec<f64>,
    pub bn2_scale: Vec<f64>,
    pub bn2_bias: Vec<f64>,
    pub dense2_kernel: Vec<f64>,
    pub dense2_bias: Vec<f64>,
}

struct BnCache {
    x: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    xhat: Vec<f64>,
}

struct LayerCache {
    bn1: BnCache,
    y1: Vec<f64>, // pre-relu BN output
    a1: Vec<f64>, // post-relu
    bn2: BnCache,
    y2: Vec<f64>,
    a2: Vec<f64>,
}

fn batch_stats(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for r in 0..n {
        for c in 0..d {
            let diff = x[r * d + c] - mean[c];
            var[c] += diff * diff;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mean, var)
}

fn bn_forward(
    x: &[f64],
    n: usize,
    d: usize,
    scale: &[f64],
    bias: &[f64],
) -> (Vec<f64>, BnCache) {
    let (mean, var) = batch_stats(x, n, d);
    let mut xhat = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            let h = (x[r * d + c] - mean[c]) / (var[c] + EPS).sqrt();
            xhat[r * d + c] = h;
            y[r * d + c] = scale[c] * h + bias[c];
        }
    }
    let cache = BnCache {
        x: x.to_vec(),
        mean,
        var,
        xhat,
    };
    (y, cache)
}

/// Full train-mode BN backward: the batch mean and variance are functions of
/// x, so the gradient has the three classic terms.
fn bn_backward(
    dy: &[f64],
    cache: &BnCache,
    n: usize,
    d: usize,
    scale: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut dscale = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dx = vec![0.0; n * d];
    for c in 0..d {
        let inv_std = 1.0 / (cache.var[c] + EPS).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for r in 0..n {
            let g = dy[r * d + c];
            let h = cache.xhat[r * d + c];
            dscale[c] += g * h;
            dbias[c] += g;
            let dxhat = g * scale[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * h;
        }
        for r in 0..n {
            let dxhat = dy[r * d + c] * scale[c];
            dx[r * d + c] = inv_std / nf
                * (nf * dxhat - sum_dxhat - cache.xhat[r * d + c] * sum_dxhat_xhat);
        }
    }
    (dx, dscale, dbias)
}

fn dense_forward(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            let mut acc = b[j];
            for i in 0..d {
                acc += x[r * d + i] * w[i * d + j];
            }
            y[r * d + j] = acc;
        }
    }
    y
}

fn dense_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    d: usize,
    w: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * d];
    let mut dw = vec![0.0; d * d];
    let mut db = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            let g = dy[r * d + j];
            db[j] += g;
            for i in 0..d {
                dw[i * d + j] += x[r * d + i] * g;
                dx[r * d + i] += g * w[i * d + j];
            }
        }
    }
    (dx, dw, db)
}

fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn relu_backward(dy: &[f64], pre: &[f64]) -> Vec<f64> {
    dy.iter()
        .zip(pre)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect()
}

/// Forward/backward pass through the discrete network with loss
/// L = sum(x_out^2). Returns (x_out, per-layer parameter gradients,
/// per-layer EMA-updated running statistics).
pub fn resnet_reference(
    layers: &[ResnetLayerParams],
    states: &[ResnetLayerState],
    x0: &[f64],
    n: usize,
    d: usize,
    momentum: f64,
) -> (Vec<f64>, Vec<ResnetLayerGrads>, Vec<ResnetLayerState>) {
    assert_eq!(layers.len(), states.len());
    let mut x = x0.to_vec();
    let mut caches = Vec::with_capacity(layers.len());
    let mut new_states = Vec::with_capacity(layers.len());

    for (p, s) in layers.iter().zip(states) {
        let (y1, bn1) = bn_forward(&x, n, d, &p.bn1_scale, &p.bn1_bias);
        let a1 = relu_forward(&y1);
        let z1 = dense_forward(&a1, n, d, &p.dense1_kernel, &p.dense1_bias);
        let (y2, bn2) = bn_forward(&z1, n, d, &p.bn2_scale, &p.bn2_bias);
        let a2 = relu_forward(&y2);
        let z2 = dense_forward(&a2, n, d, &p.dense2_kernel, &p.dense2_bias);

        let ema = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, b)| momentum * o + (1.0 - momentum) * b)
                .collect()
        };
        new_states.push(ResnetLayerState {
            bn1_mean: ema(&s.bn1_mean, &bn1.mean),
            bn1_var: ema(&s.bn1_var, &bn1.var),
            bn2_mean: ema(&s.bn2_mean, &bn2.mean),
            bn2_var: ema(&s.bn2_var, &bn2.var),
        });

        let mut x_next = x.clone();
        for (xn, z) in x_next.iter_mut().zip(&z2) {
            *xn += z;
        }
        caches.push(LayerCache {
            bn1,
            y1,
            a1,
            bn2,
            y2,
            a2,
        });
        x = x_next;
    }

    // Backward from L = sum(x_out^2).
    let mut dx: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let mut grads_rev = Vec::with_capacity(layers.len());
    for (p, cache) in layers.iter().zip(&caches).rev() {
        // Residual add: d(branch output) = dx; dx also flows straight through.
        let (da2, dw2, db2) = dense_backward(&dx, &cache.a2, n, d, &p.dense2_kernel);
        let dy2 = relu_backward(&da2, &cache.y2);
        let (dz1, dg2, dbeta2) = bn_backward(&dy2, &cache.bn2, n, d, &p.bn2_scale);
        let (da1, dw1, db1) = dense_backward(&dz1, &cache.a1, n, d, &p.dense1_kernel);
        let dy1 = relu_backward(&da1, &cache.y1);
        let (dx_branch, dg1, dbeta1) = bn_backward(&dy1, &cache.bn1, n, d, &p.bn1_scale);
        for (acc, b) in dx.iter_mut().zip(&dx_branch) {
            *acc += b;
        }
        grads_rev.push(ResnetLayerGrads {
            bn1_scale: dg1,
            bn1_bias: dbeta1,
            dense1_kernel: dw1,
            dense1_bias: db1,
            bn2_scale: dg2,
            bn2_bias: dbeta2,
            dense2_kernel: dw2,
            dense2_bias: db2,
        });
    }
    grads_rev.reverse();
    (x, grads_rev, new_states)
}

/// Deterministic xorshift-based stream so the oracle does not depend on the
/// library's RNG choices.
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in (-0.5, 0.5).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }

    pub fn vec(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| self.next_f64() * scale).collect()
    }
}

pub fn random_layer(rng: &mut SplitMix64, d: usize) -> ResnetLayerParams {
    ResnetLayerParams {
        bn1_scale: (0..d).map(|_| 1.0 + 0.3 * rng.next_f64()).collect(),
        bn1_bias: rng.vec(d, 0.4),
        dense1_kernel: rng.vec(d * d, (2.0 / d as f64).sqrt()),
        dense1_bias: rng.vec(d, 0.2),
        bn2_scale: (0..d).map(|_| 1.0 + 0.3 * rng.next_f64()).collect(),
        bn2_bias: rng.vec(d, 0.4),
        dense2_kernel: rng.vec(d * d, (2.0 / d as f64).sqrt()),
        dense2_bias: rng.vec(d, 0.2),
    }
}

pub fn default_state(d: usize) -> ResnetLayerState {
    ResnetLayerState {
        bn1_mean: vec![0.0; d],
        bn1_var: vec![1.0; d],
        bn2_mean: vec![0.0; d],
        bn2_var: vec![1.0; d],
    }
}
