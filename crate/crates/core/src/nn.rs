//! Fully connected networks with ReLU hidden layers, manual backprop and Adam.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape (inputs, outputs).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization: weights and biases in ±1/sqrt(fan_in).
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|io| {
                let bound = 1.0 / (io[0] as f64).sqrt();
                let w = Array2::from_shape_fn((io[0], io[1]), |_| rng.random_range(-bound..bound));
                let b = Array1::from_shape_fn(io[1], |_| rng.random_range(-bound..bound));
                Dense { w, b }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    /// Multiplies the last layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(l) = self.layers.last_mut() {
            l.w *= factor;
            l.b *= factor;
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn param(&self, i: usize) -> f64 {
        *self.params().nth(i).expect("parameter index in range")
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        *self.params_mut().nth(i).expect("parameter index in range") = v;
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.w) + &l.b;
            if k < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let last = self.layers.len() - 1;
        let mut cache = Cache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(last) };
        let mut a = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.w) + &l.b;
            cache.inputs.push(a);
            if k < last {
                a = z.mapv(|v| v.max(0.0));
                cache.pre.push(z);
            } else {
                a = z;
            }
        }
        (a, cache)
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the outputs.
    /// Returns parameter gradients (shaped like `self`) and the input gradient.
    pub fn backward(&self, cache: &Cache, d_out: &Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let dw = cache.inputs[k].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            grads.push(Dense { w: dw, b: db });
            let mut da = dz.dot(&l.w.t());
            if k > 0 {
                da.zip_mut_with(&cache.pre[k - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            dz = da;
        }
        grads.reverse();
        (Mlp { layers: grads }, dz)
    }
}

/// φ_target ← ρ·φ_target + (1−ρ)·φ, elementwise.
pub fn polyak_update(target: &mut Mlp, main: &Mlp, rho: f64) {
    assert_eq!(target.sizes(), main.sizes(), "polyak shapes differ");
    for (t, &m) in target.params_mut().zip(main.params()) {
        *t = rho * *t + (1.0 - rho) * m;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: net.zeros_like(), v: net.zeros_like() }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, net: &mut Mlp, grad: &Mlp) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let it = net.params_mut().zip(grad.params()).zip(self.m.params_mut().zip(self.v.params_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
