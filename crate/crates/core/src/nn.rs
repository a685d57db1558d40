//! Dense networks with hand-written reverse mode, the three-component mixture
//! density head, Adam, and a checksummed binary checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const COMPONENTS: usize = 3;
pub const ACTION_DIM: usize = 2;
/// Actor outputs: 6 means then 6 variances, component-major within each dim.
pub const ACTOR_OUT: usize = 2 * COMPONENTS * ACTION_DIM;
pub const VAR_CAP: f64 = 1.0 / 16.0;
/// Densities use at least this variance so that logs stay finite.
pub const VAR_FLOOR: f64 = 1e-12;
pub const ENTROPY_DRAWS: usize = 64;
const ENTROPY_SEED: u64 = 0x5eed_e470;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Softsign,
    /// `(1/16) * sigmoid(3x)`.
    Variance,
    Softmax,
    /// Softsign on the first half of the outputs, `Variance` on the rest.
    MdnHead,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Softsign => 2,
            Activation::Variance => 3,
            Activation::Softmax => 4,
            Activation::MdnHead => 5,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::Softsign,
            3 => Activation::Variance,
            4 => Activation::Softmax,
            5 => Activation::MdnHead,
            _ => return None,
        })
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

pub fn variance_act(x: f64) -> f64 {
    VAR_CAP / (1.0 + (-3.0 * x).exp())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Applies `act` to each row of a `rows x width` block.
fn activate(act: Activation, z: &mut [f64], width: usize) {
    match act {
        Activation::Linear => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = relu(*v)),
        Activation::Softsign => z.iter_mut().for_each(|v| *v = softsign(*v)),
        Activation::Variance => z.iter_mut().for_each(|v| *v = variance_act(*v)),
        Activation::Softmax => z.chunks_mut(width).for_each(softmax_in_place),
        Activation::MdnHead => {
            let half = width / 2;
            for row in z.chunks_mut(width) {
                row[..half].iter_mut().for_each(|v| *v = softsign(*v));
                row[half..].iter_mut().for_each(|v| *v = variance_act(*v));
            }
        }
    }
}

/// Turns `dy` (gradient w.r.t. activations `y`) into the pre-activation gradient.
fn activate_backward(act: Activation, y: &[f64], dy: &mut [f64], width: usize) {
    let softsign_d = |y: f64| (1.0 - y.abs()).powi(2);
    let variance_d = |y: f64| 3.0 * y * (1.0 - y / VAR_CAP);
    match act {
        Activation::Linear => {}
        Activation::Relu => dy.iter_mut().zip(y).for_each(|(d, y)| {
            if *y <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::Softsign => dy.iter_mut().zip(y).for_each(|(d, y)| *d *= softsign_d(*y)),
        Activation::Variance => dy.iter_mut().zip(y).for_each(|(d, y)| *d *= variance_d(*y)),
        Activation::Softmax => {
            for (d, y) in dy.chunks_mut(width).zip(y.chunks(width)) {
                let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                d.iter_mut().zip(y).for_each(|(d, y)| *d = y * (*d - dot));
            }
        }
        Activation::MdnHead => {
            let half = width / 2;
            for (d, y) in dy.chunks_mut(width).zip(y.chunks(width)) {
                for i in 0..width {
                    d[i] *= if i < half { softsign_d(y[i]) } else { variance_d(y[i]) };
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the given
    // dimensions and strides; `c` is row-major with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub input: usize,
    pub output: usize,
    /// Row-major `output x input`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Intermediates kept by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub batch: usize,
    /// Layer inputs, then the final output as the last entry.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }
}

/// Parameter-shaped gradient (or Adam moment) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }

    pub fn add_scaled(&mut self, o: &Grads, k: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&o.layers) {
            w.iter_mut().zip(ow).for_each(|(a, b)| *a += k * b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += k * b);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

impl DenseNet {
    /// He-initialized weights, zero biases. `dims` lists every layer width
    /// including input and output.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, out: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "a net needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).expect("positive std");
                Layer {
                    input: d[0],
                    output: d[1],
                    w: (0..d[0] * d[1]).map(|_| normal.sample(rng)).collect(),
                    b: vec![0.0; d[1]],
                    act: if i + 2 == dims.len() { out } else { hidden },
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.output))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut it = p.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().expect("length checked"));
        }
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: batch * self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(l: &Layer, x: &[f64], batch: usize) -> Vec<f64> {
        let mut z: Vec<f64> = l.b.iter().copied().cycle().take(batch * l.output).collect();
        gemm(batch, l.input, l.output, x, l.input as isize, 1, &l.w, 1, l.input as isize, 1.0, &mut z);
        activate(l.act, &mut z, l.output);
        z
    }

    /// Batched forward pass over `batch` row-major inputs, keeping a tape.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Tape> {
        self.check_input(x, batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let y = Self::layer_forward(l, acts.last().expect("nonempty"), batch);
            acts.push(y);
        }
        Ok(Tape { batch, acts })
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let mut cur = std::borrow::Cow::Borrowed(x);
        for l in &self.layers {
            cur = std::borrow::Cow::Owned(Self::layer_forward(l, &cur, batch));
        }
        Ok(cur.into_owned())
    }

    /// Parameter gradients given `dy`, the loss gradient w.r.t. the outputs.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<Grads> {
        let batch = tape.batch;
        if dy.len() != batch * self.output_dim() {
            return Err(Error::Dimension {
                what: "output gradient",
                expected: batch * self.output_dim(),
                got: dy.len(),
            });
        }
        let mut grads = Grads::zeros_like(self);
        let mut d = dy.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            activate_backward(l.act, &tape.acts[i + 1], &mut d, l.output);
            let x = &tape.acts[i];
            let (gw, gb) = &mut grads.layers[i];
            // dW = dZ^T X
            gemm(l.output, batch, l.input, &d, 1, l.output as isize, x, l.input as isize, 1, 0.0, gw);
            for row in d.chunks(l.output) {
                gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient in layer {i}")));
            }
            if i > 0 {
                let mut dx = vec![0.0; batch * l.input];
                gemm(batch, l.output, l.input, &d, l.output as isize, 1, &l.w, l.input as isize, 1, 0.0, &mut dx);
                d = dx;
            }
        }
        Ok(grads)
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        AdamState {
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            t: 0,
        }
    }
}

/// One descent step on `net`.
pub fn adam_step(net: &mut DenseNet, g: &Grads, st: &mut AdamState, cfg: &AdamConfig) {
    st.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(st.t as i32);
    for (i, l) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &g.layers[i];
        let (mw, mb) = &mut st.m.layers[i];
        let (vw, vb) = &mut st.v.layers[i];
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                p[j] -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        };
        upd(&mut l.w, gw, mw, vw);
        upd(&mut l.b, gb, mb, vb);
    }
}

/// Mixture of three diagonal Gaussians over (steering, torque).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdnDistribution {
    pub alpha: [f64; COMPONENTS],
    pub mu: [[f64; ACTION_DIM]; COMPONENTS],
    /// Variances (not standard deviations).
    pub var: [[f64; ACTION_DIM]; COMPONENTS],
}

/// Per-distribution constants shared by repeated density evaluations.
struct Cache {
    ln_norm: [f64; COMPONENTS],
    inv_var: [[f64; ACTION_DIM]; COMPONENTS],
    ln_alpha: [f64; COMPONENTS],
}

/// Gradient of a scalar w.r.t. the mixture parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MdnGrad {
    pub alpha: [f64; COMPONENTS],
    pub mu: [[f64; ACTION_DIM]; COMPONENTS],
    pub var: [[f64; ACTION_DIM]; COMPONENTS],
}

impl MdnGrad {
    fn add_scaled(&mut self, o: &MdnGrad, k: f64) {
        for c in 0..COMPONENTS {
            self.alpha[c] += k * o.alpha[c];
            for d in 0..ACTION_DIM {
                self.mu[c][d] += k * o.mu[c][d];
                self.var[c][d] += k * o.var[c][d];
            }
        }
    }

    /// Splits into actor-output and mixing-output gradients.
    pub fn to_outputs(&self, var_clamped: &[[bool; ACTION_DIM]; COMPONENTS]) -> ([f64; ACTOR_OUT], [f64; COMPONENTS]) {
        let mut a = [0.0; ACTOR_OUT];
        for c in 0..COMPONENTS {
            for d in 0..ACTION_DIM {
                a[d * COMPONENTS + c] = self.mu[c][d];
                a[6 + d * COMPONENTS + c] = if var_clamped[c][d] { 0.0 } else { self.var[c][d] };
            }
        }
        (a, self.alpha)
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn logsumexp(v: &[f64; COMPONENTS]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fixed standard-normal draws used by the entropy estimate.
pub fn entropy_draws() -> &'static [[f64; ACTION_DIM]] {
    use std::sync::OnceLock;
    static DRAWS: OnceLock<Vec<[f64; ACTION_DIM]>> = OnceLock::new();
    DRAWS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(ENTROPY_SEED);
        (0..ENTROPY_DRAWS)
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect()
    })
}

impl MdnDistribution {
    /// From one actor output row (12) and one mixing row (3).
    pub fn from_outputs(actor: &[f64], mixing: &[f64]) -> (Self, [[bool; ACTION_DIM]; COMPONENTS]) {
        debug_assert_eq!(actor.len(), ACTOR_OUT);
        debug_assert_eq!(mixing.len(), COMPONENTS);
        let mut d = MdnDistribution {
            alpha: [0.0; COMPONENTS],
            mu: [[0.0; ACTION_DIM]; COMPONENTS],
            var: [[0.0; ACTION_DIM]; COMPONENTS],
        };
        let mut clamped = [[false; ACTION_DIM]; COMPONENTS];
        for c in 0..COMPONENTS {
            d.alpha[c] = mixing[c];
            for k in 0..ACTION_DIM {
                d.mu[c][k] = actor[k * COMPONENTS + c];
                let v = actor[6 + k * COMPONENTS + c];
                clamped[c][k] = v < VAR_FLOOR;
                d.var[c][k] = v.max(VAR_FLOOR);
            }
        }
        debug_assert!((d.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        debug_assert!(d.var.iter().flatten().all(|v| *v > 0.0 && *v <= VAR_CAP));
        (d, clamped)
    }

    fn cache(&self) -> Cache {
        let mut k = Cache {
            ln_norm: [0.0; COMPONENTS],
            inv_var: [[0.0; ACTION_DIM]; COMPONENTS],
            ln_alpha: [0.0; COMPONENTS],
        };
        for c in 0..COMPONENTS {
            k.ln_alpha[c] = self.alpha[c].ln();
            for d in 0..ACTION_DIM {
                let v = self.var[c][d];
                k.ln_norm[c] -= 0.5 * (LN_2PI + v.ln());
                k.inv_var[c][d] = 1.0 / v;
            }
        }
        k
    }

    fn component_logs(&self, k: &Cache, a: [f64; ACTION_DIM]) -> [f64; COMPONENTS] {
        std::array::from_fn(|c| {
            let mut l = k.ln_norm[c];
            for d in 0..ACTION_DIM {
                let e = a[d] - self.mu[c][d];
                l -= 0.5 * e * e * k.inv_var[c][d];
            }
            l
        })
    }

    fn log_prob_cached(&self, k: &Cache, a: [f64; ACTION_DIM]) -> f64 {
        let n = self.component_logs(k, a);
        logsumexp(&std::array::from_fn(|c| k.ln_alpha[c] + n[c]))
    }

    pub fn log_prob(&self, a: [f64; ACTION_DIM]) -> f64 {
        self.log_prob_cached(&self.cache(), a)
    }

    fn log_prob_grad_cached(&self, k: &Cache, a: [f64; ACTION_DIM]) -> (f64, MdnGrad, [f64; ACTION_DIM]) {
        let n = self.component_logs(k, a);
        let l: [f64; COMPONENTS] = std::array::from_fn(|c| k.ln_alpha[c] + n[c]);
        let total = logsumexp(&l);
        let mut g = MdnGrad::default();
        let mut da = [0.0; ACTION_DIM];
        for c in 0..COMPONENTS {
            let r = (l[c] - total).exp();
            g.alpha[c] = (n[c] - total).exp();
            for d in 0..ACTION_DIM {
                let iv = k.inv_var[c][d];
                let e = a[d] - self.mu[c][d];
                g.mu[c][d] = r * e * iv;
                g.var[c][d] = r * 0.5 * iv * (e * e * iv - 1.0);
                da[d] -= r * e * iv;
            }
        }
        (total, g, da)
    }

    /// Log density, its parameter gradient, and its gradient w.r.t. the action.
    pub fn log_prob_grad(&self, a: [f64; ACTION_DIM]) -> (f64, MdnGrad, [f64; ACTION_DIM]) {
        self.log_prob_grad_cached(&self.cache(), a)
    }

    /// Monte-Carlo entropy with the fixed reparameterized draws.
    pub fn entropy(&self) -> f64 {
        let k = self.cache();
        let draws = entropy_draws();
        let mut h = 0.0;
        for c in 0..COMPONENTS {
            let sd = [self.var[c][0].sqrt(), self.var[c][1].sqrt()];
            let s: f64 = draws
                .iter()
                .map(|e| self.log_prob_cached(&k, [self.mu[c][0] + sd[0] * e[0], self.mu[c][1] + sd[1] * e[1]]))
                .sum();
            h -= self.alpha[c] * s / draws.len() as f64;
        }
        h
    }

    /// Entropy estimate and its exact gradient (through the draw locations).
    pub fn entropy_grad(&self) -> (f64, MdnGrad) {
        let k = self.cache();
        let draws = entropy_draws();
        let m = draws.len() as f64;
        let mut h = 0.0;
        let mut g = MdnGrad::default();
        for c in 0..COMPONENTS {
            let sd = [self.var[c][0].sqrt(), self.var[c][1].sqrt()];
            let w = -self.alpha[c] / m;
            let mut sum = 0.0;
            for e in draws {
                let x = [self.mu[c][0] + sd[0] * e[0], self.mu[c][1] + sd[1] * e[1]];
                let (lp, gp, dx) = self.log_prob_grad_cached(&k, x);
                sum += lp;
                g.add_scaled(&gp, w);
                for d in 0..ACTION_DIM {
                    g.mu[c][d] += w * dx[d];
                    g.var[c][d] += w * dx[d] * e[d] / (2.0 * sd[d]);
                }
            }
            h -= self.alpha[c] * sum / m;
            g.alpha[c] -= sum / m;
        }
        (h, g)
    }

    /// Component from the mixing weights, then an independent Gaussian per dim.
    /// Returns the unclamped draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; ACTION_DIM] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = COMPONENTS - 1;
        for c in 0..COMPONENTS {
            acc += self.alpha[c];
            if u < acc {
                k = c;
                break;
            }
        }
        std::array::from_fn(|d| {
            let z: f64 = rng.sample(StandardNormal);
            self.mu[k][d] + self.var[k][d].sqrt() * z
        })
    }

    /// Mean of the component with the largest weight (first on ties).
    pub fn dominant_mean(&self) -> [f64; ACTION_DIM] {
        let mut k = 0;
        for c in 1..COMPONENTS {
            if self.alpha[c] > self.alpha[k] {
                k = c;
            }
        }
        self.mu[k]
    }

    pub fn mixture_mean(&self) -> [f64; ACTION_DIM] {
        std::array::from_fn(|d| (0..COMPONENTS).map(|c| self.alpha[c] * self.mu[c][d]).sum())
    }
}

/// Actor, critic and mixing networks.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnPolicy {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub mixing: DenseNet,
}

impl MdnPolicy {
    /// Three nets with the same ReLU trunk widths `hidden`.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = |out: usize| -> Vec<usize> {
            std::iter::once(input_dim).chain(hidden.iter().copied()).chain([out]).collect()
        };
        MdnPolicy {
            actor: DenseNet::new(&dims(ACTOR_OUT), Activation::Relu, Activation::MdnHead, &mut rng),
            critic: DenseNet::new(&dims(1), Activation::Relu, Activation::Linear, &mut rng),
            mixing: DenseNet::new(&dims(COMPONENTS), Activation::Relu, Activation::Softmax, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn nets(&self) -> [&DenseNet; 3] {
        [&self.actor, &self.critic, &self.mixing]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 3] {
        [&mut self.actor, &mut self.critic, &mut self.mixing]
    }

    /// Distribution and value for one observation.
    pub fn evaluate(&self, obs: &[f64]) -> Result<(MdnDistribution, f64)> {
        let a = self.actor.predict(obs, 1)?;
        let m = self.mixing.predict(obs, 1)?;
        let v = self.critic.predict(obs, 1)?;
        Ok((MdnDistribution::from_outputs(&a, &m).0, v[0]))
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.critic.predict(obs, 1)?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_checkpoint(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }

    /// Loads and checks the layer widths against an expected layout.
    pub fn load_expecting(path: &Path, input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let p = Self::load(path)?;
        let expect = MdnPolicy::new(input_dim, hidden, 0);
        for (name, (got, want)) in ["actor", "critic", "mixing"].iter().zip(p.nets().iter().zip(expect.nets())) {
            if got.dims() != want.dims() {
                return Err(Error::Checkpoint(format!(
                    "{}: {name} layer widths {:?} do not match the configured {:?}",
                    path.display(),
                    got.dims(),
                    want.dims()
                )));
            }
        }
        Ok(p)
    }
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DIMDNPOL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout (all integers little-endian):
/// magic (8 bytes) | version u32 | net count u32 |
/// per net: layer count u32, input width u32, per layer (output width u32, activation u8) |
/// per net, per layer: weights row-major then biases as f64 |
/// CRC-32 (IEEE) of everything before it, u32.
pub fn encode_checkpoint(p: &MdnPolicy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for net in p.nets() {
        out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
        for l in &net.layers {
            out.extend_from_slice(&(l.output as u32).to_le_bytes());
            out.push(l.act.tag());
        }
    }
    for net in p.nets() {
        for v in net.params_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MdnPolicy> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch (file truncated or corrupted)"));
    }
    let mut pos = 8;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let s = body.get(*pos..*pos + 4).ok_or_else(|| bad("header truncated"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
    };
    let version = u32_at(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    if u32_at(&mut pos)? != 3 {
        return Err(bad("expected three networks"));
    }
    let mut shapes = Vec::new();
    for _ in 0..3 {
        let n = u32_at(&mut pos)? as usize;
        let mut input = u32_at(&mut pos)? as usize;
        let mut layers = Vec::new();
        for _ in 0..n {
            let output = u32_at(&mut pos)? as usize;
            let act = body
                .get(pos)
                .and_then(|t| Activation::from_tag(*t))
                .ok_or_else(|| bad("unknown activation tag"))?;
            pos += 1;
            layers.push(Layer {
                input,
                output,
                w: vec![0.0; input * output],
                b: vec![0.0; output],
                act,
            });
            input = output;
        }
        if layers.is_empty() {
            return Err(bad("network without layers"));
        }
        shapes.push(DenseNet { layers });
    }
    let mut floats = body[pos..].chunks_exact(8);
    let total: usize = shapes.iter().map(DenseNet::num_params).sum();
    if body.len() - pos != total * 8 {
        return Err(bad("payload size does not match the header"));
    }
    for net in &mut shapes {
        let p: Vec<f64> = (0..net.num_params())
            .map(|_| f64::from_le_bytes(floats.next().expect("size checked").try_into().expect("8 bytes")))
            .collect();
        net.set_params_flat(&p);
    }
    let mut it = shapes.into_iter();
    Ok(MdnPolicy {
        actor: it.next().expect("three"),
        critic: it.next().expect("three"),
        mixing: it.next().expect("three"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(variance_act(0.0), 0.03125);
        assert!((variance_act(50.0) - VAR_CAP).abs() < 1e-15);
        assert!(variance_act(-50.0) > 0.0 && variance_act(-50.0) < 1e-60);
        assert_eq!(softsign(1.0), 0.5);
        assert_eq!(softsign(0.0), 0.0);
        let s = softmax(&[1000.0, 1000.0, 999.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_relu_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenseNet::new(&[4, 5, 3], Activation::Relu, Activation::Relu, &mut rng);
        let z = vec![0.0; net.num_params()];
        net.set_params_flat(&z);
        assert_eq!(net.predict(&[1.0, -2.0, 3.0, 0.5], 1).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenseNet::new(&[3, 3], Activation::Linear, Activation::Linear, &mut rng);
        net.layers[0].w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = [0.3, -1.2, 7.0, 1.0, 2.0, 3.0];
        assert_eq!(net.predict(&x, 2).unwrap(), x.to_vec());
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNet::new(&[3, 2], Activation::Linear, Activation::Linear, &mut rng);
        assert!(net.predict(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn identical_components_log_prob() {
        let d = MdnDistribution {
            alpha: [1.0 / 3.0; 3],
            mu: [[0.2, -0.1]; 3],
            var: [[VAR_CAP; 2]; 3],
        };
        let expect = -(2.0 * std::f64::consts::PI / 16.0).ln();
        assert!((d.log_prob([0.2, -0.1]) - expect).abs() < 1e-12);
        assert!((expect - 0.9348).abs() < 1e-4);
    }

    #[test]
    fn dominant_component_sampling() {
        let d = MdnDistribution {
            alpha: [1.0, 0.0, 0.0],
            mu: [[0.5, 0.5], [-0.5, -0.5], [0.0, 0.0]],
            var: [[1e-6; 2]; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = d.sample(&mut rng);
            assert!((a[0] - 0.5).abs() < 0.01);
        }
        assert_eq!(d.dominant_mean(), [0.5, 0.5]);
    }

    #[test]
    fn checkpoint_errors() {
        let p = MdnPolicy::new(8, &[16, 16], 1);
        let bytes = encode_checkpoint(&p);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        let crc = crc32fast::hash(&v[..v.len() - 4]);
        let n = v.len();
        v[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let e = decode_checkpoint(&v).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
    }
}
