//! Dense tensors and the shared Q-network: observation embedding, multi-head
//! relation attention over a neighbourhood, and a linear Q head, with a
//! hand-written backward pass.

use std::cell::Cell;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::OBS_WIDTH;
use crate::error::{Error, Result};
use crate::network::PHASE_COUNT;
use crate::sim::hex_digest;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds and elementwise operations performed on this thread.
pub fn op_count() -> u64 {
    OPS.with(|c| c.get())
}

pub fn reset_op_count() {
    OPS.with(|c| c.set(0));
}

fn count(n: usize) {
    OPS.with(|c| c.set(c.get() + n as u64));
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill a {rows}x{cols} tensor", data.len())));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    /// Uniform in `±sqrt(6 / (rows + cols))`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Tensor { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect() }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for (d, b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        count(self.rows * self.cols * other.cols);
        Ok(out)
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row(&mut self, bias: &Tensor) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!("bias {}x{} does not broadcast over width {}", bias.rows, bias.cols, self.cols)));
        }
        for row in self.data.chunks_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        count(self.data.len());
        Ok(())
    }

    pub fn relu(&self) -> Tensor {
        count(self.data.len());
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x.max(0.0)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_finite(&self, what: &str) {
        assert!(self.is_finite(), "non-finite value in {what}");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub obs_width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub actions: usize,
    pub temperature: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { obs_width: OBS_WIDTH, hidden: 32, heads: 4, actions: PHASE_COUNT, temperature: 1.0 }
    }
}

impl NetConfig {
    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_width == 0 || self.hidden == 0 || self.heads == 0 || self.actions == 0 {
            return Err(Error::invalid("network dimensions must be >= 1"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!("hidden width {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// All trainable tensors. Projections map row vectors on the right (`x W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetworkParams {
    pub config: NetConfig,
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub w_t: Vec<Tensor>,
    pub w_s: Vec<Tensor>,
    pub w_c: Vec<Tensor>,
    /// Head width by hidden width.
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_p: Tensor,
    pub b_p: Tensor,
}

impl QNetworkParams {
    pub fn init(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (m, n, nh, p) = (config.obs_width, config.hidden, config.head_width(), config.actions);
        let w_e = Tensor::xavier(m, n, rng);
        let mut w_t = Vec::new();
        let mut w_s = Vec::new();
        let mut w_c = Vec::new();
        for _ in 0..config.heads {
            w_t.push(Tensor::xavier(n, nh, rng));
            w_s.push(Tensor::xavier(n, nh, rng));
            w_c.push(Tensor::xavier(n, nh, rng));
        }
        let w_q = Tensor::xavier(nh, n, rng);
        let w_p = Tensor::xavier(n, p, rng);
        Ok(QNetworkParams {
            config,
            w_e,
            b_e: Tensor::zeros(1, n),
            w_t,
            w_s,
            w_c,
            w_q,
            b_q: Tensor::zeros(1, n),
            w_p,
            b_p: Tensor::zeros(1, p),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.rows, t.cols);
        QNetworkParams {
            config: self.config,
            w_e: z(&self.w_e),
            b_e: z(&self.b_e),
            w_t: self.w_t.iter().map(z).collect(),
            w_s: self.w_s.iter().map(z).collect(),
            w_c: self.w_c.iter().map(z).collect(),
            w_q: z(&self.w_q),
            b_q: z(&self.b_q),
            w_p: z(&self.w_p),
            b_p: z(&self.b_p),
        }
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_e".to_string(), &self.w_e), ("b_e".to_string(), &self.b_e)];
        for h in 0..self.config.heads {
            out.push((format!("w_t.{h}"), &self.w_t[h]));
            out.push((format!("w_s.{h}"), &self.w_s[h]));
            out.push((format!("w_c.{h}"), &self.w_c[h]));
        }
        out.push(("w_q".into(), &self.w_q));
        out.push(("b_q".into(), &self.b_q));
        out.push(("w_p".into(), &self.w_p));
        out.push(("b_p".into(), &self.b_p));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_e, &mut self.b_e];
        for ((t, s), c) in self.w_t.iter_mut().zip(self.w_s.iter_mut()).zip(self.w_c.iter_mut()) {
            out.push(t);
            out.push(s);
            out.push(c);
        }
        out.extend([&mut self.w_q, &mut self.b_q, &mut self.w_p, &mut self.b_p]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.named().iter().flat_map(|(_, t)| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &QNetworkParams, scale: f64) {
        let src: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.parameter_count() * 8);
        for (_, t) in self.named() {
            for x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (m, n, nh, p) = (c.obs_width, c.hidden, c.head_width(), c.actions);
        let want = |name: &str, t: &Tensor, r: usize, k: usize| {
            if t.shape() == (r, k) {
                Ok(())
            } else {
                Err(Error::Shape(format!("{name} is {}x{}, expected {r}x{k}", t.rows, t.cols)))
            }
        };
        want("w_e", &self.w_e, m, n)?;
        want("b_e", &self.b_e, 1, n)?;
        for (name, list) in [("w_t", &self.w_t), ("w_s", &self.w_s), ("w_c", &self.w_c)] {
            if list.len() != c.heads {
                return Err(Error::Shape(format!("{name} has {} heads, expected {}", list.len(), c.heads)));
            }
            for t in list {
                want(name, t, n, nh)?;
            }
        }
        want("w_q", &self.w_q, nh, n)?;
        want("b_q", &self.b_q, 1, n)?;
        want("w_p", &self.w_p, n, p)?;
        want("b_p", &self.b_p, 1, p)?;
        for (t, x) in self.named() {
            if !x.is_finite() {
                return Err(Error::Parse(format!("tensor {t} holds non-finite values")));
            }
        }
        Ok(())
    }
}

// ---- forward ops -----------------------------------------------------------

/// Row-wise `relu(O W_e + b_e)`.
pub fn embed(obs: &Tensor, p: &QNetworkParams) -> Result<Tensor> {
    Ok(embed_pre(obs, p)?.relu())
}

fn embed_pre(obs: &Tensor, p: &QNetworkParams) -> Result<Tensor> {
    if obs.cols != p.config.obs_width {
        return Err(Error::Shape(format!("observation width {} does not match {}", obs.cols, p.config.obs_width)));
    }
    let mut z = obs.matmul(&p.w_e)?;
    z.add_row(&p.b_e)?;
    z.check_finite("embedding");
    Ok(z)
}

/// Per-head scores of every row against row `target`, shape `heads x K`.
pub fn attention_scores(hid: &Tensor, target: usize, p: &QNetworkParams) -> Result<Vec<Vec<f64>>> {
    if target >= hid.rows {
        return Err(Error::Shape(format!("target row {target} outside {} rows", hid.rows)));
    }
    if hid.cols != p.config.hidden {
        return Err(Error::Shape(format!("hidden width {} does not match {}", hid.cols, p.config.hidden)));
    }
    let tgt = Tensor::row_vector(hid.row(target).to_vec());
    (0..p.config.heads)
        .map(|h| {
            let t = tgt.matmul(&p.w_t[h])?;
            let s = hid.matmul(&p.w_s[h])?;
            Ok(scores(&s, t.data()))
        })
        .collect()
}

fn scores(s: &Tensor, t: &[f64]) -> Vec<f64> {
    count(s.rows * s.cols);
    (0..s.rows).map(|j| s.row(j).iter().zip(t).map(|(a, b)| a * b).sum()).collect()
}

/// Temperature softmax, stabilised by subtracting the maximum score.
pub fn attention_weights(e: &[f64], mu: f64) -> Result<Vec<f64>> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {mu}")));
    }
    if e.is_empty() {
        return Err(Error::Shape("softmax over zero scores".into()));
    }
    let max = e.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let ex: Vec<f64> = e.iter().map(|&x| ((x - max) / mu).exp()).collect();
    let z: f64 = ex.iter().sum();
    count(3 * e.len());
    Ok(ex.into_iter().map(|x| x / z).collect())
}

/// Head-averaged attention mix of `H W_c`, projected by `W_q` and activated.
pub fn aggregate(hid: &Tensor, alpha: &[Vec<f64>], p: &QNetworkParams) -> Result<Vec<f64>> {
    let c: Vec<Tensor> = p.w_c.iter().map(|w| hid.matmul(w)).collect::<Result<_>>()?;
    let (_, _, hm) = aggregate_from(&c, alpha, p)?;
    Ok(hm)
}

/// Returns the head average, the pre-activation and the activated output.
fn aggregate_from(c: &[Tensor], alpha: &[Vec<f64>], p: &QNetworkParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let heads = p.config.heads;
    let nh = p.config.head_width();
    if alpha.len() != heads || c.len() != heads {
        return Err(Error::Shape(format!("expected {heads} heads of weights, got {}", alpha.len())));
    }
    let mut v = vec![0.0; nh];
    for (ch, ah) in c.iter().zip(alpha) {
        if ah.len() != ch.rows {
            return Err(Error::Shape(format!("{} weights for {} neighbours", ah.len(), ch.rows)));
        }
        for (j, &a) in ah.iter().enumerate() {
            for (vk, x) in v.iter_mut().zip(ch.row(j)) {
                *vk += a * x;
            }
        }
        count(ch.rows * nh);
    }
    for x in &mut v {
        *x /= heads as f64;
    }
    let mut u = Tensor::row_vector(v.clone()).matmul(&p.w_q)?;
    u.add_row(&p.b_q)?;
    u.check_finite("aggregation");
    let hm = u.relu();
    Ok((v, u.data, hm.data))
}

/// Linear Q head.
pub fn q_values(hm: &[f64], p: &QNetworkParams) -> Result<Vec<f64>> {
    if hm.len() != p.config.hidden {
        return Err(Error::Shape(format!("hidden width {} does not match {}", hm.len(), p.config.hidden)));
    }
    let mut q = Tensor::row_vector(hm.to_vec()).matmul(&p.w_p)?;
    q.add_row(&p.b_p)?;
    q.check_finite("q values");
    Ok(q.data)
}

/// Intermediates of one forward pass with the target in row 0.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    obs: Tensor,
    z: Tensor,
    hid: Tensor,
    t: Vec<Vec<f64>>,
    s: Vec<Tensor>,
    c: Vec<Tensor>,
    alpha: Vec<Vec<f64>>,
    v: Vec<f64>,
    u: Vec<f64>,
    hm: Vec<f64>,
    pub q: Vec<f64>,
}

impl ForwardCache {
    /// Every ReLU input, for checks that stay clear of the kink.
    pub fn pre_activations(&self) -> impl Iterator<Item = f64> + '_ {
        self.z.data.iter().chain(&self.u).copied()
    }

    pub fn attention(&self) -> &[Vec<f64>] {
        &self.alpha
    }
}

fn forward_from_hidden(obs: Tensor, z: Tensor, hid: Tensor, p: &QNetworkParams) -> Result<ForwardCache> {
    let heads = p.config.heads;
    let tgt = Tensor::row_vector(hid.row(0).to_vec());
    let mut t = Vec::with_capacity(heads);
    let mut s = Vec::with_capacity(heads);
    let mut c = Vec::with_capacity(heads);
    let mut alpha = Vec::with_capacity(heads);
    for h in 0..heads {
        let th = tgt.matmul(&p.w_t[h])?.data;
        let sh = hid.matmul(&p.w_s[h])?;
        let e = scores(&sh, &th);
        alpha.push(attention_weights(&e, p.config.temperature)?);
        c.push(hid.matmul(&p.w_c[h])?);
        t.push(th);
        s.push(sh);
    }
    let (v, u, hm) = aggregate_from(&c, &alpha, p)?;
    let q = q_values(&hm, p)?;
    Ok(ForwardCache { obs, z, hid, t, s, c, alpha, v, u, hm, q })
}

/// Full pass for one agent over its `K x m` neighbourhood (target in row 0).
pub fn forward(obs: &Tensor, p: &QNetworkParams) -> Result<ForwardCache> {
    if obs.rows == 0 {
        return Err(Error::Shape("neighbourhood has no rows".into()));
    }
    let z = embed_pre(obs, p)?;
    let hid = z.relu();
    forward_from_hidden(obs.clone(), z, hid, p)
}

/// Q-values for every agent. Observations are embedded once and shared; each
/// agent then attends over the rows listed in its neighbourhood (self first).
pub fn forward_network(obs: &Tensor, neighborhoods: &[Vec<usize>], p: &QNetworkParams) -> Result<Vec<Vec<f64>>> {
    let z = embed_pre(obs, p)?;
    let hid = z.relu();
    neighborhoods
        .iter()
        .map(|nb| {
            if nb.is_empty() {
                return Err(Error::Shape("empty neighbourhood".into()));
            }
            let mut h = Tensor::zeros(nb.len(), hid.cols);
            for (r, &i) in nb.iter().enumerate() {
                if i >= hid.rows {
                    return Err(Error::Shape(format!("neighbour row {i} outside {} observations", hid.rows)));
                }
                h.data[r * hid.cols..(r + 1) * hid.cols].copy_from_slice(hid.row(i));
            }
            let dummy = Tensor::zeros(0, 0);
            Ok(forward_from_hidden(dummy.clone(), dummy, h, p)?.q)
        })
        .collect()
}

// ---- backward --------------------------------------------------------------

fn outer_add(dst: &mut Tensor, a: &[f64], b: &[f64]) {
    for (i, &x) in a.iter().enumerate() {
        for (d, &y) in dst.data[i * dst.cols..(i + 1) * dst.cols].iter_mut().zip(b) {
            *d += x * y;
        }
    }
}

/// `dst += Aᵀ B` for `A: r x a`, `B: r x b`.
fn tn_add(dst: &mut Tensor, a: &Tensor, b: &Tensor) {
    for r in 0..a.rows {
        outer_add(dst, a.row(r), b.row(r));
    }
}

/// `A Bᵀ` row for a single vector `x` against `W: k x c` giving length `k`.
fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows).map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Accumulates into `g` the gradients of a loss whose derivative with respect to Q is `dq`.
fn backward_one(cache: &ForwardCache, dq: &[f64], p: &QNetworkParams, g: &mut QNetworkParams) {
    let cfg = &p.config;
    let heads = cfg.heads as f64;
    let k = cache.hid.rows;

    // Q = hm W_p + b_p
    outer_add(&mut g.w_p, &cache.hm, dq);
    for (b, d) in g.b_p.data.iter_mut().zip(dq) {
        *b += d;
    }
    let dhm = mat_vec(&p.w_p, dq);
    // hm = relu(u), u = v W_q + b_q
    let du: Vec<f64> = dhm.iter().zip(&cache.u).map(|(d, &u)| if u > 0.0 { *d } else { 0.0 }).collect();
    outer_add(&mut g.w_q, &cache.v, &du);
    for (b, d) in g.b_q.data.iter_mut().zip(&du) {
        *b += d;
    }
    let dv: Vec<f64> = mat_vec(&p.w_q, &du).into_iter().map(|x| x / heads).collect();

    let mut dhid = Tensor::zeros(k, cfg.hidden);
    for h in 0..cfg.heads {
        let (alpha, c, s, t) = (&cache.alpha[h], &cache.c[h], &cache.s[h], &cache.t[h]);
        // v_h = Σ_j α_j C_j
        let da: Vec<f64> = (0..k).map(|j| c.row(j).iter().zip(&dv).map(|(a, b)| a * b).sum()).collect();
        let mut dc = Tensor::zeros(k, dv.len());
        outer_add(&mut dc, alpha, &dv);
        tn_add(&mut g.w_c[h], &cache.hid, &dc);
        // α = softmax(e / μ)
        let dot: f64 = alpha.iter().zip(&da).map(|(a, d)| a * d).sum();
        let de: Vec<f64> = alpha.iter().zip(&da).map(|(a, d)| a * (d - dot) / cfg.temperature).collect();
        // e_j = S_j · T
        let mut ds = Tensor::zeros(k, t.len());
        outer_add(&mut ds, &de, t);
        let mut dt = vec![0.0; t.len()];
        for (j, &d) in de.iter().enumerate() {
            for (x, y) in dt.iter_mut().zip(s.row(j)) {
                *x += d * y;
            }
        }
        tn_add(&mut g.w_s[h], &cache.hid, &ds);
        outer_add(&mut g.w_t[h], cache.hid.row(0), &dt);
        // Back into the hidden rows through C, S and T.
        for j in 0..k {
            let row = &mut dhid.data[j * cfg.hidden..(j + 1) * cfg.hidden];
            for (x, y) in row.iter_mut().zip(mat_vec(&p.w_c[h], dc.row(j))) {
                *x += y;
            }
            for (x, y) in row.iter_mut().zip(mat_vec(&p.w_s[h], ds.row(j))) {
                *x += y;
            }
        }
        for (x, y) in dhid.data[..cfg.hidden].iter_mut().zip(mat_vec(&p.w_t[h], &dt)) {
            *x += y;
        }
    }
    // hid = relu(z), z = O W_e + b_e
    let mut dz = dhid;
    for (d, &z) in dz.data.iter_mut().zip(&cache.z.data) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
    tn_add(&mut g.w_e, &cache.obs, &dz);
    for r in 0..k {
        for (b, d) in g.b_e.data.iter_mut().zip(dz.row(r)) {
            *b += d;
        }
    }
}

/// Records forward passes so a later backward call can differentiate them.
#[derive(Debug, Default)]
pub struct Recorder {
    caches: Vec<ForwardCache>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs and records a forward pass, returning its Q-values.
    pub fn forward(&mut self, obs: &Tensor, p: &QNetworkParams) -> Result<Vec<f64>> {
        let cache = forward(obs, p)?;
        let q = cache.q.clone();
        self.caches.push(cache);
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    /// Gradients of `Σ_i dq_i · Q_i` over the recorded passes; clears the record.
    pub fn backward(&mut self, dq: &[Vec<f64>], p: &QNetworkParams) -> Result<QNetworkParams> {
        if self.caches.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if dq.len() != self.caches.len() {
            return Err(Error::Shape(format!("{} output gradients for {} recorded passes", dq.len(), self.caches.len())));
        }
        let mut g = p.zeros_like();
        for (cache, d) in self.caches.iter().zip(dq) {
            if d.len() != p.config.actions {
                return Err(Error::Shape(format!("output gradient has width {}, expected {}", d.len(), p.config.actions)));
            }
            backward_one(cache, d, p, &mut g);
        }
        self.caches.clear();
        Ok(g)
    }
}

/// Clips the global L2 norm of `g` to `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(g: &mut QNetworkParams, max_norm: f64) -> f64 {
    let norm = g.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in g.tensors_mut() {
            for x in &mut t.data {
                *x *= scale;
            }
        }
    }
    norm
}

// ---- checkpoints -----------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "evsched-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: NetConfig,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: QNetworkParams,
    /// Free-form provenance such as the training config and seed.
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: QNetworkParams) -> Self {
        Checkpoint { params, metadata: Default::default() }
    }

    pub fn to_json_string(&self) -> String {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config,
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor { name, rows: t.rows, cols: t.cols, data: t.data.clone() })
                .collect(),
        };
        let mut s = serde_json::to_string(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Checkpoint> {
        let doc: CheckpointDoc = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("checkpoint line {} column {}: {e}", e.line(), e.column())))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("not a checkpoint: format {:?}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", doc.version)));
        }
        doc.config.validate().map_err(|e| Error::Shape(e.to_string()))?;
        // Allocate a template with the right shapes, then fill it by name.
        let mut params = zero_params(doc.config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if doc.tensors.len() != names.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, expected {}", doc.tensors.len(), names.len())));
        }
        for ((slot, name), t) in params.tensors_mut().into_iter().zip(&names).zip(doc.tensors) {
            if &t.name != name {
                return Err(Error::Shape(format!("tensor {:?} found where {name} was expected", t.name)));
            }
            if (t.rows, t.cols) != slot.shape() || t.data.len() != t.rows * t.cols {
                return Err(Error::Shape(format!(
                    "tensor {name} is {}x{} with {} values, expected {}x{}",
                    t.rows,
                    t.cols,
                    t.data.len(),
                    slot.rows,
                    slot.cols
                )));
            }
            slot.data = t.data;
        }
        params.check_shapes()?;
        Ok(Checkpoint { params, metadata: doc.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn zero_params(config: NetConfig) -> QNetworkParams {
    let (m, n, nh, p) = (config.obs_width, config.hidden, config.head_width(), config.actions);
    QNetworkParams {
        config,
        w_e: Tensor::zeros(m, n),
        b_e: Tensor::zeros(1, n),
        w_t: (0..config.heads).map(|_| Tensor::zeros(n, nh)).collect(),
        w_s: (0..config.heads).map(|_| Tensor::zeros(n, nh)).collect(),
        w_c: (0..config.heads).map(|_| Tensor::zeros(n, nh)).collect(),
        w_q: Tensor::zeros(nh, n),
        b_q: Tensor::zeros(1, n),
        w_p: Tensor::zeros(n, p),
        b_p: Tensor::zeros(1, p),
    }
}
