//! Forward and reverse-mode passes of the convolutional voting network.
//!
//! Activations are channel-major: `data[(c * n + s) * len + x]` for channel
//! `c`, sample `s` and spatial position `x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{
    ConvBlock, Fusion, Gradients, ModelParams, BN_EPS, BN_MOMENTUM, KERNEL, NUM_OUTPUTS,
    STAGE_BLOCKS,
};
use super::real::{matmul, Real};
use crate::error::{Error, Result};

/// Network input: `data[(s * frames + f) * points + x]`, current frame first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub frames: usize,
    pub points: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(n: usize, frames: usize, points: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * frames * points {
            return Err(Error::Shape(format!(
                "batch data has {} values, expected {n}x{frames}x{points}",
                data.len()
            )));
        }
        Ok(Self {
            n,
            frames,
            points,
            data,
        })
    }

    pub fn from_f64(n: usize, frames: usize, points: usize, data: &[f64]) -> Result<Self> {
        Self::new(
            n,
            frames,
            points,
            data.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let per = self.frames * self.points;
        Self {
            n: end - start,
            frames: self.frames,
            points: self.points,
            data: self.data[start * per..end * per].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization and dropout masks drawn from the
    /// given seed.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    fn zeros(c: usize, n: usize, len: usize) -> Self {
        Self {
            c,
            n,
            len,
            data: vec![T::zero(); c * n * len],
        }
    }

    fn cols(&self) -> usize {
        self.n * self.len
    }
}

/// Raw network outputs for `n` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    pub n: usize,
    /// `[n][4]` pre-softmax scores.
    pub logits: Vec<T>,
    /// `[n][4]` softmax of the logits.
    pub probs: Vec<T>,
    /// `[n][2]` vote in the beam-aligned frame, meters.
    pub votes: Vec<T>,
}

/// Per-point class distribution and vote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    /// (background, wheelchair, walker, person).
    pub class_probs: [f64; 4],
    pub vote: (f64, f64),
}

impl PointPrediction {
    /// Summed foreground probability.
    pub fn objectness(&self) -> f64 {
        self.class_probs[1] + self.class_probs[2] + self.class_probs[3]
    }
}

impl<T: Real> Output<T> {
    pub fn predictions(&self) -> Vec<PointPrediction> {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        (0..self.n)
            .map(|s| PointPrediction {
                class_probs: [
                    f(self.probs[s * 4]),
                    f(self.probs[s * 4 + 1]),
                    f(self.probs[s * 4 + 2]),
                    f(self.probs[s * 4 + 3]),
                ],
                vote: (f(self.votes[s * 2]), f(self.votes[s * 2 + 1])),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Act<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Post-activation output.
    out: Act<T>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_len: usize,
    /// Input spatial index of each output position.
    argmax: Vec<u32>,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    blocks: Vec<BlockCache<T>>,
    pools: Vec<PoolCache>,
    masks: Vec<Option<Vec<T>>>,
    /// Global-average-pooled features `[c4][n]`.
    pooled: Vec<T>,
    final_len: usize,
    n: usize,
    frames: usize,
}

fn im2col<T: Real>(x: &Act<T>) -> Vec<T> {
    let cols = x.cols();
    let mut col = vec![T::zero(); x.c * KERNEL * cols];
    let len = x.len;
    for c in 0..x.c {
        for k in 0..KERNEL {
            let row = &mut col[(c * KERNEL + k) * cols..(c * KERNEL + k + 1) * cols];
            for s in 0..x.n {
                let src = &x.data[(c * x.n + s) * len..(c * x.n + s + 1) * len];
                let dst = &mut row[s * len..(s + 1) * len];
                // dst[p] = src[p + k - 1]
                match k {
                    0 => dst[1..].copy_from_slice(&src[..len - 1]),
                    1 => dst.copy_from_slice(src),
                    _ => dst[..len - 1].copy_from_slice(&src[1..]),
                }
            }
        }
    }
    col
}

fn col2im_add<T: Real>(dcol: &[T], c: usize, n: usize, len: usize) -> Act<T> {
    let cols = n * len;
    let mut dx = Act::zeros(c, n, len);
    for ch in 0..c {
        for k in 0..KERNEL {
            let row = &dcol[(ch * KERNEL + k) * cols..(ch * KERNEL + k + 1) * cols];
            for s in 0..n {
                let src = &row[s * len..(s + 1) * len];
                let dst = &mut dx.data[(ch * n + s) * len..(ch * n + s + 1) * len];
                match k {
                    0 => {
                        for p in 1..len {
                            dst[p - 1] = dst[p - 1] + src[p];
                        }
                    }
                    1 => {
                        for p in 0..len {
                            dst[p] = dst[p] + src[p];
                        }
                    }
                    _ => {
                        for p in 0..len - 1 {
                            dst[p + 1] = dst[p + 1] + src[p];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Real>(block: &ConvBlock<T>, x: &Act<T>) -> Act<T> {
    let col = im2col(x);
    let mut y = Act::zeros(block.out_ch, x.n, x.len);
    matmul(
        block.out_ch,
        block.in_ch * KERNEL,
        x.cols(),
        &block.weight,
        false,
        &col,
        false,
        T::zero(),
        &mut y.data,
    );
    y
}

fn leaky<T: Real>(v: T, leak: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * leak
    }
}

/// Conv, batch-norm and leaky-ReLU on one block.
fn block_forward<T: Real>(
    block: &ConvBlock<T>,
    x: Act<T>,
    leak: T,
    train: bool,
) -> (Act<T>, Option<BlockCache<T>>) {
    let mut y = conv_forward(block, &x);
    let m = y.cols();
    let eps = T::lit(BN_EPS);
    if !train {
        for c in 0..y.c {
            let scale = block.gamma[c] / (block.running_var[c] + eps).sqrt();
            let shift = block.beta[c] - block.running_mean[c] * scale;
            for v in &mut y.data[c * m..(c + 1) * m] {
                *v = leaky(*v * scale + shift, leak);
            }
        }
        return (y, None);
    }
    let mut xhat = vec![T::zero(); y.data.len()];
    let mut inv_std = Vec::with_capacity(y.c);
    let mut batch_mean = Vec::with_capacity(y.c);
    let mut batch_var_unbiased = Vec::with_capacity(y.c);
    for c in 0..y.c {
        let row = &mut y.data[c * m..(c + 1) * m];
        let mean = row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / m as f64;
        let is = T::lit(1.0 / (var + BN_EPS).sqrt());
        let mean_t = T::lit(mean);
        let (g, b) = (block.gamma[c], block.beta[c]);
        for (v, xh) in row.iter_mut().zip(&mut xhat[c * m..(c + 1) * m]) {
            let h = (*v - mean_t) * is;
            *xh = h;
            *v = leaky(g * h + b, leak);
        }
        inv_std.push(is);
        batch_mean.push(mean);
        batch_var_unbiased.push(if m > 1 {
            var * m as f64 / (m - 1) as f64
        } else {
            var
        });
    }
    let cache = BlockCache {
        input: x,
        xhat,
        inv_std,
        out: y.clone(),
        batch_mean,
        batch_var_unbiased,
    };
    (y, Some(cache))
}

fn block_backward<T: Real>(
    block: &ConvBlock<T>,
    cache: &BlockCache<T>,
    mut dout: Vec<T>,
    leak: T,
    need_dx: bool,
    grads: &mut [Vec<T>],
) -> Option<Act<T>> {
    let x = &cache.input;
    let m = x.cols();
    let c_out = block.out_ch;
    // leaky-ReLU: positive output iff positive pre-activation
    for (d, &o) in dout.iter_mut().zip(&cache.out.data) {
        if o <= T::zero() {
            *d = *d * leak;
        }
    }
    // batch-norm
    let mf = T::lit(m as f64);
    for c in 0..c_out {
        let dy = &mut dout[c * m..(c + 1) * m];
        let xh = &cache.xhat[c * m..(c + 1) * m];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&d, &h) in dy.iter().zip(xh) {
            sum_dy = sum_dy + d;
            sum_dy_xh = sum_dy_xh + d * h;
        }
        grads[1][c] = grads[1][c] + sum_dy_xh;
        grads[2][c] = grads[2][c] + sum_dy;
        let k = block.gamma[c] * cache.inv_std[c] / mf;
        for (d, &h) in dy.iter_mut().zip(xh) {
            *d = k * (mf * *d - sum_dy - h * sum_dy_xh);
        }
    }
    // convolution
    let col = im2col(x);
    let kdim = block.in_ch * KERNEL;
    matmul(c_out, m, kdim, &dout, false, &col, true, T::one(), &mut grads[0]);
    if !need_dx {
        return None;
    }
    let mut dcol = vec![T::zero(); kdim * m];
    matmul(kdim, c_out, m, &block.weight, true, &dout, false, T::zero(), &mut dcol);
    Some(col2im_add(&dcol, block.in_ch, x.n, x.len))
}

fn maxpool_forward<T: Real>(x: &Act<T>) -> (Act<T>, PoolCache) {
    let out_len = x.len / 2;
    let mut y = Act::zeros(x.c, x.n, out_len);
    let mut argmax = vec![0u32; x.c * x.n * out_len];
    for row in 0..x.c * x.n {
        let src = &x.data[row * x.len..(row + 1) * x.len];
        for p in 0..out_len {
            let (a, b) = (src[2 * p], src[2 * p + 1]);
            let (v, idx) = if b > a { (b, 2 * p + 1) } else { (a, 2 * p) };
            y.data[row * out_len + p] = v;
            argmax[row * out_len + p] = idx as u32;
        }
    }
    (
        y,
        PoolCache {
            in_len: x.len,
            argmax,
        },
    )
}

fn maxpool_backward<T: Real>(dy: &[T], cache: &PoolCache, rows: usize) -> Vec<T> {
    let out_len = cache.argmax.len() / rows;
    let mut dx = vec![T::zero(); rows * cache.in_len];
    for row in 0..rows {
        for p in 0..out_len {
            let i = row * out_len + p;
            let j = row * cache.in_len + cache.argmax[i] as usize;
            dx[j] = dx[j] + dy[i];
        }
    }
    dx
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn check_input<T: Real>(params: &ModelParams<T>, batch: &Batch<T>) -> Result<()> {
    let cfg = &params.config;
    if batch.n == 0 {
        return Err(Error::Empty("network batch".into()));
    }
    if batch.frames != cfg.input_frames || batch.points != cfg.input_points {
        return Err(Error::Shape(format!(
            "batch is {}x{} (frames x points), model expects {}x{}",
            batch.frames, batch.points, cfg.input_frames, cfg.input_points
        )));
    }
    if batch.data.len() != batch.n * batch.frames * batch.points {
        return Err(Error::Shape("batch data length".into()));
    }
    Ok(())
}

fn input_activation<T: Real>(fusion: Fusion, batch: &Batch<T>) -> Act<T> {
    let (n, f, l) = (batch.n, batch.frames, batch.points);
    match fusion {
        // one channel; late fusion treats every frame as its own sample
        Fusion::None | Fusion::Late => Act {
            c: 1,
            n: n * f,
            len: l,
            data: batch.data.clone(),
        },
        Fusion::Early => {
            let mut a = Act::zeros(f, n, l);
            for s in 0..n {
                for fr in 0..f {
                    let src = &batch.data[(s * f + fr) * l..(s * f + fr + 1) * l];
                    a.data[(fr * n + s) * l..(fr * n + s + 1) * l].copy_from_slice(src);
                }
            }
            a
        }
    }
}

/// Sum per-frame activations `[c][n*frames][len]` into `[c][n][len]`.
fn sum_frames<T: Real>(x: &Act<T>, frames: usize) -> Act<T> {
    let n = x.n / frames;
    let len = x.len;
    let mut y = Act::zeros(x.c, n, len);
    for c in 0..x.c {
        for s in 0..n {
            let dst = &mut y.data[(c * n + s) * len..(c * n + s + 1) * len];
            let first = ((c * x.n) + s * frames) * len;
            dst.copy_from_slice(&x.data[first..first + len]);
            for f in 1..frames {
                let off = ((c * x.n) + s * frames + f) * len;
                for (d, &v) in dst.iter_mut().zip(&x.data[off..off + len]) {
                    *d = *d + v;
                }
            }
        }
    }
    y
}

fn broadcast_frames<T: Real>(dy: &[T], c: usize, n: usize, len: usize, frames: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); c * n * frames * len];
    for ch in 0..c {
        for s in 0..n {
            let src = &dy[(ch * n + s) * len..(ch * n + s + 1) * len];
            for f in 0..frames {
                let off = ((ch * n * frames) + s * frames + f) * len;
                dx[off..off + len].copy_from_slice(src);
            }
        }
    }
    dx
}

/// Runs the network. In [`Mode::Train`] the returned cache feeds
/// [`backward`] and [`update_running_stats`].
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    mode: Mode,
) -> Result<(Output<T>, Option<Cache<T>>)> {
    check_input(params, batch)?;
    let cfg = &params.config;
    let leak = T::lit(cfg.leak);
    let (train, mut rng) = match mode {
        Mode::Train { dropout_seed } => (true, Some(ChaCha8Rng::seed_from_u64(dropout_seed))),
        Mode::Eval => (false, None),
    };
    let frames = if cfg.fusion == Fusion::Late {
        batch.frames
    } else {
        1
    };

    let mut x = input_activation(cfg.fusion, batch);
    let mut block_caches = Vec::new();
    let mut pools = Vec::new();
    let mut masks = Vec::new();
    let mut bi = 0;
    for (stage, &nblocks) in STAGE_BLOCKS.iter().enumerate() {
        if stage == 2 && frames > 1 {
            x = sum_frames(&x, frames);
        }
        for _ in 0..nblocks {
            let (y, c) = block_forward(&params.blocks[bi], x, leak, train);
            x = y;
            if let Some(c) = c {
                block_caches.push(c);
            }
            bi += 1;
        }
        if stage < 3 {
            let (y, pc) = maxpool_forward(&x);
            x = y;
            if train {
                pools.push(pc);
            }
            if let Some(rng) = rng.as_mut() {
                if cfg.dropout_rate > 0.0 {
                    let mask: Vec<T> = dropout_mask(x.data.len(), cfg.dropout_rate, rng);
                    for (v, &m) in x.data.iter_mut().zip(&mask) {
                        *v = *v * m;
                    }
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
            }
        }
    }

    // global average pooling -> [c4][n]
    let (c4, n, len) = (x.c, x.n, x.len);
    let inv_len = T::lit(1.0 / len as f64);
    let pooled: Vec<T> = (0..c4 * n)
        .map(|row| x.data[row * len..(row + 1) * len].iter().copied().sum::<T>() * inv_len)
        .collect();

    // fully connected: out[o][s] = W[o][:] . pooled[:][s] + b[o]
    let mut fc_out = vec![T::zero(); NUM_OUTPUTS * n];
    matmul(NUM_OUTPUTS, c4, n, &params.fc_weight, false, &pooled, false, T::zero(), &mut fc_out);
    let mut logits = vec![T::zero(); n * 4];
    let mut votes = vec![T::zero(); n * 2];
    for s in 0..n {
        for o in 0..4 {
            logits[s * 4 + o] = fc_out[o * n + s] + params.fc_bias[o];
        }
        for o in 0..2 {
            votes[s * 2 + o] = fc_out[(4 + o) * n + s] + params.fc_bias[4 + o];
        }
    }
    if logits.iter().chain(&votes).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    let probs = softmax_rows(&logits, 4);
    let out = Output {
        n,
        logits,
        probs,
        votes,
    };
    let cache = train.then(|| Cache {
        blocks: block_caches,
        pools,
        masks,
        pooled,
        final_len: len,
        n,
        frames,
    });
    Ok((out, cache))
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

/// Reverse pass: gradients of the scalar whose output derivatives are
/// `d_logits` (`[n][4]`) and `d_votes` (`[n][2]`).
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: Option<&Cache<T>>,
    d_logits: &[T],
    d_votes: &[T],
) -> Result<Gradients<T>> {
    let cache = cache.ok_or(Error::MissingCache)?;
    let n = cache.n;
    if d_logits.len() != n * 4 || d_votes.len() != n * 2 {
        return Err(Error::Shape("output gradient size".into()));
    }
    let cfg = &params.config;
    let leak = T::lit(cfg.leak);
    let mut grads = Gradients::zeros_like(params);
    let nb = params.blocks.len();
    let c4 = cfg.stage_channels[3];

    // fully connected
    let mut d_out = vec![T::zero(); NUM_OUTPUTS * n];
    for s in 0..n {
        for o in 0..4 {
            d_out[o * n + s] = d_logits[s * 4 + o];
        }
        for o in 0..2 {
            d_out[(4 + o) * n + s] = d_votes[s * 2 + o];
        }
    }
    let fc_w = 3 * nb;
    matmul(NUM_OUTPUTS, n, c4, &d_out, false, &cache.pooled, true, T::zero(), &mut grads.tensors[fc_w]);
    for o in 0..NUM_OUTPUTS {
        grads.tensors[fc_w + 1][o] = d_out[o * n..(o + 1) * n].iter().copied().sum();
    }
    let mut d_pooled = vec![T::zero(); c4 * n];
    matmul(c4, NUM_OUTPUTS, n, &params.fc_weight, true, &d_out, false, T::zero(), &mut d_pooled);

    // global average pooling
    let len = cache.final_len;
    let inv_len = T::lit(1.0 / len as f64);
    let mut d: Vec<T> = d_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv_len, len))
        .collect();

    let mut bi = nb;
    for stage in (0..4).rev() {
        if stage < 3 {
            let rows = cache.blocks[bi - 1].out.c * cache.blocks[bi - 1].out.n;
            if let Some(Some(mask)) = cache.masks.get(stage) {
                for (g, &m) in d.iter_mut().zip(mask) {
                    *g = *g * m;
                }
            }
            d = maxpool_backward(&d, &cache.pools[stage], rows);
        }
        for _ in 0..STAGE_BLOCKS[stage] {
            bi -= 1;
            let need_dx = bi > 0;
            let dx = block_backward(
                &params.blocks[bi],
                &cache.blocks[bi],
                d,
                leak,
                need_dx,
                &mut grads.tensors[3 * bi..3 * bi + 3],
            );
            d = match dx {
                Some(a) => a.data,
                None => Vec::new(),
            };
        }
        if stage == 2 && cache.frames > 1 {
            let x = &cache.blocks[bi].input;
            d = broadcast_frames(&d, x.c, x.n, x.len, cache.frames);
        }
    }
    Ok(grads)
}

/// Exponential moving average of the batch statistics seen in `cache`.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, cache: &Cache<T>) {
    let mom = BN_MOMENTUM;
    for (block, bc) in params.blocks.iter_mut().zip(&cache.blocks) {
        for c in 0..block.out_ch {
            let rm = block.running_mean[c].to_f64().unwrap();
            let rv = block.running_var[c].to_f64().unwrap();
            block.running_mean[c] = T::lit((1.0 - mom) * rm + mom * bc.batch_mean[c]);
            block.running_var[c] = T::lit((1.0 - mom) * rv + mom * bc.batch_var_unbiased[c]);
        }
    }
}
