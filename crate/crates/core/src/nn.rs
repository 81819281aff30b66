//! Compact UNet backbone with explicit forward/backward passes.
//!
//! Feature maps are kept channel-major (`[C, N*H*W]`) so every convolution is
//! a single GEMM over an im2col buffer. Parameters live in one flat `F`
//! vector; gradients use the same layout, which keeps the optimizer and the
//! checkpoint format trivial.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.01;

/// Floating-point element type of a network (`f32` for training, `f64` for checks).
pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + std::ops::DivAssign + 'static
{
}

impl<T> Scalar for T where
    T: LinalgScalar + Float + FromPrimitive + ScalarOperand + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + std::ops::DivAssign + 'static
{
}

fn lit<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Dropout used only by the Monte-Carlo sampling path.
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            depth: 4,
            dropout_rate: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Config, "num_classes must be at least 2");
        ensure!(self.num_classes <= 255, Config, "num_classes must fit in a u8 label");
        ensure!(self.depth >= 1, Config, "depth must be at least 1");
        ensure!(self.in_channels >= 1, Config, "in_channels must be at least 1");
        ensure!(self.base_width >= 1, Config, "base_width must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            Config,
            "dropout_rate must lie in [0, 1), got {}",
            self.dropout_rate
        );
        Ok(())
    }

    /// Spatial sizes must be multiples of this value.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).n_params
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvSpec {
    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Debug, Clone, Copy)]
struct BnSpec {
    c: usize,
    g_off: usize,
    b_off: usize,
    stat_off: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    conv1: ConvSpec,
    bn1: BnSpec,
    conv2: ConvSpec,
    bn2: BnSpec,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<BlockSpec>,
    /// Deepest first: (1x1 channel reduction, decoder block).
    dec: Vec<(ConvSpec, BlockSpec)>,
    head: ConvSpec,
    n_params: usize,
    n_stats: usize,
}

struct Allocator {
    params: usize,
    stats: usize,
}

impl Allocator {
    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvSpec {
        let w_off = self.params;
        let b_off = w_off + cout * cin * k * k;
        self.params = b_off + cout;
        ConvSpec { cin, cout, k, w_off, b_off }
    }

    fn bn(&mut self, c: usize) -> BnSpec {
        let spec = BnSpec {
            c,
            g_off: self.params,
            b_off: self.params + c,
            stat_off: self.stats,
        };
        self.params += 2 * c;
        self.stats += 2 * c;
        spec
    }

    fn block(&mut self, cin: usize, cout: usize) -> BlockSpec {
        let conv1 = self.conv(cin, cout, 3);
        let bn1 = self.bn(cout);
        let conv2 = self.conv(cout, cout, 3);
        let bn2 = self.bn(cout);
        BlockSpec { conv1, bn1, conv2, bn2 }
    }
}

impl Layout {
    fn new(cfg: &BackboneConfig) -> Self {
        let mut a = Allocator { params: 0, stats: 0 };
        let width = |level: usize| cfg.base_width << level;
        let mut enc = vec![a.block(cfg.in_channels, width(0))];
        for level in 1..=cfg.depth {
            enc.push(a.block(width(level - 1), width(level)));
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let reduce = a.conv(width(level + 1), width(level), 1);
            let block = a.block(2 * width(level), width(level));
            dec.push((reduce, block));
        }
        let head = a.conv(width(0), cfg.num_classes, 1);
        Layout {
            enc,
            dec,
            head,
            n_params: a.params,
            n_stats: a.stats,
        }
    }
}

/// Channel-major feature map.
#[derive(Debug, Clone)]
struct Feat<F: Scalar> {
    data: Array2<F>,
    n: usize,
    h: usize,
    w: usize,
}

impl<F: Scalar> Feat<F> {
    fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Feat {
            data: Array2::zeros((c, n * h * w)),
            n,
            h,
            w,
        }
    }

    fn like(&self, data: Array2<F>) -> Self {
        Feat {
            data,
            n: self.n,
            h: self.h,
            w: self.w,
        }
    }

    fn from_nchw(x: &Array4<F>) -> Self {
        let (n, c, h, w) = x.dim();
        let data = x
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, n * h * w))
            .expect("contiguous");
        Feat { data, n, h, w }
    }

    fn to_nchw(&self) -> Array4<F> {
        let c = self.data.nrows();
        self.data
            .clone()
            .into_shape_with_order((c, self.n, self.h, self.w))
            .expect("contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }
}

fn im2col<F: Scalar>(x: &Feat<F>, k: usize) -> Array2<F> {
    if k == 1 {
        return x.data.clone();
    }
    let (c, n, h, w) = (x.data.nrows(), x.n, x.h, x.w);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Array2::zeros((c * k * k, n * hw));
    let src = x.data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let row_len = n * hw;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut dst[row * row_len..(row + 1) * row_len];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for img in 0..n {
                    let plane = &src[ci * row_len + img * hw..ci * row_len + (img + 1) * hw];
                    let out_plane = &mut out[img * hw..(img + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                        let srow = sy as usize * w;
                        for xx in x0..x1 {
                            out_plane[y * w + xx] = plane[srow + (xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &Array2<F>, c: usize, n: usize, h: usize, w: usize, k: usize) -> Feat<F> {
    if k == 1 {
        return Feat {
            data: cols.clone(),
            n,
            h,
            w,
        };
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let row_len = n * hw;
    let mut out = Feat::zeros(c, n, h, w);
    let dst = out.data.as_slice_mut().expect("standard layout");
    let src = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * row_len..(row + 1) * row_len];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for img in 0..n {
                    let plane = &mut dst[ci * row_len + img * hw..ci * row_len + (img + 1) * hw];
                    let col_plane = &col[img * hw..(img + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                        let srow = sy as usize * w;
                        for xx in x0..x1 {
                            plane[srow + (xx as isize + dx) as usize] += col_plane[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn weight_view<'a, F: Scalar>(params: &'a [F], spec: &ConvSpec) -> ndarray::ArrayView2<'a, F> {
    ndarray::ArrayView2::from_shape(
        (spec.cout, spec.fan_in()),
        &params[spec.w_off..spec.w_off + spec.cout * spec.fan_in()],
    )
    .expect("weight slice")
}

fn conv_forward<F: Scalar>(params: &[F], spec: &ConvSpec, x: &Feat<F>) -> (Feat<F>, Array2<F>) {
    let cols = im2col(x, spec.k);
    let mut out = Array2::zeros((spec.cout, cols.ncols()));
    let bias = &params[spec.b_off..spec.b_off + spec.cout];
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias) {
        row.fill(b);
    }
    general_mat_mul(F::one(), &weight_view(params, spec), &cols, F::one(), &mut out);
    (x.like(out), cols)
}

fn conv_backward<F: Scalar>(
    params: &[F],
    spec: &ConvSpec,
    cols: &Array2<F>,
    dy: &Feat<F>,
    grads: &mut [F],
) -> Feat<F> {
    {
        let gw = &mut grads[spec.w_off..spec.w_off + spec.cout * spec.fan_in()];
        let mut gw = ndarray::ArrayViewMut2::from_shape((spec.cout, spec.fan_in()), gw)
            .expect("grad slice");
        general_mat_mul(F::one(), &dy.data, &cols.t(), F::one(), &mut gw);
    }
    for (g, row) in grads[spec.b_off..spec.b_off + spec.cout]
        .iter_mut()
        .zip(dy.data.axis_iter(Axis(0)))
    {
        *g += row.sum();
    }
    let mut dcols = Array2::zeros((spec.fan_in(), dy.data.ncols()));
    general_mat_mul(F::one(), &weight_view(params, spec).t(), &dy.data, F::zero(), &mut dcols);
    col2im(&dcols, spec.cin, dy.n, dy.h, dy.w, spec.k)
}

struct BnCache<F: Scalar> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
}

fn bn_forward<F: Scalar>(
    params: &[F],
    spec: &BnSpec,
    x: &Feat<F>,
    stats: &mut BnStats<'_, F>,
) -> (Feat<F>, Option<BnCache<F>>) {
    let c = spec.c;
    let gamma = &params[spec.g_off..spec.g_off + c];
    let beta = &params[spec.b_off..spec.b_off + c];
    let m: F = lit(x.data.ncols() as f64);
    let eps: F = lit(BN_EPS);
    let momentum: F = lit(BN_MOMENTUM);
    let mut out = x.data.clone();
    match stats {
        BnStats::Eval(running) => {
            let mean = &running[spec.stat_off..spec.stat_off + c];
            let var = &running[spec.stat_off + c..spec.stat_off + 2 * c];
            for (ch, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let scale = gamma[ch] / (var[ch] + eps).sqrt();
                let shift = beta[ch] - mean[ch] * scale;
                row.mapv_inplace(|v| v * scale + shift);
            }
            (x.like(out), None)
        }
        BnStats::Train(running) => {
            let mut inv_std = vec![F::zero(); c];
            let mut xhat = x.data.clone();
            for (ch, (mut row, mut xh)) in out
                .axis_iter_mut(Axis(0))
                .zip(xhat.axis_iter_mut(Axis(0)))
                .enumerate()
            {
                let mean = xh.sum() / m;
                let var = xh.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / m;
                let is = (var + eps).sqrt().recip();
                inv_std[ch] = is;
                xh.mapv_inplace(|v| (v - mean) * is);
                row.assign(&xh);
                row.mapv_inplace(|v| v * gamma[ch] + beta[ch]);
                let unbiased = if m > F::one() { var * m / (m - F::one()) } else { var };
                let rm = &mut running[spec.stat_off + ch];
                *rm = (F::one() - momentum) * *rm + momentum * mean;
                let rv = &mut running[spec.stat_off + c + ch];
                *rv = (F::one() - momentum) * *rv + momentum * unbiased;
            }
            (x.like(out), Some(BnCache { xhat, inv_std }))
        }
    }
}

fn bn_backward<F: Scalar>(params: &[F], spec: &BnSpec, cache: &BnCache<F>, dy: &Feat<F>, grads: &mut [F]) -> Feat<F> {
    let c = spec.c;
    let m: F = lit(dy.data.ncols() as f64);
    let mut dx = dy.data.clone();
    for ch in 0..c {
        let g = params[spec.g_off + ch];
        let dyr = dy.data.row(ch);
        let xh = cache.xhat.row(ch);
        let sum_dy = dyr.sum();
        let sum_dy_xh = dyr.dot(&xh);
        grads[spec.g_off + ch] += sum_dy_xh;
        grads[spec.b_off + ch] += sum_dy;
        let k = g * cache.inv_std[ch] / m;
        let mut out = dx.row_mut(ch);
        ndarray::Zip::from(&mut out)
            .and(&dyr)
            .and(&xh)
            .for_each(|o, &d, &x| *o = k * (m * d - sum_dy - x * sum_dy_xh));
    }
    dy.like(dx)
}

fn leaky_relu<F: Scalar>(x: &mut Feat<F>) {
    let slope: F = lit(LEAKY_SLOPE);
    x.data.mapv_inplace(|v| if v > F::zero() { v } else { slope * v });
}

fn leaky_relu_backward<F: Scalar>(out: &Feat<F>, dy: &mut Feat<F>) {
    let slope: F = lit(LEAKY_SLOPE);
    ndarray::Zip::from(&mut dy.data)
        .and(&out.data)
        .for_each(|d, &o| {
            if o <= F::zero() {
                *d *= slope
            }
        });
}

fn maxpool<F: Scalar>(x: &Feat<F>) -> (Feat<F>, Vec<u32>) {
    let (c, n, h, w) = (x.data.nrows(), x.n, x.h, x.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Feat::zeros(c, n, oh, ow);
    let mut idx = vec![0u32; c * n * oh * ow];
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    for plane in 0..c * n {
        let sbase = plane * h * w;
        let dbase = plane * oh * ow;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = sbase + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = sbase + (2 * y + dy) * w + 2 * xx + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[dbase + y * ow + xx] = src[best];
                idx[dbase + y * ow + xx] = best as u32;
            }
        }
    }
    (out, idx)
}

fn maxpool_backward<F: Scalar>(dy: &Feat<F>, idx: &[u32], h: usize, w: usize) -> Feat<F> {
    let c = dy.data.nrows();
    let mut dx = Feat::zeros(c, dy.n, h, w);
    let dst = dx.data.as_slice_mut().expect("standard layout");
    for (&i, &g) in idx.iter().zip(dy.data.iter()) {
        dst[i as usize] += g;
    }
    dx
}

fn upsample<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let (c, n, h, w) = (x.data.nrows(), x.n, x.h, x.w);
    let mut out = Feat::zeros(c, n, 2 * h, 2 * w);
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    for plane in 0..c * n {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward<F: Scalar>(dy: &Feat<F>) -> Feat<F> {
    let (c, n, h, w) = (dy.data.nrows(), dy.n, dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(c, n, h, w);
    let src = dy.data.as_slice().expect("standard layout");
    let dst = dx.data.as_slice_mut().expect("standard layout");
    for plane in 0..c * n {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[plane * h * w + (y / 2) * w + xx / 2] += src[plane * 4 * h * w + y * 2 * w + xx];
            }
        }
    }
    dx
}

fn concat_channels<F: Scalar>(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
    let data = ndarray::concatenate(Axis(0), &[a.data.view(), b.data.view()]).expect("same width");
    a.like(data)
}

fn dropout<F: Scalar>(x: &mut Feat<F>, rate: f64, rng: &mut ChaCha8Rng) {
    let keep: F = lit(1.0 / (1.0 - rate));
    x.data.mapv_inplace(|v| if rng.random::<f64>() < rate { F::zero() } else { v * keep });
}

enum BnStats<'a, F: Scalar> {
    Eval(&'a [F]),
    Train(&'a mut [F]),
}

struct BlockCache<F: Scalar> {
    cols1: Array2<F>,
    bn1: BnCache<F>,
    act1: Feat<F>,
    cols2: Array2<F>,
    bn2: BnCache<F>,
    act2: Feat<F>,
}

struct DecCache<F: Scalar> {
    reduce_cols: Array2<F>,
    block: BlockCache<F>,
}

/// Intermediate values recorded by a training-mode forward pass.
pub struct Tape<F: Scalar = f32> {
    enc: Vec<BlockCache<F>>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    dec: Vec<DecCache<F>>,
    head_cols: Array2<F>,
    batch: usize,
    h: usize,
    w: usize,
}

/// UNet-style encoder/decoder producing `[batch, K, H, W]` logits.
pub struct UNet<F: Scalar = f32> {
    config: BackboneConfig,
    layout: Layout,
    params: Vec<F>,
    stats: Vec<F>,
    forwards: AtomicU64,
}

impl<F: Scalar> Clone for UNet<F> {
    fn clone(&self) -> Self {
        UNet {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for UNet<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Builds a backbone with fan-in scaled normal initialization drawn from `seed`.
pub fn build_backbone<F: Scalar>(config: &BackboneConfig, seed: u64) -> Result<UNet<F>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![F::zero(); layout.n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_conv = |spec: &ConvSpec, params: &mut [F]| {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for p in &mut params[spec.w_off..spec.w_off + spec.cout * spec.fan_in()] {
            *p = lit(normal.sample(&mut rng));
        }
    };
    let init_bn = |spec: &BnSpec, params: &mut [F]| {
        params[spec.g_off..spec.g_off + spec.c].fill(F::one());
    };
    let blocks = layout.enc.iter().chain(layout.dec.iter().map(|(_, b)| b));
    for (i, block) in blocks.enumerate() {
        if i >= layout.enc.len() {
            // decoder reduction conv precedes its block
            init_conv(&layout.dec[i - layout.enc.len()].0, &mut params);
        }
        init_conv(&block.conv1, &mut params);
        init_bn(&block.bn1, &mut params);
        init_conv(&block.conv2, &mut params);
        init_bn(&block.bn2, &mut params);
    }
    init_conv(&layout.head, &mut params);
    let mut stats = vec![F::zero(); layout.n_stats];
    let set_var = |spec: &BnSpec, stats: &mut [F]| {
        stats[spec.stat_off + spec.c..spec.stat_off + 2 * spec.c].fill(F::one());
    };
    for block in layout.enc.iter().chain(layout.dec.iter().map(|(_, b)| b)) {
        set_var(&block.bn1, &mut stats);
        set_var(&block.bn2, &mut stats);
    }
    Ok(UNet {
        config: *config,
        layout,
        params,
        stats,
        forwards: AtomicU64::new(0),
    })
}

impl<F: Scalar> UNet<F> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// Batch-norm running statistics (means then variances, per layer).
    pub fn running_stats(&self) -> &[F] {
        &self.stats
    }

    pub fn set_state(&mut self, params: Vec<F>, stats: Vec<F>) -> Result<()> {
        ensure!(
            params.len() == self.layout.n_params && stats.len() == self.layout.n_stats,
            Checkpoint,
            "parameter buffers ({}, {}) do not match architecture ({}, {})",
            params.len(),
            stats.len(),
            self.layout.n_params,
            self.layout.n_stats
        );
        self.params = params;
        self.stats = stats;
        Ok(())
    }

    /// Number of forward passes executed so far, across all modes.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.config.size_multiple();
        ensure!(
            c == self.config.in_channels,
            Shape,
            "expected {} input channels, got {c}",
            self.config.in_channels
        );
        ensure!(
            h % m == 0 && w % m == 0 && h > 0 && w > 0,
            Shape,
            "input size {h}x{w} must be divisible by 2^depth = {m}"
        );
        ensure!(x.shape()[0] > 0, Shape, "empty batch");
        Ok(())
    }

    /// Inference forward: batch-norm running statistics, no dropout.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let out = self.run(x, &mut BnStats::Eval(&self.stats), None, None);
        Ok(out.to_nchw())
    }

    /// Inference forward with dropout active before the bottleneck convs and the head.
    pub fn forward_dropout(&self, x: &Array4<F>, rate: f64, rng: &mut ChaCha8Rng) -> Result<Array4<F>> {
        self.check_input(x)?;
        let out = self.run(x, &mut BnStats::Eval(&self.stats), Some((rate, rng)), None);
        Ok(out.to_nchw())
    }

    /// Training forward: batch statistics (running averages are updated) and a tape for `backward`.
    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<(Array4<F>, Tape<F>)> {
        self.check_input(x)?;
        let mut stats = std::mem::take(&mut self.stats);
        let mut tape = Tape {
            enc: Vec::new(),
            pools: Vec::new(),
            dec: Vec::new(),
            head_cols: Array2::zeros((0, 0)),
            batch: x.shape()[0],
            h: x.shape()[2],
            w: x.shape()[3],
        };
        let out = self.run(x, &mut BnStats::Train(&mut stats), None, Some(&mut tape));
        self.stats = stats;
        Ok((out.to_nchw(), tape))
    }

    fn block_forward(
        &self,
        spec: &BlockSpec,
        x: &Feat<F>,
        stats: &mut BnStats<'_, F>,
        tape: Option<&mut Vec<BlockCache<F>>>,
    ) -> Feat<F> {
        let p = &self.params;
        let (h1, cols1) = conv_forward(p, &spec.conv1, x);
        let (mut a1, bn1) = bn_forward(p, &spec.bn1, &h1, stats);
        leaky_relu(&mut a1);
        let (h2, cols2) = conv_forward(p, &spec.conv2, &a1);
        let (mut a2, bn2) = bn_forward(p, &spec.bn2, &h2, stats);
        leaky_relu(&mut a2);
        if let (Some(tape), Some(bn1), Some(bn2)) = (tape, bn1, bn2) {
            tape.push(BlockCache {
                cols1,
                bn1,
                act1: a1,
                cols2,
                bn2,
                act2: a2.clone(),
            });
        }
        a2
    }

    fn block_backward(&self, spec: &BlockSpec, cache: &BlockCache<F>, dy: Feat<F>, grads: &mut [F]) -> Feat<F> {
        let p = &self.params;
        let mut d = dy;
        leaky_relu_backward(&cache.act2, &mut d);
        let d = bn_backward(p, &spec.bn2, &cache.bn2, &d, grads);
        let mut d = conv_backward(p, &spec.conv2, &cache.cols2, &d, grads);
        leaky_relu_backward(&cache.act1, &mut d);
        let d = bn_backward(p, &spec.bn1, &cache.bn1, &d, grads);
        conv_backward(p, &spec.conv1, &cache.cols1, &d, grads)
    }

    fn run(
        &self,
        x: &Array4<F>,
        stats: &mut BnStats<'_, F>,
        mut dropout_rng: Option<(f64, &mut ChaCha8Rng)>,
        mut tape: Option<&mut Tape<F>>,
    ) -> Feat<F> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth + 1);
        let mut cur = Feat::from_nchw(x);
        for (level, spec) in self.layout.enc.iter().enumerate() {
            if level > 0 {
                let (pooled, idx) = maxpool(&cur);
                if let Some(t) = tape.as_deref_mut() {
                    t.pools.push((idx, cur.h, cur.w));
                }
                cur = pooled;
            }
            if level == depth {
                if let Some((rate, rng)) = dropout_rng.as_mut() {
                    dropout(&mut cur, *rate, rng);
                }
            }
            cur = self.block_forward(spec, &cur, stats, tape.as_deref_mut().map(|t| &mut t.enc));
            skips.push(cur.clone());
        }
        skips.pop();
        for (reduce, block) in &self.layout.dec {
            let skip = skips.pop().expect("one skip per level");
            let (reduced, reduce_cols) = conv_forward(&self.params, reduce, &cur);
            let merged = concat_channels(&skip, &upsample(&reduced));
            let mut block_tape = Vec::new();
            cur = self.block_forward(block, &merged, stats, tape.is_some().then_some(&mut block_tape));
            if let Some(t) = tape.as_deref_mut() {
                t.dec.push(DecCache {
                    reduce_cols,
                    block: block_tape.pop().expect("recorded"),
                });
            }
        }
        if let Some((rate, rng)) = dropout_rng.as_mut() {
            dropout(&mut cur, *rate, rng);
        }
        let (out, head_cols) = conv_forward(&self.params, &self.layout.head, &cur);
        if let Some(t) = tape {
            t.head_cols = head_cols;
        }
        out
    }

    /// Gradient of the parameters given `dL/dlogits` for the recorded pass.
    pub fn backward(&self, tape: &Tape<F>, grad_logits: &Array4<F>) -> Result<Vec<F>> {
        let expected = [tape.batch, self.config.num_classes, tape.h, tape.w];
        ensure!(
            grad_logits.shape() == expected,
            Shape,
            "gradient shape {:?} does not match output {:?}",
            grad_logits.shape(),
            expected
        );
        let mut grads = vec![F::zero(); self.params.len()];
        let p = &self.params;
        let dy = Feat::from_nchw(grad_logits);
        let mut d = conv_backward(p, &self.layout.head, &tape.head_cols, &dy, &mut grads);
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Feat<F>>> = (0..depth).map(|_| None).collect();
        for (i, ((reduce, block), cache)) in self.layout.dec.iter().zip(&tape.dec).enumerate().rev() {
            let level = depth - 1 - i;
            let dmerged = self.block_backward(block, &cache.block, d, &mut grads);
            let skip_c = block.conv1.cin / 2;
            let dskip = dmerged.like(dmerged.data.slice(s![..skip_c, ..]).to_owned());
            let dup = dmerged.like(dmerged.data.slice(s![skip_c.., ..]).to_owned());
            skip_grads[level] = Some(dskip);
            let dred = upsample_backward(&dup);
            d = conv_backward(p, reduce, &cache.reduce_cols, &dred, &mut grads);
        }
        for level in (0..=depth).rev() {
            if level < depth {
                let skip = skip_grads[level].take().expect("decoder visited every level");
                d.data += &skip.data;
            }
            d = self.block_backward(&self.layout.enc[level], &tape.enc[level], d, &mut grads);
            if level > 0 {
                let (idx, h, w) = &tape.pools[level - 1];
                d = maxpool_backward(&d, idx, *h, *w);
            }
        }
        Ok(grads)
    }
}

/// SGD with momentum and L2 weight decay, PyTorch semantics:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F: Scalar = f32> {
    pub momentum: F,
    pub weight_decay: F,
    pub velocity: Vec<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(n_params: usize, momentum: F, weight_decay: F) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![F::zero(); n_params],
        }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Two identically shaped networks with different initializations.
#[derive(Debug, Clone)]
pub struct DualNet<F: Scalar = f32> {
    pub enet: UNet<F>,
    pub snet: UNet<F>,
    pub seeds: (u64, u64),
}

pub fn init_dualnet<F: Scalar>(config: &BackboneConfig, seed1: u64, seed2: u64) -> Result<DualNet<F>> {
    ensure!(
        seed1 != seed2,
        Config,
        "E-Net and S-Net need different initialization seeds, both were {seed1}"
    );
    Ok(DualNet {
        enet: build_backbone(config, seed1)?,
        snet: build_backbone(config, seed2)?,
        seeds: (seed1, seed2),
    })
}

/// `n_samples` stochastic forwards with dropout active; the sequence is fixed by `seed`.
pub fn forward_with_dropout_samples<F: Scalar>(
    net: &UNet<F>,
    input: &Array4<F>,
    n_samples: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<Array4<F>>> {
    ensure!(
        rate > 0.0 && rate < 1.0,
        Config,
        "dropout rate must lie in (0, 1), got {rate}"
    );
    ensure!(n_samples >= 1, Validation, "need at least one dropout sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| net.forward_dropout(input, rate, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 2,
            depth: 2,
            dropout_rate: 0.0,
        }
    }

    fn input(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 1, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_backbone::<f32>(&tiny(), 5).unwrap();
        let b = build_backbone::<f32>(&tiny(), 5).unwrap();
        let c = build_backbone::<f32>(&tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_shape_contract() {
        let cfg = BackboneConfig {
            base_width: 4,
            depth: 3,
            num_classes: 4,
            ..tiny()
        };
        let net = build_backbone::<f32>(&cfg, 0).unwrap();
        let out = net.forward(&input(2, 64, 64, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 4, 64, 64]);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = build_backbone::<f32>(&tiny(), 0).unwrap();
        let err = net.forward(&input(1, 10, 8, 0)).unwrap_err();
        assert!(err.to_string().contains("divisible by 2^depth = 4"), "{err}");
    }

    #[test]
    fn param_count_regression() {
        // in block 1->2: (9*1*2+2) + 4 + (9*2*2+2) + 4 = 66
        // down 2->4: (18*4+4) + 8 + (36*4+4) + 8 = 240
        // down 4->8: (36*8+8) + 16 + (72*8+8) + 16 = 912
        // up 8->4: (8*4+4) + block 8->4: (72*4+4)+8+(36*4+4)+8 = 36 + 456 = 492
        // up 4->2: (4*2+2) + block 4->2: (36*2+2)+4+(18*2+2)+4 = 10 + 120 = 130
        // head 2->3: 2*3+3 = 9
        assert_eq!(tiny().param_count(), 66 + 240 + 912 + 492 + 130 + 9);
        // sum of 9*co*(ci+co) + 6*co per block, 1x1 reductions and the head
        assert_eq!(BackboneConfig::default().param_count(), 1_813_252);
    }

    #[test]
    fn dualnet_requires_distinct_seeds() {
        assert!(init_dualnet::<f32>(&tiny(), 7, 7).is_err());
        let d = init_dualnet::<f32>(&tiny(), 1, 2).unwrap();
        assert_ne!(d.enet.params(), d.snet.params());
        let x = input(1, 8, 8, 3);
        assert_ne!(d.enet.forward(&x).unwrap(), d.snet.forward(&x).unwrap());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = build_backbone::<f32>(&tiny(), 3).unwrap();
        let x = input(2, 8, 8, 4);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(net.forward_count(), 2);
    }

    #[test]
    fn dropout_sampling_is_seeded() {
        let net = build_backbone::<f32>(&tiny(), 3).unwrap();
        let x = input(1, 8, 8, 4);
        let a = forward_with_dropout_samples(&net, &x, 3, 0.3, 11).unwrap();
        let b = forward_with_dropout_samples(&net, &x, 3, 0.3, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let tiny_rate = forward_with_dropout_samples(&net, &x, 1, 1e-12, 0).unwrap();
        let det = net.forward(&x).unwrap();
        assert!(tiny_rate[0].iter().zip(det.iter()).all(|(a, b)| (a - b).abs() < 1e-5));
        assert!(forward_with_dropout_samples(&net, &x, 1, 1.0, 0).is_err());
        assert!(forward_with_dropout_samples(&net, &x, 1, 0.0, 0).is_err());
    }

    /// Finite-difference check of the full backward pass in train mode, in f64.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let mut net = build_backbone::<f64>(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.random::<f64>());
        let weights = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random::<f64>() - 0.5);
        let objective = |net: &mut UNet<f64>| -> f64 {
            let (out, _) = net.forward_train(&x).unwrap();
            (&out * &weights).sum()
        };
        let (_, tape) = net.forward_train(&x).unwrap();
        let grads = net.backward(&tape, &weights).unwrap();
        let n = net.params().len();
        for i in 0..n {
            let orig = net.params()[i];
            let h = 1e-5;
            net.params_mut()[i] = orig + h;
            let up = objective(&mut net);
            net.params_mut()[i] = orig - h;
            let down = objective(&mut net);
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[i];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-7,
                "param {i}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn sgd_step_matches_closed_form() {
        let mut opt = Sgd::new(1, 0.9, 1e-4);
        let mut p = [1.0f32];
        opt.step(&mut p, &[0.5], 0.1);
        let v1 = 0.5 + 1e-4;
        assert!((p[0] - (1.0 - 0.1 * v1)).abs() < 1e-7);
        let p1 = p[0];
        opt.step(&mut p, &[0.5], 0.1);
        let v2 = 0.9 * v1 + 0.5 + 1e-4 * p1;
        assert!((p[0] - (p1 - 0.1 * v2)).abs() < 1e-7);
    }
}
