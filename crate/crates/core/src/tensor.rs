//! Dense NCHW tensors, bias-free linear maps and the shared numeric
//! primitives (group normalization, channel embedding, softmax, seeded
//! initialization).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, shape_err, Result};

/// Element type tag, mirrored by the tensor file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type used throughout the crate.
pub trait Real:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense `n x c x h x w` array stored contiguously in row-major NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(shape_err!(
                "buffer of {} values does not match dims {:?} ({} values)",
                data.len(),
                dims,
                len
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Standard-normal entries from a ChaCha8 stream seeded with `seed`.
    pub fn randn(dims: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { dims, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(dims: [usize; 4], lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::of(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self { dims, data }
    }

    /// Xavier-uniform initialization; fans follow the convolution-weight
    /// convention (`fan_in = c*h*w`, `fan_out = n*h*w`).
    pub fn seeded(dims: [usize; 4], spec: &RngSpec) -> Self {
        let receptive = dims[2] * dims[3];
        let bound = spec.scheme.bound(dims[1] * receptive, dims[0] * receptive);
        Self {
            dims,
            data: spec.sample_uniform(dims.iter().product(), bound),
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `h x w` plane of one channel.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Per-sample channel-last copy: `n` buffers of `h*w*c` values.
    pub(crate) fn to_nhwc(&self) -> Vec<Vec<T>> {
        let [n, c, h, w] = self.dims;
        let span = c * h * w;
        (0..n)
            .map(|b| {
                let mut out = vec![T::zero(); span];
                transpose(&self.data[b * span..(b + 1) * span], c, h * w, &mut out);
                out
            })
            .collect()
    }

    pub(crate) fn from_nhwc(samples: &[Vec<T>], c: usize, h: usize, w: usize) -> Self {
        let mut out = Self::zeros([samples.len(), c, h, w]);
        let span = c * h * w;
        for (b, sample) in samples.iter().enumerate() {
            transpose(sample, h * w, c, &mut out.data[b * span..(b + 1) * span]);
        }
        out
    }
}

/// Writes the `cols x rows` transpose of row-major `src` into `dst`, in
/// cache-sized tiles.
fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Bias-free `rows x cols` matrix applied to channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(rows: usize, cols: usize, weights: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err!(
                "linear map needs at least one row and column, got {rows}x{cols}"
            ));
        }
        if weights.len() != rows * cols {
            return Err(shape_err!(
                "linear map {rows}x{cols} needs {} weights, got {}",
                rows * cols,
                weights.len()
            ));
        }
        Ok(Self {
            rows,
            cols,
            weights,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.weights[i * n + i] = T::one();
        }
        m
    }

    /// Xavier-uniform weights with `fan_in = cols`, `fan_out = rows`.
    pub fn seeded(rows: usize, cols: usize, spec: &RngSpec) -> Self {
        let bound = spec.scheme.bound(cols, rows);
        Self {
            rows,
            cols,
            weights: spec.sample_uniform(rows * cols, bound),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = M * input`.
    pub fn apply_into(&self, input: &[T], out: &mut [T]) {
        debug_assert_eq!(input.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.cols)) {
            *o = dot(row, input);
        }
    }

    pub fn apply(&self, input: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.apply_into(input, &mut out);
        out
    }

    pub fn cast<U: Real>(&self) -> LinearMap<U> {
        LinearMap {
            rows: self.rows,
            cols: self.cols,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Inner product with eight independent accumulators so the loop
/// vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; 8] = x.try_into().expect("chunk of 8");
        let y: &[T; 8] = y.try_into().expect("chunk of 8");
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// `out += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Initialization scheme for learned weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    XavierUniform,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::XavierUniform => libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64),
        }
    }
}

/// Seed plus scheme; identical specs produce bit-identical weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngSpec {
    pub seed: u64,
    pub scheme: InitScheme,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scheme: InitScheme::XavierUniform,
        }
    }

    fn sample_uniform<T: Real>(&self, len: usize, bound: f64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..len)
            .map(|_| T::of(bound * (2.0 * rng.random::<f64>() - 1.0)))
            .collect()
    }
}

/// Per-(sample, group) statistics retained by [`group_norm_with_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormStats<T> {
    pub groups: usize,
    /// `(mean, 1/sqrt(var + eps))` per sample and group, sample-major.
    pub moments: Vec<(T, T)>,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Group normalization without affine parameters.
pub fn group_norm<T: Real>(x: &Tensor<T>, groups: usize, eps: f64) -> Result<Tensor<T>> {
    group_norm_with_stats(x, groups, eps).map(|(y, _)| y)
}

pub fn group_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormStats<T>)> {
    let [n, c, h, w] = x.dims();
    if groups == 0 || c % groups != 0 {
        return Err(config_err!(
            "group_norm: {c} channels not divisible into {groups} groups"
        ));
    }
    if !(eps > 0.0) {
        return Err(config_err!("group_norm: eps must be positive, got {eps}"));
    }
    let span = (c / groups) * h * w;
    let mut out = x.clone();
    let mut moments = Vec::with_capacity(n * groups);
    for chunk in out.data.chunks_exact_mut(span) {
        // Accumulate in f64 regardless of dtype.
        let count = span as f64;
        let mean = compensated_sum(chunk.iter().map(|v| v.as_f64())) / count;
        let var = compensated_sum(chunk.iter().map(|v| (v.as_f64() - mean).powi(2))) / count;
        let inv_std = 1.0 / libm::sqrt(var + eps);
        for v in chunk.iter_mut() {
            *v = T::of((v.as_f64() - mean) * inv_std);
        }
        moments.push((T::of(mean), T::of(inv_std)));
    }
    Ok((out, GroupNormStats { groups, moments }))
}

/// Applies `m` to the channel vector at every spatial position.
pub fn linear_embed<T: Real>(x: &Tensor<T>, m: &LinearMap<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if c != m.cols() {
        return Err(shape_err!(
            "linear_embed: input has {c} channels, map expects {}",
            m.cols()
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros([n, m.rows(), h, w]);
    for b in 0..n {
        for r in 0..m.rows() {
            let dst_start = (b * m.rows() + r) * hw;
            let dst = &mut out.data[dst_start..dst_start + hw];
            for (k, &coef) in m.row(r).iter().enumerate() {
                if coef == T::zero() {
                    continue;
                }
                for (o, &v) in dst.iter_mut().zip(x.plane(b, k)) {
                    *o += coef * v;
                }
            }
        }
    }
    Ok(out)
}

/// Softmax with max-subtraction.
pub fn softmax_vec<T: Real>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_constant_group_is_zero() {
        let x = Tensor::<f64>::from_fn([1, 4, 3, 3], |_, c, _, _| if c < 2 { 5.0 } else { -1.5 });
        let y = group_norm(&x, 2, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_two_values() {
        let x = Tensor::<f64>::new([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = group_norm(&x, 1, 1e-5).unwrap();
        // mean 2, variance 1
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-6);
        assert!((y.data()[1] - s).abs() < 1e-6);
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn group_norm_instance_wise() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let y = group_norm(&x, 1, 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let want = [-s, -s, s, s];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros([1, 6, 2, 2]);
        assert!(matches!(
            group_norm(&x, 4, 1e-5),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn linear_embed_examples() {
        let x = Tensor::<f64>::randn([2, 3, 4, 5], 7);
        let id = linear_embed(&x, &LinearMap::identity(3)).unwrap();
        assert_eq!(id, x);
        let zero = linear_embed(&x, &LinearMap::zeros(2, 3)).unwrap();
        assert_eq!(zero.dims(), [2, 2, 4, 5]);
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::new([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let m = LinearMap::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_embed(&x, &m).unwrap().data(), &[7.0]);
    }

    #[test]
    fn linear_embed_channel_mismatch() {
        let x = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(matches!(
            linear_embed(&x, &LinearMap::zeros(2, 4)),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_vec(&[0.0f64; 4]), vec![0.25; 4]);
        assert!(softmax_vec(&[10.0f64, 0.0])[0] > 0.999);
        let got = softmax_vec(&[1.0f64, 2.0, 3.0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (g, v) in got.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((g - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let spec = RngSpec::new(42);
        let a = LinearMap::<f32>::seeded(32, 256, &spec);
        let b = LinearMap::<f32>::seeded(32, 256, &spec);
        assert_eq!(a, b);
        let c = LinearMap::<f32>::seeded(32, 256, &RngSpec::new(43));
        assert_ne!(a, c);
        let bound = (6.0f64 / (256.0 + 32.0)).sqrt() as f32;
        assert!(a.weights().iter().all(|w| w.abs() <= bound));

        let t = Tensor::<f64>::seeded([8, 4, 3, 3], &spec);
        let bound = (6.0f64 / (4.0 * 9.0 + 8.0 * 9.0)).sqrt();
        assert!(t.data().iter().all(|w| w.abs() <= bound));
        assert_eq!(t, Tensor::<f64>::seeded([8, 4, 3, 3], &spec));
    }

    #[test]
    fn nhwc_round_trip() {
        let x = Tensor::<f32>::randn([2, 3, 4, 5], 1);
        let back = Tensor::from_nhwc(&x.to_nhwc(), 3, 4, 5);
        assert_eq!(back, x);
    }
}
