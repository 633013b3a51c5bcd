//! Analytic backward passes and a finite-difference gradient checker.
//!
//! The forward pass retains embedded features, raw similarity scores,
//! kernel weights and the sampling coordinates, so backward never re-runs
//! the forward. Bilinear sampling is treated as non-differentiable in a
//! coordinate once that coordinate is clamped (subgradient 0).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernel::{KernelMap, NormFn};
use crate::ops::{run, OffsetDof, SapaConfig, SapaParams, Trace, Variant};
use crate::sampling::{Coord, CoordSet, PointSet, Tap};
use crate::tensor::{dot, linear_embed, GroupNormStats, LinearMap, Real, Tensor};

/// `d loss / d s_i = w_i (u_i - sum_j u_j w_j)` for softmax weights `w`.
pub fn softmax_backward<T: Real>(weights: &[T], upstream: &[T]) -> Vec<T> {
    let inner = dot(weights, upstream);
    weights
        .iter()
        .zip(upstream)
        .map(|(&w, &u)| w * (u - inner))
        .collect()
}

/// Backward of `w = h(s) / sum h(s)` for any normalization function.
fn normalize_backward<T: Real>(
    scores: &[T],
    weights: &[T],
    upstream: &[T],
    h: NormFn,
    out: &mut [T],
) {
    match h {
        NormFn::None => out.copy_from_slice(upstream),
        NormFn::Exp => {
            let inner = dot(weights, upstream);
            for ((o, &w), &u) in out.iter_mut().zip(weights).zip(upstream) {
                *o = w * (u - inner);
            }
        }
        _ => {
            let z: T = scores.iter().map(|&s| h.apply(s)).sum();
            if z == T::zero() || !z.is_finite() {
                // Uniform fallback is locally constant.
                out.iter_mut().for_each(|o| *o = T::zero());
                return;
            }
            let inner = dot(weights, upstream);
            for ((o, &s), &u) in out.iter_mut().zip(scores).zip(upstream) {
                *o = h.derivative(s) / z * (u - inner);
            }
        }
    }
}

/// Gradients of bilinear sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad<T> {
    pub d_x: Tensor<T>,
    pub d_coords: Vec<Coord<T>>,
    /// Coordinates with at least one clamped axis (gradient zeroed there).
    pub clamped: usize,
}

/// Backward of [`crate::sampling::bilinear_sample`] for sample `batch`.
pub fn bilinear_sample_backward<T: Real>(
    x: &Tensor<T>,
    batch: usize,
    coords: &CoordSet<T>,
    upstream: &PointSet<T>,
) -> Result<SampleGrad<T>> {
    let [n, c, h, w] = x.dims();
    if batch >= n {
        return Err(shape_err!(
            "sample index {batch} out of range for batch of {n}"
        ));
    }
    if upstream.channels != c || upstream.values.len() != coords.coords.len() * c {
        return Err(shape_err!(
            "upstream point set does not match coordinates and channels"
        ));
    }
    let mut d_x = Tensor::zeros(x.dims());
    let mut d_coords = Vec::with_capacity(coords.coords.len());
    let mut clamped = 0;
    let hw = h * w;
    for (k, &coord) in coords.coords.iter().enumerate() {
        let tap = Tap::new(h, w, coord);
        let corners = tap.corners(w);
        if !(tap.row_free && tap.col_free) {
            clamped += 1;
        }
        let one = T::one();
        let u = &upstream.values[k * c..(k + 1) * c];
        let (mut g_row, mut g_col) = (T::zero(), T::zero());
        for (ch, &uc) in u.iter().enumerate() {
            let base = (batch * c + ch) * hw;
            for &(idx, wt) in corners.iter() {
                d_x.data_mut()[base + idx] += wt * uc;
            }
            // Corner differences keep the result exact on flat data.
            let v = |corner: usize| x.data()[base + corners[corner].0];
            let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
            g_row += uc * ((v10 - v00) * (one - tap.fc) + (v11 - v01) * tap.fc);
            g_col += uc * ((v01 - v00) * (one - tap.fr) + (v11 - v10) * tap.fr);
        }
        let zero = T::zero();
        d_coords.push(Coord::new(
            if tap.row_free { g_row } else { zero },
            if tap.col_free { g_col } else { zero },
        ));
    }
    Ok(SampleGrad {
        d_x,
        d_coords,
        clamped,
    })
}

/// Backward of [`crate::tensor::linear_embed`]: `(d_x, d_m)`.
pub fn linear_embed_backward<T: Real>(
    x: &Tensor<T>,
    m: &LinearMap<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, LinearMap<T>)> {
    let [n, c, h, w] = x.dims();
    if upstream.dims() != [n, m.rows(), h, w] || c != m.cols() {
        return Err(shape_err!(
            "linear_embed_backward: upstream {:?} does not match",
            upstream.dims()
        ));
    }
    let mt = LinearMap::new(m.cols(), m.rows(), transpose(m))?;
    let d_x = linear_embed(upstream, &mt)?;
    let mut d_m = LinearMap::zeros(m.rows(), m.cols());
    for b in 0..n {
        for r in 0..m.rows() {
            let u = upstream.plane(b, r);
            for k in 0..c {
                d_m.weights_mut()[r * c + k] += dot(u, x.plane(b, k));
            }
        }
    }
    Ok((d_x, d_m))
}

fn transpose<T: Real>(m: &LinearMap<T>) -> Vec<T> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.weights()[i * c + j];
        }
    }
    out
}

/// Backward of group normalization (no affine) from its normalized output.
pub fn group_norm_backward<T: Real>(
    normalized: &Tensor<T>,
    stats: &GroupNormStats<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if normalized.dims() != upstream.dims() {
        return Err(shape_err!("group_norm_backward: shapes differ"));
    }
    let [n, c, h, w] = normalized.dims();
    let span = (c / stats.groups) * h * w;
    let mut out = upstream.clone();
    let chunks = out
        .data_mut()
        .chunks_exact_mut(span)
        .zip(normalized.data().chunks_exact(span));
    for ((dy, y), &(_, inv_std)) in chunks.zip(&stats.moments) {
        let count = T::of(span as f64);
        let mean_dy = dy.iter().copied().sum::<T>() / count;
        let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / count;
        for (d, &yv) in dy.iter_mut().zip(y) {
            *d = inv_std * (*d - mean_dy - yv * mean_dyy);
        }
    }
    debug_assert_eq!(stats.moments.len(), n * stats.groups);
    Ok(out)
}

/// Gradients of a SAPA forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    pub d_decoder: Tensor<T>,
    pub d_encoder: Tensor<T>,
    pub d_mx: Vec<LinearMap<T>>,
    pub d_my: Vec<LinearMap<T>>,
    pub d_phi: Option<LinearMap<T>>,
    /// Sampling coordinates that sat on or beyond the clamp boundary.
    pub clamped_coords: usize,
}

impl<T: Real> GradBundle<T> {
    /// Adds `other` into `self`; shapes must agree.
    pub fn accumulate(&mut self, other: &GradBundle<T>) -> Result<()> {
        fn add<T: Real>(a: &mut [T], b: &[T]) -> Result<()> {
            if a.len() != b.len() {
                return Err(shape_err!("gradient shapes differ"));
            }
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
            Ok(())
        }
        if self.d_mx.len() != other.d_mx.len() || self.d_phi.is_some() != other.d_phi.is_some() {
            return Err(shape_err!("gradient bundles have different parameter sets"));
        }
        add(self.d_decoder.data_mut(), other.d_decoder.data())?;
        add(self.d_encoder.data_mut(), other.d_encoder.data())?;
        for (a, b) in self
            .d_mx
            .iter_mut()
            .zip(&other.d_mx)
            .chain(self.d_my.iter_mut().zip(&other.d_my))
        {
            add(a.weights_mut(), b.weights())?;
        }
        if let (Some(a), Some(b)) = (self.d_phi.as_mut(), other.d_phi.as_ref()) {
            add(a.weights_mut(), b.weights())?;
        }
        self.clamped_coords += other.clamped_coords;
        Ok(())
    }

    /// Sums per-thread partial bundles.
    pub fn reduce(parts: impl IntoIterator<Item = GradBundle<T>>) -> Result<Option<GradBundle<T>>> {
        let mut iter = parts.into_iter();
        let Some(mut acc) = iter.next() else {
            return Ok(None);
        };
        for part in iter {
            acc.accumulate(&part)?;
        }
        Ok(Some(acc))
    }

    /// Flattened gradients in parameter order: decoder, encoder, `M_x`
    /// (groups concatenated), `M_y`, then `phi` when present.
    pub fn flatten(&self) -> Vec<Vec<T>> {
        let mut out = vec![
            self.d_decoder.data().to_vec(),
            self.d_encoder.data().to_vec(),
        ];
        if !self.d_mx.is_empty() {
            out.push(
                self.d_mx
                    .iter()
                    .flat_map(|m| m.weights().iter().copied())
                    .collect(),
            );
            out.push(
                self.d_my
                    .iter()
                    .flat_map(|m| m.weights().iter().copied())
                    .collect(),
            );
        }
        if let Some(phi) = &self.d_phi {
            out.push(phi.weights().to_vec());
        }
        out
    }
}

/// Inputs, parameters and intermediates retained by a forward pass.
#[derive(Debug, Clone)]
pub struct SavedForward<T> {
    decoder: Tensor<T>,
    encoder: Tensor<T>,
    params: SapaParams<T>,
    cfg: SapaConfig,
    trace: Trace<T>,
}

impl<T: Real> SavedForward<T> {
    pub fn kernels(&self) -> &KernelMap<T> {
        &self.trace.kernels
    }

    pub fn config(&self) -> &SapaConfig {
        &self.cfg
    }

    /// Per-coordinate discrete sampling state (cell plus clamp flags).
    /// Window selections are fixed, so only dynamic selection contributes.
    pub fn regime(&self) -> Vec<u64> {
        let (h, w) = (self.decoder.h(), self.decoder.w());
        self.trace
            .coords
            .iter()
            .flatten()
            .flatten()
            .flat_map(|set| set.coords.iter())
            .map(|&c| {
                let (r0, c0, rf, cf) = Tap::new(h, w, c).regime();
                r0 as u64 | (c0 as u64) << 24 | (rf as u64) << 48 | (cf as u64) << 49
            })
            .collect()
    }
}

/// Forward pass that keeps what the backward pass needs.
pub fn forward_with_state<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    params: &SapaParams<T>,
    cfg: &SapaConfig,
) -> Result<(Tensor<T>, SavedForward<T>)> {
    let (out, trace) = run(decoder, encoder, params, cfg, true)?;
    let saved = SavedForward {
        decoder: decoder.clone(),
        encoder: encoder.clone(),
        params: params.clone(),
        cfg: cfg.clone(),
        trace,
    };
    Ok((out, saved))
}

pub fn sapa_b_backward<T: Real>(
    saved: &SavedForward<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    if saved.cfg.variant != Variant::B {
        return Err(Error::Config(format!(
            "expected a SAPA-B forward, got {}",
            saved.cfg.variant.name()
        )));
    }
    sapa_backward(saved, upstream)
}

pub fn sapa_d_backward<T: Real>(
    saved: &SavedForward<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    if saved.cfg.variant != Variant::D {
        return Err(Error::Config(format!(
            "expected a SAPA-D forward, got {}",
            saved.cfg.variant.name()
        )));
    }
    sapa_backward(saved, upstream)
}

/// Backward for any variant.
pub fn sapa_backward<T: Real>(
    saved: &SavedForward<T>,
    upstream: &Tensor<T>,
) -> Result<GradBundle<T>> {
    let SavedForward {
        decoder,
        encoder,
        params,
        cfg,
        trace,
    } = saved;
    let [n, c, h, w] = decoder.dims();
    let (ce, oh, ow) = (encoder.c(), encoder.h(), encoder.w());
    if upstream.dims() != [n, c, oh, ow] {
        return Err(shape_err!(
            "upstream {:?} does not match output {:?}",
            upstream.dims(),
            [n, c, oh, ow]
        ));
    }
    let kernels = &trace.kernels;
    let feats = &trace.feats;
    let (groups, points, kd) = (kernels.groups, kernels.points, feats.key_dim);
    let cg = c / groups;
    let selection = trace.selection();
    let vals = decoder.to_nhwc();
    let up = upstream.to_nhwc();
    let dynamic = cfg.variant == Variant::D;

    let mut d_vals = vec![vec![T::zero(); h * w * c]; n];
    let mut d_keys = vec![vec![vec![T::zero(); h * w * kd]; groups]; n];
    let mut d_queries = vec![vec![vec![T::zero(); oh * ow * kd]; groups]; n];
    let mut d_coords = if dynamic {
        vec![vec![vec![Coord::default(); oh * ow * points]; groups]; n]
    } else {
        Vec::new()
    };
    let mut clamped_coords = 0;

    let mut dw = vec![T::zero(); points];
    let mut ds = vec![T::zero(); points];
    let mut taps = Vec::with_capacity(points);
    let mut key = vec![T::zero(); kd];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let pos = i * ow + j;
                for k in 0..groups {
                    let g = &up[b][pos * c + k * cg..pos * c + (k + 1) * cg];
                    let kidx = (((b * oh + i) * ow + j) * groups + k) * points;
                    let weights = &kernels.weights[kidx..kidx + points];
                    let scores = &trace.scores[kidx..kidx + points];
                    let q = &feats.queries[b][k][pos * kd..(pos + 1) * kd];
                    let keys = &feats.keys[b][k];
                    let vb = &vals[b];
                    let corner_val = |idx: usize| &vb[idx * c + k * cg..idx * c + (k + 1) * cg];

                    taps.clear();
                    taps.extend(
                        selection
                            .get(b, k)
                            .at(i, j)
                            .iter()
                            .map(|&coord| Tap::new(h, w, coord)),
                    );
                    for (d, tap) in dw.iter_mut().zip(&taps) {
                        *d = tap
                            .corners(w)
                            .iter()
                            .map(|&(idx, cw)| cw * dot(g, corner_val(idx)))
                            .sum();
                    }
                    normalize_backward(scores, weights, &dw, cfg.norm_fn, &mut ds);

                    for (p, tap) in taps.iter().enumerate() {
                        let corners = tap.corners(w);
                        key.iter_mut().for_each(|v| *v = T::zero());
                        for &(idx, cw) in &corners {
                            let a = weights[p] * cw;
                            for (d, &gv) in d_vals[b][idx * c + k * cg..idx * c + (k + 1) * cg]
                                .iter_mut()
                                .zip(g)
                            {
                                *d += a * gv;
                            }
                            let bk = ds[p] * cw;
                            for (d, &qv) in d_keys[b][k][idx * kd..(idx + 1) * kd].iter_mut().zip(q)
                            {
                                *d += bk * qv;
                            }
                            for (kv, &src) in key.iter_mut().zip(&keys[idx * kd..(idx + 1) * kd]) {
                                *kv += cw * src;
                            }
                        }
                        for (d, &kv) in d_queries[b][k][pos * kd..(pos + 1) * kd]
                            .iter_mut()
                            .zip(&key)
                        {
                            *d += ds[p] * kv;
                        }
                        if dynamic {
                            if !(tap.row_free && tap.col_free) {
                                clamped_coords += 1;
                            }
                            let (dr, dc) = tap.coord_derivatives();
                            let (mut gr, mut gc) = (T::zero(), T::zero());
                            for (corner, &(idx, _)) in corners.iter().enumerate() {
                                let gv = weights[p] * dot(g, corner_val(idx))
                                    + ds[p] * dot(q, &keys[idx * kd..(idx + 1) * kd]);
                                gr += dr[corner] * gv;
                                gc += dc[corner] * gv;
                            }
                            d_coords[b][k][pos * points + p] = Coord::new(gr, gc);
                        }
                    }
                }
            }
        }
    }

    // Similarity features back to (normalized) inputs and embeddings.
    let normed = feats.normed.as_ref();
    let zd = normed.map_or(decoder, |nm| &nm.decoder).to_nhwc();
    let ze = normed.map_or(encoder, |nm| &nm.encoder).to_nhwc();
    let mut d_zd = vec![vec![T::zero(); h * w * c]; n];
    let mut d_ze = vec![vec![T::zero(); oh * ow * ce]; n];
    let mut d_mx = Vec::new();
    let mut d_my = Vec::new();
    match cfg.variant {
        Variant::I => {
            for b in 0..n {
                for k in 0..groups {
                    for pos in 0..h * w {
                        for t in 0..cg {
                            d_zd[b][pos * c + k * cg + t] += d_keys[b][k][pos * cg + t];
                        }
                    }
                    for pos in 0..oh * ow {
                        for t in 0..cg {
                            d_ze[b][pos * ce + k * cg + t] += d_queries[b][k][pos * cg + t];
                        }
                    }
                }
            }
        }
        Variant::B | Variant::D => {
            for k in 0..groups {
                let mut gx = LinearMap::zeros(kd, c);
                let mut gy = LinearMap::zeros(kd, ce);
                for b in 0..n {
                    embed_backward(&params.mx[k], &mut gx, &d_keys[b][k], &zd[b], &mut d_zd[b]);
                    embed_backward(
                        &params.my[k],
                        &mut gy,
                        &d_queries[b][k],
                        &ze[b],
                        &mut d_ze[b],
                    );
                }
                d_mx.push(gx);
                d_my.push(gy);
            }
        }
    }
    let mut d_decoder = Tensor::from_nhwc(&d_zd, c, h, w);
    let mut d_encoder = Tensor::from_nhwc(&d_ze, ce, oh, ow);
    if let Some(nm) = normed {
        d_decoder = group_norm_backward(&nm.decoder, &nm.decoder_stats, &d_decoder)?;
        d_encoder = group_norm_backward(&nm.encoder, &nm.encoder_stats, &d_encoder)?;
    }
    let assembly = Tensor::from_nhwc(&d_vals, c, h, w);
    d_decoder
        .data_mut()
        .iter_mut()
        .zip(assembly.data())
        .for_each(|(a, &b)| *a += b);

    // Coordinates back through the offset distribution and the offset layer.
    let mut d_phi = None;
    if dynamic {
        let phi = params
            .phi
            .as_ref()
            .expect("dynamic selection always has an offset layer");
        let field = trace
            .offsets
            .as_ref()
            .expect("dynamic selection always records offsets");
        let s = cfg.ratio;
        let mut d_raw = Tensor::zeros(field.raw.dims());
        let rc = field.raw.c();
        for b in 0..n {
            for k in 0..groups {
                for i in 0..oh {
                    for j in 0..ow {
                        for p in 0..points {
                            let dcoord = d_coords[b][k][(i * ow + j) * points + p];
                            for (comp, v) in [(0, dcoord.row), (1, dcoord.col)] {
                                let ch = (k * points + p) * 2 + comp;
                                let raw_ch = match field.dof {
                                    OffsetDof::One => ch,
                                    OffsetDof::RatioSquared => ch * s * s + (i % s) * s + j % s,
                                };
                                let idx = ((b * rc + raw_ch) * h + i / s) * w + j / s;
                                d_raw.data_mut()[idx] += v;
                            }
                        }
                    }
                }
            }
        }
        let (d_x, gphi) = linear_embed_backward(decoder, phi, &d_raw)?;
        d_decoder
            .data_mut()
            .iter_mut()
            .zip(d_x.data())
            .for_each(|(a, &b)| *a += b);
        d_phi = Some(gphi);
    }

    Ok(GradBundle {
        d_decoder,
        d_encoder,
        d_mx,
        d_my,
        d_phi,
        clamped_coords,
    })
}

/// `E = M z` per position: accumulates `dM += dE z^T` and `dz += M^T dE`.
fn embed_backward<T: Real>(
    m: &LinearMap<T>,
    dm: &mut LinearMap<T>,
    d_e: &[T],
    z: &[T],
    d_z: &mut [T],
) {
    let (rows, cols) = (m.rows(), m.cols());
    for (pos, de) in d_e.chunks_exact(rows).enumerate() {
        let zp = &z[pos * cols..(pos + 1) * cols];
        let dzp = &mut d_z[pos * cols..(pos + 1) * cols];
        for (r, &e) in de.iter().enumerate() {
            if e == T::zero() {
                continue;
            }
            for ((g, &zv), (dz, &mv)) in dm.weights_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(zp)
                .zip(dzp.iter_mut().zip(m.row(r)))
            {
                *g += e * zv;
                *dz += e * mv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Output of one evaluation plus its discrete sampling state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub output: Vec<f64>,
    pub regime: Vec<u64>,
}

/// An operator whose analytic gradient can be checked numerically.
pub trait GradOp {
    /// Named parameter tensors, flattened.
    fn params(&self) -> Vec<(String, Vec<f64>)>;
    /// Evaluates the operator at the given parameter values.
    fn eval(&self, params: &[Vec<f64>]) -> Result<Evaluation>;
    /// Analytic gradient of `<upstream, output>` for each parameter.
    fn backward(&self, params: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
    FourPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Seed of the random upstream gradient.
    pub seed: u64,
    pub stencil: Stencil,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            seed: 0,
            stencil: Stencil::FourPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose stencil crossed a sampling cell or clamp boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("tensor,checked,skipped,max_rel_err,mean_rel_err,rel_tol,passed\n");
        for t in &self.tensors {
            s.push_str(&format!(
                "{},{},{},{:.3e},{:.3e},{:.1e},{}\n",
                t.name, t.checked, t.skipped, t.max_rel_err, t.mean_rel_err, self.rel_tol, t.passed
            ));
        }
        s
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `op.backward` against central finite differences of
/// `<u, op(params)>` for a seeded standard-normal `u`. Entries whose
/// stencil changes the operator's discrete regime are skipped.
pub fn finite_diff_check(op: &dyn GradOp, opts: &FdOptions) -> Result<GradCheckReport> {
    let named = op.params();
    let mut params: Vec<Vec<f64>> = named.iter().map(|(_, v)| v.clone()).collect();
    let base = op.eval(&params)?;
    if base.output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(String::from(
            "forward output at the unperturbed parameters",
        )));
    }
    let upstream = Tensor::<f64>::randn([1, 1, 1, base.output.len()], opts.seed).into_data();
    let analytic = op.backward(&params, &upstream)?;
    if analytic.len() != params.len()
        || analytic
            .iter()
            .zip(&params)
            .any(|(a, p)| a.len() != p.len())
    {
        return Err(shape_err!(
            "analytic gradient layout does not match the parameters"
        ));
    }
    let (offsets, coefs): (&[f64], &[f64]) = match opts.stencil {
        Stencil::TwoPoint => (&[1.0, -1.0], &[0.5, -0.5]),
        Stencil::FourPoint => (
            &[2.0, 1.0, -1.0, -2.0],
            &[-1.0 / 12.0, 8.0 / 12.0, -8.0 / 12.0, 1.0 / 12.0],
        ),
    };

    let mut tensors = Vec::with_capacity(named.len());
    for (t, (name, _)) in named.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            worst_index: None,
            passed: true,
        };
        let mut sum_err = 0.0;
        for e in 0..params[t].len() {
            let orig = params[t][e];
            let mut diff = vec![0.0; base.output.len()];
            let mut stable = true;
            for (&o, &coef) in offsets.iter().zip(coefs) {
                params[t][e] = orig + o * opts.step;
                let ev = op.eval(&params)?;
                if ev.output.iter().any(|v| !v.is_finite()) {
                    params[t][e] = orig;
                    return Err(Error::NonFinite(format!(
                        "forward output with {name}[{e}] perturbed"
                    )));
                }
                if ev.regime != base.regime {
                    stable = false;
                    break;
                }
                // Differences per output first, so untouched outputs cancel exactly.
                for (d, (&v, &b0)) in diff.iter_mut().zip(ev.output.iter().zip(&base.output)) {
                    *d += coef * (v - b0);
                }
            }
            params[t][e] = orig;
            if !stable {
                check.skipped += 1;
                continue;
            }
            let numeric = dot(&diff, &upstream) / opts.step;
            let err = relative_error(analytic[t][e], numeric);
            check.checked += 1;
            sum_err += err;
            if err > check.max_rel_err || check.worst_index.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst_index = Some(e);
            }
        }
        check.mean_rel_err = if check.checked > 0 {
            sum_err / check.checked as f64
        } else {
            0.0
        };
        check.passed = check.max_rel_err < opts.rel_tol;
        tensors.push(check);
    }
    Ok(GradCheckReport {
        rel_tol: opts.rel_tol,
        tensors,
    })
}

/// A SAPA forward pass in f64 exposed as a [`GradOp`] over decoder,
/// encoder and all learned parameters.
#[derive(Debug, Clone)]
pub struct SapaGradOp {
    pub cfg: SapaConfig,
    pub decoder: Tensor<f64>,
    pub encoder: Tensor<f64>,
    pub params: SapaParams<f64>,
}

impl SapaGradOp {
    /// Standard-normal features and embeddings scaled by `1/sqrt(fan_in)`;
    /// for dynamic selection a random offset layer giving offsets of
    /// roughly half a pixel.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        cfg: &SapaConfig,
        n: usize,
        c: usize,
        ce: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> Self {
        let s = cfg.ratio;
        let decoder = Tensor::randn([n, c, h, w], seed);
        let encoder = Tensor::randn([n, ce, h * s, w * s], seed ^ 0x9e37_79b9);
        let scaled = |rows: usize, cols: usize, sd: u64, scale: f64| {
            let t = Tensor::<f64>::randn([1, 1, rows, cols], sd);
            LinearMap::new(rows, cols, t.data().iter().map(|v| v * scale).collect())
                .expect("sizes match")
        };
        let (mx, my, phi) = match cfg.variant {
            Variant::I => (Vec::new(), Vec::new(), None),
            Variant::B | Variant::D => {
                let d = cfg.embed_dim;
                let mx = (0..cfg.groups as u64)
                    .map(|g| scaled(d, c, seed.wrapping_add(100 + g), 1.0 / libm::sqrt(c as f64)))
                    .collect();
                let my = (0..cfg.groups as u64)
                    .map(|g| {
                        scaled(
                            d,
                            ce,
                            seed.wrapping_add(200 + g),
                            1.0 / libm::sqrt(ce as f64),
                        )
                    })
                    .collect();
                let phi = (cfg.variant == Variant::D).then(|| {
                    scaled(
                        cfg.offset_channels(),
                        c,
                        seed.wrapping_add(300),
                        0.5 / libm::sqrt(c as f64),
                    )
                });
                (mx, my, phi)
            }
        };
        Self {
            cfg: cfg.clone(),
            decoder,
            encoder,
            params: SapaParams { mx, my, phi },
        }
    }

    fn rebuild(&self, flat: &[Vec<f64>]) -> Result<(Tensor<f64>, Tensor<f64>, SapaParams<f64>)> {
        let decoder = Tensor::new(self.decoder.dims(), flat[0].clone())?;
        let encoder = Tensor::new(self.encoder.dims(), flat[1].clone())?;
        let split = |maps: &[LinearMap<f64>], data: &[f64]| -> Result<Vec<LinearMap<f64>>> {
            let mut off = 0;
            maps.iter()
                .map(|m| {
                    let len = m.rows() * m.cols();
                    let out = LinearMap::new(m.rows(), m.cols(), data[off..off + len].to_vec());
                    off += len;
                    out
                })
                .collect()
        };
        let mut params = self.params.clone();
        let mut next = 2;
        if !params.mx.is_empty() {
            params.mx = split(&self.params.mx, &flat[2])?;
            params.my = split(&self.params.my, &flat[3])?;
            next = 4;
        }
        if let Some(phi) = &self.params.phi {
            params.phi = Some(LinearMap::new(phi.rows(), phi.cols(), flat[next].clone())?);
        }
        Ok((decoder, encoder, params))
    }
}

impl GradOp for SapaGradOp {
    fn params(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![
            (String::from("decoder"), self.decoder.data().to_vec()),
            (String::from("encoder"), self.encoder.data().to_vec()),
        ];
        if !self.params.mx.is_empty() {
            out.push((
                String::from("m_x"),
                self.params
                    .mx
                    .iter()
                    .flat_map(|m| m.weights().to_vec())
                    .collect(),
            ));
            out.push((
                String::from("m_y"),
                self.params
                    .my
                    .iter()
                    .flat_map(|m| m.weights().to_vec())
                    .collect(),
            ));
        }
        if let Some(phi) = &self.params.phi {
            out.push((String::from("phi"), phi.weights().to_vec()));
        }
        out
    }

    fn eval(&self, flat: &[Vec<f64>]) -> Result<Evaluation> {
        let (dec, enc, params) = self.rebuild(flat)?;
        let (out, saved) = forward_with_state(&dec, &enc, &params, &self.cfg)?;
        Ok(Evaluation {
            output: out.into_data(),
            regime: saved.regime(),
        })
    }

    fn backward(&self, flat: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (dec, enc, params) = self.rebuild(flat)?;
        let (out, saved) = forward_with_state(&dec, &enc, &params, &self.cfg)?;
        let up = Tensor::new(out.dims(), upstream.to_vec())?;
        Ok(sapa_backward(&saved, &up)?.flatten())
    }
}

/// [`linear_embed`] as a [`GradOp`] over its input and weights.
#[derive(Debug, Clone)]
pub struct LinearEmbedGradOp {
    pub x: Tensor<f64>,
    pub m: LinearMap<f64>,
}

impl GradOp for LinearEmbedGradOp {
    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            (String::from("x"), self.x.data().to_vec()),
            (String::from("m"), self.m.weights().to_vec()),
        ]
    }

    fn eval(&self, flat: &[Vec<f64>]) -> Result<Evaluation> {
        let x = Tensor::new(self.x.dims(), flat[0].clone())?;
        let m = LinearMap::new(self.m.rows(), self.m.cols(), flat[1].clone())?;
        Ok(Evaluation {
            output: linear_embed(&x, &m)?.into_data(),
            regime: Vec::new(),
        })
    }

    fn backward(&self, flat: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = Tensor::new(self.x.dims(), flat[0].clone())?;
        let m = LinearMap::new(self.m.rows(), self.m.cols(), flat[1].clone())?;
        let [n, _, h, w] = x.dims();
        let up = Tensor::new([n, m.rows(), h, w], upstream.to_vec())?;
        let (dx, dm) = linear_embed_backward(&x, &m, &up)?;
        Ok(vec![dx.into_data(), dm.weights().to_vec()])
    }
}

/// Wraps a [`GradOp`] and scales one analytic gradient entry, for checking
/// that the harness catches a wrong gradient.
pub struct CorruptGradient<'a> {
    pub inner: &'a dyn GradOp,
    pub tensor: usize,
    /// Entry to corrupt; the largest-magnitude entry when `None`.
    pub entry: Option<usize>,
    pub factor: f64,
}

impl GradOp for CorruptGradient<'_> {
    fn params(&self) -> Vec<(String, Vec<f64>)> {
        self.inner.params()
    }

    fn eval(&self, flat: &[Vec<f64>]) -> Result<Evaluation> {
        self.inner.eval(flat)
    }

    fn backward(&self, flat: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut grads = self.inner.backward(flat, upstream)?;
        let g = &mut grads[self.tensor];
        let e = self.entry.unwrap_or_else(|| {
            (0..g.len())
                .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
                .unwrap_or(0)
        });
        g[e] *= self.factor;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::bilinear_sample;

    #[test]
    fn softmax_backward_examples() {
        let g = softmax_backward(&[0.25f64; 4], &[0.7; 4]);
        assert!(g.iter().all(|v| v.abs() < 1e-16));
        let w = crate::tensor::softmax_vec(&[40.0f64, 0.0, -3.0]);
        let g = softmax_backward(&w, &[0.3, -1.2, 2.0]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_backward_matches_differences() {
        let s = [0.3f64, -1.1, 0.8, 2.0];
        let u = [0.5f64, -0.2, 1.3, -0.7];
        let w = crate::tensor::softmax_vec(&s);
        let g = softmax_backward(&w, &u);
        let loss = |s: &[f64]| dot(&crate::tensor::softmax_vec(s), &u);
        for i in 0..4 {
            let (mut a, mut b) = (s, s);
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (loss(&a) - loss(&b)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_backward_integer_coords_scatter_one_hot() {
        let x = Tensor::<f64>::randn([1, 2, 3, 3], 1);
        let set = CoordSet::new(1, 1, 1, vec![Coord::new(1.0, 1.0)]).unwrap();
        let up = PointSet {
            points: 1,
            channels: 2,
            values: vec![1.0, 2.0],
        };
        let g = bilinear_sample_backward(&x, 0, &set, &up).unwrap();
        assert_eq!(g.d_x.at(0, 0, 1, 1), 1.0);
        assert_eq!(g.d_x.at(0, 1, 1, 1), 2.0);
        assert_eq!(g.d_x.data().iter().filter(|&&v| v != 0.0).count(), 2);
        // Right-sided neighbour differences at a grid point.
        let want_row =
            (x.at(0, 0, 2, 1) - x.at(0, 0, 1, 1)) + 2.0 * (x.at(0, 1, 2, 1) - x.at(0, 1, 1, 1));
        assert!((g.d_coords[0].row - want_row).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_constant_map_has_zero_coord_grad() {
        let x = Tensor::<f64>::full([1, 3, 4, 4], 2.5);
        let coords: Vec<Coord<f64>> = (0..6)
            .map(|k| Coord::new(0.3 + 0.4 * k as f64, 2.7 - 0.3 * k as f64))
            .collect();
        let set = CoordSet::new(1, 1, 6, coords).unwrap();
        let up = PointSet {
            points: 6,
            channels: 3,
            values: (0..18).map(|v| v as f64 - 4.0).collect(),
        };
        let g = bilinear_sample_backward(&x, 0, &set, &up).unwrap();
        assert!(g.d_coords.iter().all(|c| c.row == 0.0 && c.col == 0.0));
    }

    #[test]
    fn bilinear_backward_matches_differences() {
        let x = Tensor::<f64>::randn([1, 2, 5, 5], 3);
        let coords = vec![
            Coord::new(1.3, 2.6),
            Coord::new(3.7, 0.2),
            Coord::new(2.45, 3.9),
        ];
        let set = CoordSet::new(1, 1, 3, coords.clone()).unwrap();
        let up = PointSet {
            points: 3,
            channels: 2,
            values: vec![0.4, -1.0, 2.0, 0.3, -0.6, 1.1],
        };
        let g = bilinear_sample_backward(&x, 0, &set, &up).unwrap();
        let loss = |x: &Tensor<f64>, coords: &[Coord<f64>]| {
            let set = CoordSet::new(1, 1, 3, coords.to_vec()).unwrap();
            dot(&bilinear_sample(x, 0, &set).unwrap().values, &up.values)
        };
        let e = 1e-5;
        for k in 0..3 {
            for axis in 0..2 {
                let (mut a, mut b) = (coords.clone(), coords.clone());
                if axis == 0 {
                    a[k].row += e;
                    b[k].row -= e;
                } else {
                    a[k].col += e;
                    b[k].col -= e;
                }
                let fd = (loss(&x, &a) - loss(&x, &b)) / (2.0 * e);
                let an = if axis == 0 {
                    g.d_coords[k].row
                } else {
                    g.d_coords[k].col
                };
                assert!(
                    (fd - an).abs() < 1e-5,
                    "coord {k} axis {axis}: {fd} vs {an}"
                );
            }
        }
        for idx in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[idx] += e;
            b.data_mut()[idx] -= e;
            let fd = (loss(&a, &coords) - loss(&b, &coords)) / (2.0 * e);
            assert!((fd - g.d_x.data()[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_embed_gradient_passes_tightly() {
        let op = LinearEmbedGradOp {
            x: Tensor::randn([2, 3, 2, 2], 4),
            m: LinearMap::seeded(5, 3, &crate::RngSpec::new(2)),
        };
        let report = finite_diff_check(
            &op,
            &FdOptions {
                rel_tol: 1e-6,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{}", report.to_csv());
    }

    #[test]
    fn group_norm_backward_matches_differences() {
        let x = Tensor::<f64>::randn([2, 4, 2, 3], 8);
        let u = Tensor::<f64>::randn([2, 4, 2, 3], 9);
        let (y, stats) = crate::tensor::group_norm_with_stats(&x, 2, 1e-5).unwrap();
        let g = group_norm_backward(&y, &stats, &u).unwrap();
        let loss = |x: &Tensor<f64>| dot(crate::group_norm(x, 2, 1e-5).unwrap().data(), u.data());
        for idx in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[idx] += 1e-5;
            b.data_mut()[idx] -= 1e-5;
            let fd = (loss(&a) - loss(&b)) / 2e-5;
            assert!((fd - g.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_forward_aborts() {
        let mut op = LinearEmbedGradOp {
            x: Tensor::randn([1, 2, 1, 1], 4),
            m: LinearMap::identity(2),
        };
        op.x.data_mut()[0] = f64::NAN;
        assert!(matches!(
            finite_diff_check(&op, &FdOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let op = LinearEmbedGradOp {
            x: Tensor::randn([1, 3, 2, 2], 4),
            m: LinearMap::seeded(2, 3, &crate::RngSpec::new(1)),
        };
        let bad = CorruptGradient {
            inner: &op,
            tensor: 1,
            entry: None,
            factor: 1.1,
        };
        let report = finite_diff_check(&bad, &FdOptions::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing(), vec!["m"]);
    }

    #[test]
    fn normalize_backward_generic_matches_differences() {
        let s = [0.3f64, -1.1, 0.8, 2.0];
        let u = [0.5f64, -0.2, 1.3, -0.7];
        for h in [NormFn::Sigmoid, NormFn::Softplus, NormFn::Exp, NormFn::None] {
            let w = crate::normalize_weights(&s, h).weights;
            let mut g = [0.0; 4];
            normalize_backward(&s, &w, &u, h, &mut g);
            let loss = |s: &[f64]| dot(&crate::normalize_weights(s, h).weights, &u);
            for i in 0..4 {
                let (mut a, mut b) = (s, s);
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let fd = (loss(&a) - loss(&b)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-8, "{h:?}");
            }
        }
    }
}
