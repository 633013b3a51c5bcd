//! The three similarity-aware upsamplers: parameter-free (`I`), embedded
//! window (`B`) and dynamic point selection (`D`).
//!
//! Every variant runs the same three steps: select `S` decoder points per
//! output position, turn their similarity to the encoder point into kernel
//! weights, and assemble the weighted sum of the selected points. Channels
//! may be split into `g` groups, each with its own embeddings, offsets and
//! kernel.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::kernel::{
    check_pair, kernel_map_from_features, similarity_features, KernelMap, NormFn, PreNorm,
    Selection, SimFeatures, Similarity,
};
use crate::sampling::{nn_upsample, pixel_shuffle, window_coords, Coord, CoordSet, Tap};
use crate::tensor::{axpy, linear_embed, LinearMap, Real, RngSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    I,
    B,
    D,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::I => "sapa-i",
            Variant::B => "sapa-b",
            Variant::D => "sapa-d",
        }
    }
}

/// How offsets reach the `s^2` high-res siblings of a low-res cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OffsetDof {
    /// One offset set per low-res cell, copied to all siblings (NN).
    One,
    /// `s^2` offset sets per cell, one per sibling (pixel shuffle).
    #[default]
    RatioSquared,
}

impl OffsetDof {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "one" | "shared" => Ok(OffsetDof::One),
            "s2" | "s^2" | "ratio2" | "full" => Ok(OffsetDof::RatioSquared),
            _ => Err(config_err!("offset DOF must be 1 or s2, got {s:?}")),
        }
    }

    pub fn multiplicity(self, ratio: usize) -> usize {
        match self {
            OffsetDof::One => 1,
            OffsetDof::RatioSquared => ratio * ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OffsetInit {
    /// All offsets start at zero.
    #[default]
    Origin,
    /// Offsets start at the `k x k` window displacements (`S = k^2`).
    Grid,
}

impl OffsetInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "origin" => Ok(OffsetInit::Origin),
            "grid" => Ok(OffsetInit::Grid),
            _ => Err(config_err!("offset init must be origin or grid, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SapaConfig {
    pub variant: Variant,
    pub ratio: usize,
    /// Window size for `I` and `B`.
    pub kernel_size: usize,
    /// Sampled points per group for `D`.
    pub num_points: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub offset_dof: OffsetDof,
    pub offset_init: OffsetInit,
    pub pre_groupnorm: bool,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub norm_fn: NormFn,
}

impl SapaConfig {
    pub fn sapa_i() -> Self {
        Self {
            variant: Variant::I,
            ratio: 2,
            kernel_size: 5,
            num_points: 9,
            embed_dim: 32,
            groups: 1,
            offset_dof: OffsetDof::RatioSquared,
            offset_init: OffsetInit::Origin,
            pre_groupnorm: false,
            gn_groups: 4,
            gn_eps: 1e-5,
            norm_fn: NormFn::Exp,
        }
    }

    pub fn sapa_b() -> Self {
        Self {
            variant: Variant::B,
            ..Self::sapa_i()
        }
    }

    pub fn sapa_d() -> Self {
        Self {
            variant: Variant::D,
            groups: 4,
            ..Self::sapa_i()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::I => Self::sapa_i(),
            Variant::B => Self::sapa_b(),
            Variant::D => Self::sapa_d(),
        }
    }

    /// Points per kernel.
    pub fn points(&self) -> usize {
        match self.variant {
            Variant::D => self.num_points,
            _ => self.kernel_size * self.kernel_size,
        }
    }

    /// Output channels of the offset layer: `2 * S * g * (1 or s^2)`.
    pub fn offset_channels(&self) -> usize {
        2 * self.num_points * self.groups * self.offset_dof.multiplicity(self.ratio)
    }

    /// Side of the grid-initialization window, when `S` is an odd square.
    pub fn grid_side(&self) -> Option<usize> {
        let k = libm::round(libm::sqrt(self.num_points as f64)) as usize;
        (k * k == self.num_points && k % 2 == 1).then_some(k)
    }

    pub fn pre_norm(&self) -> Option<PreNorm> {
        self.pre_groupnorm.then_some(PreNorm {
            groups: self.gn_groups,
            eps: self.gn_eps,
        })
    }

    /// Checks the configuration against decoder/encoder channel counts.
    pub fn validate(&self, channels: usize, encoder_channels: usize) -> Result<()> {
        if self.ratio == 0 {
            return Err(config_err!("upsampling ratio must be positive"));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(config_err!(
                "{channels} channels not divisible into {} groups",
                self.groups
            ));
        }
        if self.pre_groupnorm
            && (self.gn_groups == 0
                || !channels.is_multiple_of(self.gn_groups)
                || !encoder_channels.is_multiple_of(self.gn_groups))
        {
            return Err(config_err!(
                "group norm with {} groups needs channel counts divisible by it (decoder {channels}, encoder {encoder_channels})",
                self.gn_groups
            ));
        }
        match self.variant {
            Variant::I | Variant::B => {
                window_coords((0, 0), self.kernel_size)?;
            }
            Variant::D => {
                if self.num_points == 0 {
                    return Err(config_err!("number of sampled points must be positive"));
                }
                if self.offset_init == OffsetInit::Grid && self.grid_side().is_none() {
                    return Err(config_err!(
                        "grid initialization needs an odd square number of points, got {}",
                        self.num_points
                    ));
                }
            }
        }
        if self.variant != Variant::I && self.embed_dim == 0 {
            return Err(config_err!("embedding dim must be positive"));
        }
        Ok(())
    }

    /// Learned parameter count: 0 for `I`, `2Cdg` for `B`,
    /// `2Cdg + 2SgC(1 or s^2)` for `D` (`8SCg` at `s = 2`, DOF `s^2`).
    pub fn param_count(&self, channels: usize, encoder_channels: usize) -> usize {
        let embed = (channels + encoder_channels) * self.embed_dim * self.groups;
        match self.variant {
            Variant::I => 0,
            Variant::B => embed,
            Variant::D => embed + self.offset_channels() * channels,
        }
    }

    /// Applies a `key=value` override; keys follow the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let uint = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| config_err!("{key} expects a non-negative integer, got {v:?}"))
        };
        match key.to_ascii_lowercase().replace('-', "_").as_str() {
            "ratio" | "s" | "scale" => self.ratio = uint(value)?,
            "kernel_size" | "k" => self.kernel_size = uint(value)?,
            "num_points" | "points" => self.num_points = uint(value)?,
            "embed_dim" | "d" => self.embed_dim = uint(value)?,
            "groups" | "g" => self.groups = uint(value)?,
            "gn_groups" => self.gn_groups = uint(value)?,
            "gn_eps" => {
                self.gn_eps = value
                    .parse()
                    .map_err(|_| config_err!("gn_eps expects a number, got {value:?}"))?
            }
            "offset_dof" | "dof" => self.offset_dof = OffsetDof::parse(value)?,
            "offset_init" | "init" => self.offset_init = OffsetInit::parse(value)?,
            "norm_fn" | "norm" => self.norm_fn = NormFn::parse(value)?,
            "pre_groupnorm" | "groupnorm" => {
                self.pre_groupnorm = match value.to_ascii_lowercase().as_str() {
                    "1" | "true" | "yes" | "on" => true,
                    "0" | "false" | "no" | "off" => false,
                    _ => {
                        return Err(config_err!(
                            "pre_groupnorm expects a boolean, got {value:?}"
                        ))
                    }
                }
            }
            other => return Err(config_err!("unknown config key {:?}", String::from(other))),
        }
        Ok(())
    }
}

/// Learned parameters: one `(M_x, M_y)` pair per group plus the offset
/// layer for `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SapaParams<T> {
    pub mx: Vec<LinearMap<T>>,
    pub my: Vec<LinearMap<T>>,
    pub phi: Option<LinearMap<T>>,
}

impl<T: Real> SapaParams<T> {
    /// Untrained parameters: Xavier-uniform embeddings, zero offset layer.
    pub fn init(cfg: &SapaConfig, channels: usize, encoder_channels: usize, rng: &RngSpec) -> Self {
        match cfg.variant {
            Variant::I => Self {
                mx: Vec::new(),
                my: Vec::new(),
                phi: None,
            },
            Variant::B | Variant::D => {
                let d = cfg.embed_dim;
                let mut mx = Vec::with_capacity(cfg.groups);
                let mut my = Vec::with_capacity(cfg.groups);
                for g in 0..cfg.groups as u64 {
                    mx.push(LinearMap::seeded(
                        d,
                        channels,
                        &RngSpec {
                            seed: rng.seed.wrapping_add(2 * g),
                            ..*rng
                        },
                    ));
                    my.push(LinearMap::seeded(
                        d,
                        encoder_channels,
                        &RngSpec {
                            seed: rng.seed.wrapping_add(2 * g + 1),
                            ..*rng
                        },
                    ));
                }
                let phi = (cfg.variant == Variant::D)
                    .then(|| LinearMap::zeros(cfg.offset_channels(), channels));
                Self { mx, my, phi }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let maps = self.mx.iter().chain(&self.my).chain(&self.phi);
        maps.map(|m| m.rows() * m.cols()).sum()
    }
}

/// Sampling offsets, in low-res pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    pub ratio: usize,
    pub dof: OffsetDof,
    pub groups: usize,
    pub points: usize,
    /// Offset-layer output on the low-res grid: `(n, 2Sg * m, h, w)`.
    pub raw: Tensor<T>,
    /// Offsets distributed to the high-res grid: `(n, 2Sg, sh, sw)` with
    /// channel `(g*S + p)*2 + {0: row, 1: col}`; grid displacements
    /// included.
    pub field: Tensor<T>,
}

impl<T: Real> OffsetField<T> {
    /// `I_l = l + offset` for every sample, group and output position,
    /// where `l = floor(l' / s)`.
    pub fn coord_sets(&self) -> Vec<Vec<CoordSet<T>>> {
        let [n, _, oh, ow] = self.field.dims();
        let s = self.ratio;
        (0..n)
            .map(|b| {
                (0..self.groups)
                    .map(|g| {
                        let mut coords = Vec::with_capacity(oh * ow * self.points);
                        for i in 0..oh {
                            for j in 0..ow {
                                let (li, lj) = (T::of((i / s) as f64), T::of((j / s) as f64));
                                for p in 0..self.points {
                                    let ch = (g * self.points + p) * 2;
                                    coords.push(Coord::new(
                                        li + self.field.at(b, ch, i, j),
                                        lj + self.field.at(b, ch + 1, i, j),
                                    ));
                                }
                            }
                        }
                        CoordSet {
                            out_h: oh,
                            out_w: ow,
                            points: self.points,
                            coords,
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Generates sampling offsets from the decoder feature with the bias-free
/// linear layer `phi`. DOF `s^2` distributes the `s^2` offset sets with
/// pixel shuffle, DOF 1 copies one set to every sibling with NN.
pub fn offset_generate<T: Real>(
    decoder: &Tensor<T>,
    phi: &LinearMap<T>,
    cfg: &SapaConfig,
) -> Result<OffsetField<T>> {
    let want = cfg.offset_channels();
    if phi.rows() != want {
        return Err(config_err!(
            "offset layer must produce 2*S*g*m = {want} channels (S={}, g={}, m={}), got {}",
            cfg.num_points,
            cfg.groups,
            cfg.offset_dof.multiplicity(cfg.ratio),
            phi.rows()
        ));
    }
    let raw = linear_embed(decoder, phi)?;
    let mut field = match cfg.offset_dof {
        OffsetDof::RatioSquared => pixel_shuffle(&raw, cfg.ratio)?,
        OffsetDof::One => nn_upsample(&raw, cfg.ratio)?,
    };
    if cfg.offset_init == OffsetInit::Grid {
        let k = cfg.grid_side().ok_or_else(|| {
            config_err!("grid initialization needs an odd square number of points")
        })?;
        let disp = window_coords((0, 0), k)?;
        let [n, _, oh, ow] = field.dims();
        let hw = oh * ow;
        let data = field.data_mut();
        for b in 0..n {
            for g in 0..cfg.groups {
                for (p, &(u, v)) in disp.iter().enumerate() {
                    let ch = (g * cfg.num_points + p) * 2;
                    let base = (b * 2 * cfg.num_points * cfg.groups + ch) * hw;
                    data[base..base + hw]
                        .iter_mut()
                        .for_each(|x| *x += T::of(u as f64));
                    data[base + hw..base + 2 * hw]
                        .iter_mut()
                        .for_each(|x| *x += T::of(v as f64));
                }
            }
        }
    }
    Ok(OffsetField {
        ratio: cfg.ratio,
        dof: cfg.offset_dof,
        groups: cfg.groups,
        points: cfg.num_points,
        raw,
        field,
    })
}

/// `x' = sum_i w_i p_i`.
pub fn assemble<T: Real>(points: &[&[T]], weights: &[T]) -> Result<Vec<T>> {
    if points.len() != weights.len() {
        return Err(shape_err!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        ));
    }
    let c = points.first().map_or(0, |p| p.len());
    let mut out = vec![T::zero(); c];
    for (p, &w) in points.iter().zip(weights) {
        if p.len() != c {
            return Err(shape_err!("points have differing channel counts"));
        }
        for (o, &v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Splits channels into `g` contiguous groups.
pub fn grouped_split<T: Real>(x: &Tensor<T>, g: usize) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = x.dims();
    if g == 0 || c % g != 0 {
        return Err(shape_err!("{c} channels not divisible into {g} groups"));
    }
    let cg = c / g;
    let hw = h * w;
    Ok((0..g)
        .map(|k| {
            let mut data = Vec::with_capacity(n * cg * hw);
            for b in 0..n {
                let start = (b * c + k * cg) * hw;
                data.extend_from_slice(&x.data()[start..start + cg * hw]);
            }
            Tensor::new([n, cg, h, w], data).expect("split sizes are consistent")
        })
        .collect())
}

/// Concatenates channel groups; inverse of [`grouped_split`].
pub fn grouped_merge<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("nothing to merge"))?;
    let [n, _, h, w] = first.dims();
    if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
        return Err(shape_err!("merged parts must share batch and spatial dims"));
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for p in parts {
            let start = b * p.c() * hw;
            data.extend_from_slice(&p.data()[start..start + p.c() * hw]);
        }
    }
    Tensor::new([n, c, h, w], data)
}

/// Output of a forward pass together with its kernel map.
#[derive(Debug, Clone)]
pub struct Upsampled<T> {
    pub output: Tensor<T>,
    pub kernels: KernelMap<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace<T> {
    pub feats: SimFeatures<T>,
    pub scores: Vec<T>,
    pub kernels: KernelMap<T>,
    pub window: Option<CoordSet<T>>,
    pub offsets: Option<OffsetField<T>>,
    pub coords: Option<Vec<Vec<CoordSet<T>>>>,
}

impl<T: Real> Trace<T> {
    pub fn selection(&self) -> Selection<'_, T> {
        match (&self.window, &self.coords) {
            (Some(w), _) => Selection::Shared(w),
            (None, Some(c)) => Selection::PerGroup(c),
            (None, None) => unreachable!("trace always records a selection"),
        }
    }
}

/// Weighted sum of the selected raw decoder points, group by group.
fn assemble_map<T: Real>(
    decoder: &Tensor<T>,
    selection: Selection<'_, T>,
    kernels: &KernelMap<T>,
) -> Tensor<T> {
    let [_, c, h, w] = decoder.dims();
    let (oh, ow) = (kernels.out_h, kernels.out_w);
    let g = kernels.groups;
    let cg = c / g;
    let values = decoder.to_nhwc();
    let mut out = Vec::with_capacity(values.len());
    let mut acc = vec![T::zero(); c];
    for (b, vals) in values.iter().enumerate() {
        let mut sample = vec![T::zero(); oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                acc.iter_mut().for_each(|v| *v = T::zero());
                for k in 0..g {
                    let weights = kernels.weights_at(b, i, j, k);
                    let acc_g = &mut acc[k * cg..(k + 1) * cg];
                    for (&coord, &wt) in selection.get(b, k).at(i, j).iter().zip(weights) {
                        for (idx, cw) in Tap::new(h, w, coord).corners(w) {
                            if cw != T::zero() {
                                axpy(
                                    wt * cw,
                                    &vals[idx * c + k * cg..idx * c + (k + 1) * cg],
                                    acc_g,
                                );
                            }
                        }
                    }
                }
                sample[(i * ow + j) * c..(i * ow + j + 1) * c].copy_from_slice(&acc);
            }
        }
        out.push(sample);
    }
    Tensor::from_nhwc(&out, c, oh, ow)
}

pub(crate) fn run<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    params: &SapaParams<T>,
    cfg: &SapaConfig,
    keep_scores: bool,
) -> Result<(Tensor<T>, Trace<T>)> {
    cfg.validate(decoder.c(), encoder.c())?;
    let ratio = check_pair(decoder, encoder)?;
    if ratio != cfg.ratio {
        return Err(shape_err!(
            "encoder is {ratio}x the decoder resolution but the configured ratio is {}",
            cfg.ratio
        ));
    }
    let sim = match cfg.variant {
        Variant::I => Similarity::Inner { groups: cfg.groups },
        Variant::B | Variant::D => {
            if params.mx.len() != cfg.groups || params.my.len() != cfg.groups {
                return Err(config_err!(
                    "expected {} embedding pairs, got {} M_x and {} M_y",
                    cfg.groups,
                    params.mx.len(),
                    params.my.len()
                ));
            }
            Similarity::Embedded {
                mx: &params.mx,
                my: &params.my,
            }
        }
    };
    let feats = similarity_features(decoder, encoder, &sim, cfg.pre_norm())?;
    let (window, offsets, coords) = match cfg.variant {
        Variant::I | Variant::B => (
            Some(CoordSet::windows(
                decoder.h(),
                decoder.w(),
                cfg.ratio,
                cfg.kernel_size,
            )?),
            None,
            None,
        ),
        Variant::D => {
            let phi = params
                .phi
                .as_ref()
                .ok_or_else(|| config_err!("SAPA-D needs an offset layer"))?;
            let field = offset_generate(decoder, phi, cfg)?;
            let coords = field.coord_sets();
            (None, Some(field), Some(coords))
        }
    };
    let selection = match (&window, &coords) {
        (Some(w), _) => Selection::Shared(w),
        (None, Some(c)) => Selection::PerGroup(c),
        (None, None) => unreachable!(),
    };
    let mut scores = Vec::new();
    let kernels = kernel_map_from_features(
        decoder,
        encoder,
        selection,
        &feats,
        cfg.norm_fn,
        keep_scores.then_some(&mut scores),
    )?;
    let output = assemble_map(decoder, selection, &kernels);
    Ok((
        output,
        Trace {
            feats,
            scores,
            kernels,
            window,
            offsets,
            coords,
        },
    ))
}

/// Runs any variant and returns the output with its kernel map.
pub fn upsample<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    params: &SapaParams<T>,
    cfg: &SapaConfig,
) -> Result<Upsampled<T>> {
    let (output, trace) = run(decoder, encoder, params, cfg, false)?;
    Ok(Upsampled {
        output,
        kernels: trace.kernels,
    })
}

/// Parameter-free variant: softmax of `<x, y_l'>` over the `k x k`
/// clamped window.
pub fn sapa_i_forward<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    cfg: &SapaConfig,
) -> Result<Tensor<T>> {
    let cfg = SapaConfig {
        variant: Variant::I,
        ..cfg.clone()
    };
    let params = SapaParams {
        mx: Vec::new(),
        my: Vec::new(),
        phi: None,
    };
    run(decoder, encoder, &params, &cfg, false).map(|(out, _)| out)
}

/// Window variant with similarity `<M_x x, M_y y>`; one map pair per group.
pub fn sapa_b_forward<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    mx: &[LinearMap<T>],
    my: &[LinearMap<T>],
    cfg: &SapaConfig,
) -> Result<Tensor<T>> {
    let cfg = SapaConfig {
        variant: Variant::B,
        ..cfg.clone()
    };
    let params = SapaParams {
        mx: mx.to_vec(),
        my: my.to_vec(),
        phi: None,
    };
    run(decoder, encoder, &params, &cfg, false).map(|(out, _)| out)
}

/// Dynamic-selection variant: points bilinearly sampled at `l + phi(x)`.
pub fn sapa_d_forward<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    mx: &[LinearMap<T>],
    my: &[LinearMap<T>],
    phi: &LinearMap<T>,
    cfg: &SapaConfig,
) -> Result<Tensor<T>> {
    let cfg = SapaConfig {
        variant: Variant::D,
        ..cfg.clone()
    };
    let params = SapaParams {
        mx: mx.to_vec(),
        my: my.to_vec(),
        phi: Some(phi.clone()),
    };
    run(decoder, encoder, &params, &cfg, false).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cfg: &SapaConfig) -> SapaConfig {
        SapaConfig {
            kernel_size: 3,
            embed_dim: 4,
            ..cfg.clone()
        }
    }

    #[test]
    fn assemble_examples() {
        let v = [1.0f64, -2.0, 3.0];
        assert_eq!(
            assemble(&[&v, &v, &v], &[1.0 / 3.0; 3]).unwrap(),
            vec![1.0, -2.0, 3.0]
        );
        let a = [1.0f64, 2.0];
        let b = [5.0f64, 6.0];
        assert_eq!(assemble(&[&a, &b], &[0.0, 1.0]).unwrap(), b.to_vec());
        let z = [0.0f64; 4];
        let f = [4.0f64; 4];
        assert_eq!(assemble(&[&z, &f], &[0.25, 0.75]).unwrap(), vec![3.0; 4]);
        assert!(assemble(&[&z], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn grouped_split_merge() {
        let x = Tensor::<f32>::randn([2, 8, 3, 3], 5);
        assert_eq!(grouped_split(&x, 1).unwrap()[0], x);
        let parts = grouped_split(&x, 2).unwrap();
        assert_eq!(parts[0].at(1, 3, 2, 1), x.at(1, 3, 2, 1));
        assert_eq!(parts[1].at(1, 0, 2, 1), x.at(1, 4, 2, 1));
        assert_eq!(grouped_merge(&grouped_split(&x, 4).unwrap()).unwrap(), x);
        assert!(grouped_split(&x, 3).is_err());
    }

    #[test]
    fn sapa_i_rejects_channel_mismatch() {
        let dec = Tensor::<f64>::randn([1, 3, 4, 4], 1);
        let enc = Tensor::<f64>::randn([1, 5, 8, 8], 2);
        let err = sapa_i_forward(&dec, &enc, &SapaConfig::sapa_i()).unwrap_err();
        assert!(matches!(err, crate::Error::Inapplicable(_)));
        assert!(alloc::format!("{err}").contains("channel"));
    }

    #[test]
    fn sapa_i_k1_is_nn() {
        let dec = Tensor::<f64>::randn([2, 3, 4, 5], 1);
        let enc = Tensor::<f64>::randn([2, 3, 8, 10], 2);
        let cfg = SapaConfig {
            kernel_size: 1,
            ..SapaConfig::sapa_i()
        };
        assert_eq!(
            sapa_i_forward(&dec, &enc, &cfg).unwrap(),
            nn_upsample(&dec, 2).unwrap()
        );
    }

    #[test]
    fn identity_embeddings_reduce_b_to_i() {
        let dec = Tensor::<f64>::randn([1, 4, 5, 5], 3);
        let enc = Tensor::<f64>::randn([1, 4, 10, 10], 4);
        let cfg = small(&SapaConfig::sapa_b());
        let id = [LinearMap::identity(4)];
        let b = sapa_b_forward(&dec, &enc, &id, &id, &cfg).unwrap();
        let i = sapa_i_forward(&dec, &enc, &cfg).unwrap();
        assert!(b.max_abs_diff(&i) < 1e-12);
    }

    #[test]
    fn zero_phi_offsets_are_zero() {
        let dec = Tensor::<f64>::randn([1, 8, 3, 3], 3);
        for dof in [OffsetDof::One, OffsetDof::RatioSquared] {
            let cfg = SapaConfig {
                offset_dof: dof,
                ..SapaConfig::sapa_d()
            };
            let phi = LinearMap::zeros(cfg.offset_channels(), 8);
            let f = offset_generate(&dec, &phi, &cfg).unwrap();
            assert_eq!(f.field.dims(), [1, 2 * 9 * 4, 6, 6]);
            assert!(f.field.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_dof_siblings_match() {
        let dec = Tensor::<f64>::randn([1, 4, 3, 3], 3);
        let cfg = SapaConfig {
            offset_dof: OffsetDof::One,
            groups: 2,
            num_points: 4,
            ..SapaConfig::sapa_d()
        };
        let phi = LinearMap::seeded(cfg.offset_channels(), 4, &RngSpec::new(9));
        let sets = offset_generate(&dec, &phi, &cfg).unwrap().coord_sets();
        for set in &sets[0] {
            for i in 0..3 {
                for j in 0..3 {
                    let base = set.at(2 * i, 2 * j);
                    for (u, v) in [(0, 1), (1, 0), (1, 1)] {
                        assert_eq!(set.at(2 * i + u, 2 * j + v), base);
                    }
                }
            }
        }
    }

    #[test]
    fn grid_init_reproduces_windows() {
        let dec = Tensor::<f64>::zeros([1, 4, 4, 4]);
        let cfg = SapaConfig {
            offset_init: OffsetInit::Grid,
            groups: 1,
            num_points: 9,
            offset_dof: OffsetDof::One,
            ..SapaConfig::sapa_d()
        };
        let phi = LinearMap::seeded(cfg.offset_channels(), 4, &RngSpec::new(1));
        let sets = offset_generate(&dec, &phi, &cfg).unwrap().coord_sets();
        let win = CoordSet::<f64>::windows(4, 4, 2, 3).unwrap();
        assert_eq!(sets[0][0], win);
    }

    #[test]
    fn offset_layer_channel_mismatch() {
        let dec = Tensor::<f64>::zeros([1, 4, 2, 2]);
        let cfg = SapaConfig::sapa_d();
        let phi = LinearMap::zeros(5, 4);
        assert!(matches!(
            offset_generate(&dec, &phi, &cfg),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn config_defaults_and_param_counts() {
        let d = SapaConfig::sapa_d();
        assert_eq!((d.embed_dim, d.num_points, d.groups), (32, 9, 4));
        assert_eq!(d.param_count(256, 256), 2 * 256 * 32 * 4 + 8 * 9 * 256 * 4);
        assert_eq!(SapaConfig::sapa_b().param_count(256, 256), 2 * 256 * 32);
        assert_eq!(SapaConfig::sapa_b().kernel_size, 5);
        assert_eq!(SapaConfig::sapa_i().param_count(256, 256), 0);
        let p = SapaParams::<f32>::init(&d, 256, 256, &RngSpec::new(0));
        assert_eq!(p.param_count(), d.param_count(256, 256));
    }

    #[test]
    fn config_overrides() {
        let mut cfg = SapaConfig::sapa_d();
        cfg.set("offset_dof", "1").unwrap();
        cfg.set("offset_init", "grid").unwrap();
        cfg.set("norm_fn", "softplus").unwrap();
        cfg.set("groups", "2").unwrap();
        cfg.set("pre_groupnorm", "true").unwrap();
        assert_eq!(cfg.offset_dof, OffsetDof::One);
        assert_eq!(cfg.offset_init, OffsetInit::Grid);
        assert_eq!(cfg.norm_fn, NormFn::Softplus);
        assert_eq!(cfg.groups, 2);
        assert!(cfg.pre_groupnorm);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("groups", "x").is_err());
    }

    #[test]
    fn validation_errors() {
        let cfg = SapaConfig {
            kernel_size: 4,
            ..SapaConfig::sapa_b()
        };
        assert!(cfg.validate(8, 8).is_err());
        let cfg = SapaConfig {
            groups: 3,
            ..SapaConfig::sapa_d()
        };
        assert!(cfg.validate(8, 8).is_err());
        let cfg = SapaConfig {
            offset_init: OffsetInit::Grid,
            num_points: 4,
            ..SapaConfig::sapa_d()
        };
        assert!(cfg.validate(8, 8).is_err());
        let cfg = SapaConfig {
            pre_groupnorm: true,
            ..SapaConfig::sapa_b()
        };
        assert!(cfg.validate(6, 8).is_err());
    }

    #[test]
    fn ratio_mismatch_is_shape_error() {
        let dec = Tensor::<f64>::zeros([1, 2, 3, 3]);
        let enc = Tensor::<f64>::zeros([1, 2, 9, 9]);
        assert!(matches!(
            sapa_i_forward(&dec, &enc, &SapaConfig::sapa_i()),
            Err(crate::Error::Shape(_))
        ));
        let enc = Tensor::<f64>::zeros([1, 2, 7, 6]);
        assert!(matches!(
            sapa_i_forward(&dec, &enc, &SapaConfig::sapa_i()),
            Err(crate::Error::Shape(_))
        ));
    }
}
