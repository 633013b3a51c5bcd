//! Naive f64 reference forward passes, written independently of the
//! optimized path: NCHW indexing throughout, embeddings applied after
//! sampling, direct `h(s) / sum h(s)` normalization without max-shift.
//! Used only as an oracle.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::kernel::NormFn;
use crate::ops::{OffsetDof, OffsetInit, SapaConfig, SapaParams, Variant};
use crate::tensor::Tensor;

fn naive_group_norm(x: &Tensor<f64>, groups: usize, eps: f64) -> Tensor<f64> {
    let [n, c, h, w] = x.dims();
    let cg = c / groups;
    let mut out = x.clone();
    for b in 0..n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for ch in g * cg..(g + 1) * cg {
                for i in 0..h {
                    for j in 0..w {
                        vals.push(x.at(b, ch, i, j));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            for ch in g * cg..(g + 1) * cg {
                for i in 0..h {
                    for j in 0..w {
                        out.set(b, ch, i, j, (x.at(b, ch, i, j) - m) / (v + eps).sqrt());
                    }
                }
            }
        }
    }
    out
}

/// Bilinear value of channels `chans` of sample `b` at `(r, c)`, with the
/// coordinate clamped into the map first.
fn naive_bilinear(
    x: &Tensor<f64>,
    b: usize,
    chans: core::ops::Range<usize>,
    r: f64,
    c: f64,
) -> Vec<f64> {
    let (h, w) = (x.h(), x.w());
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (a, bb) = (r - r0 as f64, c - c0 as f64);
    chans
        .map(|ch| {
            x.at(b, ch, r0, c0) * (1.0 - a) * (1.0 - bb)
                + x.at(b, ch, r0, c1) * (1.0 - a) * bb
                + x.at(b, ch, r1, c0) * a * (1.0 - bb)
                + x.at(b, ch, r1, c1) * a * bb
        })
        .collect()
}

fn matvec(rows: usize, cols: usize, m: &[f64], v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum())
        .collect()
}

fn naive_h(h: NormFn, x: f64) -> f64 {
    match h {
        NormFn::None => x,
        NormFn::Exp => x.exp(),
        NormFn::Relu => x.max(0.0),
        NormFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        NormFn::Softplus => (1.0 + x.exp()).ln(),
    }
}

/// Selected coordinates for output `(i, j)` of group `g` in sample `b`.
fn naive_coords(
    decoder: &Tensor<f64>,
    params: &SapaParams<f64>,
    cfg: &SapaConfig,
    b: usize,
    g: usize,
    i: usize,
    j: usize,
) -> Vec<(f64, f64)> {
    let s = cfg.ratio;
    let (li, lj) = (i / s, j / s);
    match cfg.variant {
        Variant::I | Variant::B => {
            let r = cfg.kernel_size as isize / 2;
            let mut out = Vec::new();
            for u in -r..=r {
                for v in -r..=r {
                    out.push((li as f64 + u as f64, lj as f64 + v as f64));
                }
            }
            out
        }
        Variant::D => {
            let phi = params.phi.as_ref().expect("SAPA-D reference needs phi");
            let c = decoder.c();
            let xl: Vec<f64> = (0..c).map(|ch| decoder.at(b, ch, li, lj)).collect();
            let grid_k = libm::round(libm::sqrt(cfg.num_points as f64)) as isize;
            (0..cfg.num_points)
                .map(|p| {
                    let chan = |comp: usize| -> usize {
                        let base = (g * cfg.num_points + p) * 2 + comp;
                        match cfg.offset_dof {
                            OffsetDof::One => base,
                            OffsetDof::RatioSquared => base * s * s + (i % s) * s + (j % s),
                        }
                    };
                    let off = |comp: usize| -> f64 {
                        let row = chan(comp);
                        (0..c).map(|ch| phi.weights()[row * c + ch] * xl[ch]).sum()
                    };
                    let (mut dr, mut dc) = (off(0), off(1));
                    if cfg.offset_init == OffsetInit::Grid {
                        let half = grid_k / 2;
                        dr += (p as isize / grid_k - half) as f64;
                        dc += (p as isize % grid_k - half) as f64;
                    }
                    (li as f64 + dr, lj as f64 + dc)
                })
                .collect()
        }
    }
}

/// Reference forward for any variant.
pub fn sapa_forward(
    decoder: &Tensor<f64>,
    encoder: &Tensor<f64>,
    params: &SapaParams<f64>,
    cfg: &SapaConfig,
) -> Tensor<f64> {
    let [n, c, _, _] = decoder.dims();
    let ce = encoder.c();
    let (oh, ow) = (encoder.h(), encoder.w());
    let g_count = cfg.groups;
    let cg = c / g_count;
    let (zd, ze) = if cfg.pre_groupnorm {
        (
            naive_group_norm(decoder, cfg.gn_groups, cfg.gn_eps),
            naive_group_norm(encoder, cfg.gn_groups, cfg.gn_eps),
        )
    } else {
        (decoder.clone(), encoder.clone())
    };
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for g in 0..g_count {
                    let coords = naive_coords(decoder, params, cfg, b, g, i, j);
                    let mut scores = Vec::with_capacity(coords.len());
                    for &(r, cc) in &coords {
                        let score = match cfg.variant {
                            Variant::I => {
                                let x = naive_bilinear(&zd, b, g * cg..(g + 1) * cg, r, cc);
                                (0..cg)
                                    .map(|k| x[k] * ze.at(b, g * cg + k, i, j))
                                    .sum::<f64>()
                            }
                            Variant::B | Variant::D => {
                                let x = naive_bilinear(&zd, b, 0..c, r, cc);
                                let y: Vec<f64> = (0..ce).map(|k| ze.at(b, k, i, j)).collect();
                                let (mx, my) = (&params.mx[g], &params.my[g]);
                                let kx = matvec(mx.rows(), mx.cols(), mx.weights(), &x);
                                let ky = matvec(my.rows(), my.cols(), my.weights(), &y);
                                kx.iter().zip(&ky).map(|(a, b)| a * b).sum::<f64>()
                            }
                        };
                        scores.push(score);
                    }
                    let weights: Vec<f64> = if cfg.norm_fn == NormFn::None {
                        scores
                    } else {
                        let hs: Vec<f64> =
                            scores.iter().map(|&v| naive_h(cfg.norm_fn, v)).collect();
                        let z: f64 = hs.iter().sum();
                        if z == 0.0 {
                            vec![1.0 / hs.len() as f64; hs.len()]
                        } else {
                            hs.iter().map(|v| v / z).collect()
                        }
                    };
                    let mut acc = vec![0.0; cg];
                    for (&(r, cc), wt) in coords.iter().zip(&weights) {
                        let x = naive_bilinear(decoder, b, g * cg..(g + 1) * cg, r, cc);
                        for k in 0..cg {
                            acc[k] += wt * x[k];
                        }
                    }
                    for k in 0..cg {
                        out.set(b, g * cg + k, i, j, acc[k]);
                    }
                }
            }
        }
    }
    out
}

/// A random small problem for oracle and gradient checks.
#[derive(Debug, Clone)]
pub struct Case {
    pub cfg: SapaConfig,
    pub decoder: Tensor<f64>,
    pub encoder: Tensor<f64>,
    pub params: SapaParams<f64>,
}

/// Size bounds for [`random_case`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseLimits {
    pub max_batch: usize,
    pub max_side: usize,
    pub max_ratio: usize,
}

impl CaseLimits {
    /// `H, W <= 8`, ratio up to 3, batch up to 2.
    pub const ORACLE: CaseLimits = CaseLimits {
        max_batch: 2,
        max_side: 8,
        max_ratio: 3,
    };
    /// Smaller maps so every entry can be finite-differenced.
    pub const GRADIENT: CaseLimits = CaseLimits {
        max_batch: 1,
        max_side: 5,
        max_ratio: 2,
    };
}

/// Draws a seeded configuration with `C <= 8`, `S <= 9`, `g in {1, 2}`
/// and standard-normal inputs. Embeddings are scaled by `1/sqrt(fan_in)`;
/// `phi` gives offsets of about half a pixel.
pub fn random_case(variant: Variant, seed: u64, limits: CaseLimits) -> Case {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(1..=2usize);
    let c = groups * rng.random_range(1..=8 / groups);
    let ce = if variant == Variant::I {
        c
    } else {
        rng.random_range(1..=8usize)
    };
    let h = rng.random_range(2..=limits.max_side);
    let w = rng.random_range(2..=limits.max_side);
    let ratio = rng.random_range(1..=limits.max_ratio);
    let n = rng.random_range(1..=limits.max_batch);
    let mut cfg = SapaConfig::for_variant(variant);
    cfg.ratio = ratio;
    cfg.groups = if variant == Variant::I { 1 } else { groups };
    cfg.kernel_size = [1, 3, 5][rng.random_range(0..3usize)];
    cfg.num_points = rng.random_range(1..=9usize);
    cfg.embed_dim = rng.random_range(1..=6usize);
    cfg.offset_dof = if rng.random_bool(0.5) {
        OffsetDof::One
    } else {
        OffsetDof::RatioSquared
    };
    cfg.offset_init = if cfg.grid_side().is_some() && rng.random_bool(0.5) {
        OffsetInit::Grid
    } else {
        OffsetInit::Origin
    };
    let gn = [1usize, 2]
        .into_iter()
        .filter(|g| c % g == 0 && ce % g == 0)
        .max()
        .unwrap_or(1);
    cfg.pre_groupnorm = rng.random_bool(0.3);
    cfg.gn_groups = gn;
    cfg.norm_fn =
        [NormFn::Exp, NormFn::Exp, NormFn::Sigmoid, NormFn::Softplus][rng.random_range(0..4usize)];
    let op = crate::grad::SapaGradOp::random(
        &cfg,
        n,
        c,
        ce,
        h,
        w,
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    Case {
        cfg,
        decoder: op.decoder,
        encoder: op.encoder,
        params: op.params,
    }
}
