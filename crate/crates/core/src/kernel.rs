//! Weight generation from mutual similarity between each encoder point and
//! the decoder points selected for it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::sampling::{CoordSet, Tap};
use crate::tensor::{
    dot, group_norm_with_stats, linear_embed, softmax_in_place, GroupNormStats, LinearMap, Real,
    Tensor,
};

/// `h` in `w_i = h(s_i) / sum_j h(s_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormFn {
    /// Raw scores are used as weights.
    None,
    /// `e^x`, i.e. softmax.
    #[default]
    Exp,
    Relu,
    Sigmoid,
    Softplus,
}

impl NormFn {
    pub const ALL: [NormFn; 5] = [
        NormFn::None,
        NormFn::Exp,
        NormFn::Relu,
        NormFn::Sigmoid,
        NormFn::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormFn::None => "none",
            NormFn::Exp => "exp",
            NormFn::Relu => "relu",
            NormFn::Sigmoid => "sigmoid",
            NormFn::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        NormFn::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err!("unknown normalization function {s:?}"))
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            NormFn::None => x,
            NormFn::Exp => x.exp(),
            NormFn::Relu => x.max(T::zero()),
            NormFn::Sigmoid => sigmoid(x),
            NormFn::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// `h'(x)`; the ReLU kink takes derivative 0.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            NormFn::None => T::one(),
            NormFn::Exp => x.exp(),
            NormFn::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            NormFn::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            NormFn::Softplus => sigmoid(x),
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Kernel weights with the zero-denominator fallback flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T> {
    pub weights: Vec<T>,
    pub fallback: bool,
}

/// `w_i = h(s_i) / sum_j h(s_j)`. A zero or non-finite denominator yields
/// uniform weights and sets `fallback`.
pub fn normalize_weights<T: Real>(scores: &[T], h: NormFn) -> Normalized<T> {
    let mut weights = scores.to_vec();
    let fallback = normalize_in_place(&mut weights, h);
    Normalized { weights, fallback }
}

/// In-place variant of [`normalize_weights`]; returns whether the uniform
/// fallback was taken.
pub fn normalize_in_place<T: Real>(v: &mut [T], h: NormFn) -> bool {
    match h {
        NormFn::None => false,
        NormFn::Exp => {
            softmax_in_place(v);
            false
        }
        _ => {
            let mut sum = T::zero();
            for x in v.iter_mut() {
                *x = h.apply(*x);
                sum += *x;
            }
            if sum == T::zero() || !sum.is_finite() {
                let u = T::one() / T::of(v.len() as f64);
                v.iter_mut().for_each(|x| *x = u);
                true
            } else {
                v.iter_mut().for_each(|x| *x /= sum);
                false
            }
        }
    }
}

/// Similarity between one encoder point and a decoder point.
#[derive(Debug, Clone, Copy)]
pub enum SimilarityFn<'a, T> {
    /// `<x, y>`; needs equal dimensions.
    Inner,
    /// `<M_x x, M_y y>`.
    EmbeddedInner {
        mx: &'a LinearMap<T>,
        my: &'a LinearMap<T>,
    },
}

/// Scores of `y` against each of `points`.
pub fn mutual_similarity<T: Real>(
    y: &[T],
    points: &[&[T]],
    f: SimilarityFn<'_, T>,
) -> Result<Vec<T>> {
    match f {
        SimilarityFn::Inner => points
            .iter()
            .map(|x| {
                if x.len() != y.len() {
                    Err(Error::Inapplicable(alloc::format!(
                        "decoder channel count {} differs from encoder channel count {}",
                        x.len(),
                        y.len()
                    )))
                } else {
                    Ok(dot(x, y))
                }
            })
            .collect(),
        SimilarityFn::EmbeddedInner { mx, my } => {
            if mx.rows() != my.rows() {
                return Err(shape_err!(
                    "embedding dims differ: M_x has {}, M_y has {}",
                    mx.rows(),
                    my.rows()
                ));
            }
            if my.cols() != y.len() {
                return Err(shape_err!(
                    "M_y expects {} channels, encoder point has {}",
                    my.cols(),
                    y.len()
                ));
            }
            let q = my.apply(y);
            points
                .iter()
                .map(|x| {
                    if x.len() != mx.cols() {
                        return Err(shape_err!(
                            "M_x expects {} channels, decoder point has {}",
                            mx.cols(),
                            x.len()
                        ));
                    }
                    Ok(dot(&mx.apply(x), &q))
                })
                .collect()
        }
    }
}

/// Per-group similarity parameters for a whole feature map.
#[derive(Debug, Clone, Copy)]
pub enum Similarity<'a, T> {
    /// Inner product on each group's channel slice.
    Inner { groups: usize },
    /// One `(M_x, M_y)` pair per group, each embedding the full channel
    /// vectors.
    Embedded {
        mx: &'a [LinearMap<T>],
        my: &'a [LinearMap<T>],
    },
}

impl<T: Real> Similarity<'_, T> {
    pub fn groups(&self) -> usize {
        match self {
            Similarity::Inner { groups } => *groups,
            Similarity::Embedded { mx, .. } => mx.len(),
        }
    }
}

/// Optional group normalization applied to both features before the
/// similarity path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreNorm {
    pub groups: usize,
    pub eps: f64,
}

/// Where the selected points of each `(sample, group)` pair come from.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a, T> {
    /// Same coordinates for every sample and group (window selection).
    Shared(&'a CoordSet<T>),
    /// `sets[sample][group]`.
    PerGroup(&'a [Vec<CoordSet<T>>]),
}

impl<'a, T> Selection<'a, T> {
    #[inline]
    pub fn get(&self, sample: usize, group: usize) -> &'a CoordSet<T> {
        match self {
            Selection::Shared(set) => set,
            Selection::PerGroup(sets) => &sets[sample][group],
        }
    }
}

/// Kernel weights of shape `(n, out_h, out_w, groups, points)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMap<T> {
    pub n: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub groups: usize,
    pub points: usize,
    pub weights: Vec<T>,
    /// Number of kernels that hit the zero-denominator fallback.
    pub fallbacks: usize,
}

impl<T: Real> KernelMap<T> {
    #[inline]
    pub fn weights_at(&self, sample: usize, i: usize, j: usize, group: usize) -> &[T] {
        let start =
            (((sample * self.out_h + i) * self.out_w + j) * self.groups + group) * self.points;
        &self.weights[start..start + self.points]
    }

    /// One `out_h x out_w` map per kernel slot for `(sample, group)`.
    pub fn slot_map(&self, sample: usize, group: usize, slot: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.out_h * self.out_w);
        for i in 0..self.out_h {
            for j in 0..self.out_w {
                out.push(self.weights_at(sample, i, j, group)[slot]);
            }
        }
        out
    }
}

/// Channel-last similarity features: keys on the low-res grid, queries on
/// the high-res grid, `[sample][group]`.
#[derive(Debug, Clone)]
pub(crate) struct SimFeatures<T> {
    pub key_dim: usize,
    pub keys: Vec<Vec<Vec<T>>>,
    pub queries: Vec<Vec<Vec<T>>>,
    /// Normalized inputs and their statistics, when pre-normalization ran.
    pub normed: Option<NormedInputs<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct NormedInputs<T> {
    pub decoder: Tensor<T>,
    pub encoder: Tensor<T>,
    pub decoder_stats: GroupNormStats<T>,
    pub encoder_stats: GroupNormStats<T>,
}

pub(crate) fn check_pair<T: Real>(decoder: &Tensor<T>, encoder: &Tensor<T>) -> Result<usize> {
    let [n, _, h, w] = decoder.dims();
    let [en, _, eh, ew] = encoder.dims();
    if en != n {
        return Err(shape_err!(
            "decoder batch {n} differs from encoder batch {en}"
        ));
    }
    if h == 0 || w == 0 || eh % h != 0 || ew % w != 0 || eh / h != ew / w || eh / h == 0 {
        return Err(shape_err!(
            "encoder spatial {eh}x{ew} is not an integer multiple of decoder spatial {h}x{w}"
        ));
    }
    Ok(eh / h)
}

pub(crate) fn similarity_features<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    sim: &Similarity<'_, T>,
    pre_norm: Option<PreNorm>,
) -> Result<SimFeatures<T>> {
    check_pair(decoder, encoder)?;
    let (c, ce) = (decoder.c(), encoder.c());
    let normed = match pre_norm {
        Some(p) => {
            let (dn, ds) = group_norm_with_stats(decoder, p.groups, p.eps)?;
            let (en, es) = group_norm_with_stats(encoder, p.groups, p.eps)?;
            Some(NormedInputs {
                decoder: dn,
                encoder: en,
                decoder_stats: ds,
                encoder_stats: es,
            })
        }
        None => None,
    };
    let (zd, ze) = match &normed {
        Some(nm) => (&nm.decoder, &nm.encoder),
        None => (decoder, encoder),
    };
    match sim {
        Similarity::Inner { groups } => {
            let g = *groups;
            if c != ce {
                return Err(Error::Inapplicable(alloc::format!(
                    "decoder has {c} channels but encoder has {ce}; channel counts must match"
                )));
            }
            if g == 0 || c % g != 0 {
                return Err(config_err!("{c} channels not divisible into {g} groups"));
            }
            let cg = c / g;
            let split = |t: &Tensor<T>| -> Vec<Vec<Vec<T>>> {
                t.to_nhwc()
                    .into_iter()
                    .map(|sample| {
                        if g == 1 {
                            return alloc::vec![sample];
                        }
                        (0..g)
                            .map(|k| {
                                sample
                                    .chunks_exact(c)
                                    .flat_map(|v| v[k * cg..(k + 1) * cg].iter().copied())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            };
            Ok(SimFeatures {
                key_dim: cg,
                keys: split(zd),
                queries: split(ze),
                normed,
            })
        }
        Similarity::Embedded { mx, my } => {
            if mx.is_empty() || mx.len() != my.len() {
                return Err(config_err!(
                    "need one M_x and one M_y per group, got {} and {}",
                    mx.len(),
                    my.len()
                ));
            }
            let d = mx[0].rows();
            for (a, b) in mx.iter().zip(my.iter()) {
                if a.rows() != d || b.rows() != d {
                    return Err(shape_err!(
                        "all embeddings must share one embedding dim {d}"
                    ));
                }
                if a.cols() != c {
                    return Err(shape_err!(
                        "M_x expects {} channels, decoder has {c}",
                        a.cols()
                    ));
                }
                if b.cols() != ce {
                    return Err(shape_err!(
                        "M_y expects {} channels, encoder has {ce}",
                        b.cols()
                    ));
                }
            }
            let n = decoder.n();
            let mut keys = vec![Vec::with_capacity(mx.len()); n];
            let mut queries = vec![Vec::with_capacity(mx.len()); n];
            for (a, b) in mx.iter().zip(my.iter()) {
                for (s, k) in linear_embed(zd, a)?.to_nhwc().into_iter().enumerate() {
                    keys[s].push(k);
                }
                for (s, q) in linear_embed(ze, b)?.to_nhwc().into_iter().enumerate() {
                    queries[s].push(q);
                }
            }
            Ok(SimFeatures {
                key_dim: d,
                keys,
                queries,
                normed,
            })
        }
    }
}

/// Kernel weights for every output position: similarity between the
/// encoder point at `l'` and the decoder points selected for it, passed
/// through `norm`.
pub fn generate_kernel_map<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    selection: Selection<'_, T>,
    sim: &Similarity<'_, T>,
    norm: NormFn,
    pre_norm: Option<PreNorm>,
) -> Result<KernelMap<T>> {
    let feats = similarity_features(decoder, encoder, sim, pre_norm)?;
    kernel_map_from_features(decoder, encoder, selection, &feats, norm, None)
}

/// Weight generation on prepared features. When `scores_out` is given the
/// raw similarity scores are written there in kernel-map order.
pub(crate) fn kernel_map_from_features<T: Real>(
    decoder: &Tensor<T>,
    encoder: &Tensor<T>,
    selection: Selection<'_, T>,
    feats: &SimFeatures<T>,
    norm: NormFn,
    mut scores_out: Option<&mut Vec<T>>,
) -> Result<KernelMap<T>> {
    let [n, _, h, w] = decoder.dims();
    let (out_h, out_w) = (encoder.h(), encoder.w());
    let groups = feats.keys.first().map_or(0, |k| k.len());
    let points = selection.get(0, 0).points;
    for b in 0..n {
        for g in 0..groups {
            let set = selection.get(b, g);
            if set.out_h != out_h || set.out_w != out_w || set.points != points {
                return Err(shape_err!(
                    "coordinate set {}x{}x{} does not match output {out_h}x{out_w} with {points} points",
                    set.out_h,
                    set.out_w,
                    set.points
                ));
            }
        }
    }
    let kd = feats.key_dim;
    let total = n * out_h * out_w * groups * points;
    let mut weights = vec![T::zero(); total];
    if let Some(s) = scores_out.as_deref_mut() {
        s.clear();
        s.resize(total, T::zero());
    }
    let mut scores = vec![T::zero(); points];
    let mut fallbacks = 0;
    // Visit sibling tiles together so the keys of a shared window stay cached.
    let (th, tw) = ((out_h / h.max(1)).max(1), (out_w / w.max(1)).max(1));
    let tiles = (0..out_h)
        .step_by(th)
        .flat_map(|ti| (0..out_w).step_by(tw).map(move |tj| (ti, tj)));
    let pixels = tiles.flat_map(|(ti, tj)| {
        (ti..(ti + th).min(out_h))
            .flat_map(move |i| (tj..(tj + tw).min(out_w)).map(move |j| (i, j)))
    });
    for b in 0..n {
        for (i, j) in pixels.clone() {
            let pos = i * out_w + j;
            for g in 0..groups {
                let at = (((b * out_h + i) * out_w + j) * groups + g) * points;
                let keys = &feats.keys[b][g];
                let q = &feats.queries[b][g][pos * kd..(pos + 1) * kd];
                for (score, &coord) in scores.iter_mut().zip(selection.get(b, g).at(i, j)) {
                    // <sum_c w_c k_c, q> = sum_c w_c <k_c, q>; integer
                    // coordinates touch a single corner.
                    let corners = Tap::new(h, w, coord).corners(w);
                    *score = corners
                        .iter()
                        .filter(|&&(_, cw)| cw != T::zero())
                        .map(|&(idx, cw)| cw * dot(&keys[idx * kd..(idx + 1) * kd], q))
                        .fold(T::zero(), |a, v| a + v);
                }
                if let Some(s) = scores_out.as_deref_mut() {
                    s[at..at + points].copy_from_slice(&scores);
                }
                if normalize_in_place(&mut scores, norm) {
                    fallbacks += 1;
                }
                weights[at..at + points].copy_from_slice(&scores);
            }
        }
    }
    Ok(KernelMap {
        n,
        out_h,
        out_w,
        groups,
        points,
        weights,
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_uniform_weights() {
        for h in [NormFn::Exp, NormFn::Relu, NormFn::Sigmoid, NormFn::Softplus] {
            let w = normalize_weights(&[0.7f64; 5], h);
            assert!(!w.fallback);
            assert!(w.weights.iter().all(|&v| (v - 0.2).abs() < 1e-15), "{h:?}");
        }
    }

    #[test]
    fn exp_matches_direct_softmax() {
        let w = normalize_weights(&[1.0f64, 2.0, 3.0], NormFn::Exp).weights;
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (k, v) in w.iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_all_negative_falls_back_to_uniform() {
        let w = normalize_weights(&[-1.0f64, -2.0, -3.0], NormFn::Relu);
        assert!(w.fallback);
        assert_eq!(w.weights, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn none_passes_scores_through() {
        let w = normalize_weights(&[-1.0f64, 2.5], NormFn::None);
        assert_eq!(w.weights, vec![-1.0, 2.5]);
    }

    #[test]
    fn norm_derivatives_match_differences() {
        for h in [NormFn::Exp, NormFn::Sigmoid, NormFn::Softplus, NormFn::None] {
            for x in [-3.0f64, -0.4, 0.3, 2.0] {
                let e = 1e-6;
                let fd = (h.apply(x + e) - h.apply(x - e)) / (2.0 * e);
                assert!((fd - h.derivative(x)).abs() < 1e-8, "{h:?} at {x}");
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for h in NormFn::ALL {
            assert_eq!(NormFn::parse(h.name()).unwrap(), h);
        }
        assert!(NormFn::parse("tanh").is_err());
    }

    #[test]
    fn similarity_examples() {
        let y = [1.0f64, 0.0, 0.0];
        let a = [0.0f64, 2.0, 0.0];
        let b = [0.0f64, 0.0, -1.0];
        assert_eq!(
            mutual_similarity(&y, &[&a, &b], SimilarityFn::Inner).unwrap(),
            vec![0.0, 0.0]
        );

        let y = [2.0f64, 0.0];
        assert_eq!(
            mutual_similarity(&y, &[&y, &y, &y], SimilarityFn::Inner).unwrap(),
            vec![4.0; 3]
        );

        let short = [1.0f64];
        assert!(matches!(
            mutual_similarity(&y, &[&short], SimilarityFn::Inner),
            Err(Error::Inapplicable(_))
        ));
    }

    #[test]
    fn embedded_identity_reduces_to_inner() {
        let y = Tensor::<f64>::randn([1, 6, 1, 1], 1).into_data();
        let pts: Vec<Vec<f64>> = (0..4)
            .map(|s| Tensor::<f64>::randn([1, 6, 1, 1], 10 + s).into_data())
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let id = LinearMap::identity(6);
        let a = mutual_similarity(&y, &refs, SimilarityFn::Inner).unwrap();
        let b =
            mutual_similarity(&y, &refs, SimilarityFn::EmbeddedInner { mx: &id, my: &id }).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_kernel_is_one() {
        let dec = Tensor::<f64>::randn([1, 3, 4, 4], 2);
        let enc = Tensor::<f64>::randn([1, 3, 8, 8], 3);
        let set = CoordSet::windows(4, 4, 2, 1).unwrap();
        let km = generate_kernel_map(
            &dec,
            &enc,
            Selection::Shared(&set),
            &Similarity::Inner { groups: 1 },
            NormFn::Exp,
            None,
        )
        .unwrap();
        assert!(km.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn constant_decoder_gives_uniform_kernels() {
        let dec = Tensor::<f64>::full([1, 4, 5, 5], 0.8);
        let enc = Tensor::<f64>::randn([1, 4, 10, 10], 4);
        let set = CoordSet::windows(5, 5, 2, 3).unwrap();
        for h in [NormFn::Exp, NormFn::Sigmoid, NormFn::Softplus] {
            let km = generate_kernel_map(
                &dec,
                &enc,
                Selection::Shared(&set),
                &Similarity::Inner { groups: 2 },
                h,
                None,
            )
            .unwrap();
            assert!(km.weights.iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-12));
        }
    }

    #[test]
    fn two_cluster_window_concentrates_on_matching_cluster() {
        // Left half of the decoder is cluster a, right half cluster b; the
        // encoder everywhere equals a scaled copy of a.
        let a = [1.0f64, -0.5, 0.25];
        let b = [-0.75f64, 0.5, 1.0];
        let dec =
            Tensor::<f64>::from_fn([1, 3, 4, 4], |_, c, _, j| if j < 2 { a[c] } else { b[c] });
        let enc = Tensor::<f64>::from_fn([1, 3, 8, 8], |_, c, _, _| 20.0 * a[c]);
        let set = CoordSet::windows(4, 4, 2, 3).unwrap();
        let km = generate_kernel_map(
            &dec,
            &enc,
            Selection::Shared(&set),
            &Similarity::Inner { groups: 1 },
            NormFn::Exp,
            None,
        )
        .unwrap();
        // Output (3, 3) sits at low-res (1, 1), whose window spans columns 0..=2.
        let w = km.weights_at(0, 3, 3, 0);
        let on_a: f64 = (0..9).filter(|p| p % 3 != 2).map(|p| w[p]).sum();
        // Brute-force softmax over the nine scores.
        let sa: f64 = a.iter().map(|v| 20.0 * v * v).sum();
        let sb: f64 = a.iter().zip(&b).map(|(x, y)| 20.0 * x * y).sum();
        let expect = 6.0 * sa.exp() / (6.0 * sa.exp() + 3.0 * sb.exp());
        assert!((on_a - expect).abs() < 1e-12);
        assert!(on_a > 0.99);
    }
}
