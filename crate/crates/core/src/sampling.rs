//! Point selection and resampling: square windows, clamp-to-edge bilinear
//! sampling, pixel (un)shuffle and the fixed-rule baseline upsamplers.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Fractional `(row, col)` location in low-res index space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coord<T> {
    pub row: T,
    pub col: T,
}

impl<T> Coord<T> {
    pub const fn new(row: T, col: T) -> Self {
        Self { row, col }
    }
}

/// `points` coordinates for every position of an `out_h x out_w` grid,
/// stored position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordSet<T> {
    pub out_h: usize,
    pub out_w: usize,
    pub points: usize,
    pub coords: Vec<Coord<T>>,
}

impl<T: Real> CoordSet<T> {
    pub fn new(out_h: usize, out_w: usize, points: usize, coords: Vec<Coord<T>>) -> Result<Self> {
        if coords.len() != out_h * out_w * points {
            return Err(shape_err!(
                "coordinate set for {out_h}x{out_w} positions with {points} points needs {} coords, got {}",
                out_h * out_w * points,
                coords.len()
            ));
        }
        Ok(Self {
            out_h,
            out_w,
            points,
            coords,
        })
    }

    /// The `points` coordinates selected for output position `(i, j)`.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[Coord<T>] {
        let start = (i * self.out_w + j) * self.points;
        &self.coords[start..start + self.points]
    }

    /// Square `k x k` windows around `floor(l'/ratio)` for every output
    /// position of a `ratio`-times upsampling of an `h x w` map.
    pub fn windows(h: usize, w: usize, ratio: usize, k: usize) -> Result<Self> {
        let offsets = window_coords((0, 0), k)?;
        let (out_h, out_w) = (h * ratio, w * ratio);
        let mut coords = Vec::with_capacity(out_h * out_w * offsets.len());
        for i in 0..out_h {
            for j in 0..out_w {
                let (li, lj) = ((i / ratio) as f64, (j / ratio) as f64);
                coords.extend(
                    offsets
                        .iter()
                        .map(|&(u, v)| Coord::new(T::of(li + u as f64), T::of(lj + v as f64))),
                );
            }
        }
        Ok(Self {
            out_h,
            out_w,
            points: offsets.len(),
            coords,
        })
    }
}

/// Sampled channel vectors, `points` per position, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet<T> {
    pub points: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> PointSet<T> {
    pub fn positions(&self) -> usize {
        self.values.len() / (self.points * self.channels).max(1)
    }

    /// Channel vector of point `p` at flat position `pos`.
    #[inline]
    pub fn point(&self, pos: usize, p: usize) -> &[T] {
        let start = (pos * self.points + p) * self.channels;
        &self.values[start..start + self.channels]
    }
}

/// The `k*k` integer coordinates of the window centred on `l`, in raster
/// order. Out-of-range coordinates are kept; clamping happens on sampling.
pub fn window_coords(l: (isize, isize), k: usize) -> Result<Vec<(isize, isize)>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(config_err!("kernel size must be odd and positive, got {k}"));
    }
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k);
    for u in -r..=r {
        for v in -r..=r {
            out.push((l.0 + u, l.1 + v));
        }
    }
    Ok(out)
}

/// Four-neighbour interpolation stencil for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<T> {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fr: T,
    pub fc: T,
    /// Coordinate strictly inside the valid range along that axis, i.e.
    /// the sample varies with it.
    pub row_free: bool,
    pub col_free: bool,
}

impl<T: Real> Tap<T> {
    /// Clamp-to-edge stencil on an `h x w` grid.
    #[inline]
    pub fn new(h: usize, w: usize, coord: Coord<T>) -> Self {
        let (r0, r1, fr, row_free) = axis(h, coord.row);
        let (c0, c1, fc, col_free) = axis(w, coord.col);
        Self {
            r0,
            r1,
            c0,
            c1,
            fr,
            fc,
            row_free,
            col_free,
        }
    }

    /// Flat `(index, weight)` pairs for a row-major `h x w` layout with
    /// row stride `w`.
    #[inline]
    pub fn corners(&self, w: usize) -> [(usize, T); 4] {
        let one = T::one();
        [
            (self.r0 * w + self.c0, (one - self.fr) * (one - self.fc)),
            (self.r0 * w + self.c1, (one - self.fr) * self.fc),
            (self.r1 * w + self.c0, self.fr * (one - self.fc)),
            (self.r1 * w + self.c1, self.fr * self.fc),
        ]
    }

    /// Nested lerp over a row-major plane with row stride `w`; exact on
    /// constant neighbourhoods.
    #[inline]
    pub fn interpolate(&self, plane: &[T], w: usize) -> T {
        let at = |r: usize, c: usize| plane[r * w + c];
        let top = at(self.r0, self.c0) + self.fc * (at(self.r0, self.c1) - at(self.r0, self.c0));
        let bottom = at(self.r1, self.c0) + self.fc * (at(self.r1, self.c1) - at(self.r1, self.c0));
        top + self.fr * (bottom - top)
    }

    /// Weights of the four corners for `d/d row` and `d/d col`; zero on a
    /// clamped axis.
    #[inline]
    pub fn coord_derivatives(&self) -> ([T; 4], [T; 4]) {
        let one = T::one();
        let z = T::zero();
        let d_row = if self.row_free {
            [-(one - self.fc), -self.fc, one - self.fc, self.fc]
        } else {
            [z; 4]
        };
        let d_col = if self.col_free {
            [-(one - self.fr), one - self.fr, -self.fr, self.fr]
        } else {
            [z; 4]
        };
        (d_row, d_col)
    }

    /// Discrete state (cell and clamp flags); stays fixed while the
    /// sample is a smooth function of its coordinate.
    pub fn regime(&self) -> (usize, usize, bool, bool) {
        (self.r0, self.c0, self.row_free, self.col_free)
    }
}

#[inline]
fn axis<T: Real>(len: usize, v: T) -> (usize, usize, T, bool) {
    let hi = T::of((len - 1) as f64);
    let free = v > T::zero() && v < hi;
    let c = v.max(T::zero()).min(hi);
    let i0 = c.floor();
    let i0u = i0.as_f64() as usize;
    let i1u = (i0u + 1).min(len - 1);
    (i0u, i1u, c - i0, free)
}

/// Bilinearly samples sample `batch` of `x` at every coordinate of
/// `coords`, clamping coordinates to the valid range first.
pub fn bilinear_sample<T: Real>(
    x: &Tensor<T>,
    batch: usize,
    coords: &CoordSet<T>,
) -> Result<PointSet<T>> {
    let [n, c, h, w] = x.dims();
    if batch >= n {
        return Err(shape_err!(
            "sample index {batch} out of range for batch of {n}"
        ));
    }
    let mut values = Vec::with_capacity(coords.coords.len() * c);
    for &coord in &coords.coords {
        let tap = Tap::new(h, w, coord);
        for ch in 0..c {
            values.push(tap.interpolate(x.plane(batch, ch), w));
        }
    }
    Ok(PointSet {
        points: coords.points,
        channels: c,
        values,
    })
}

fn check_ratio(s: usize) -> Result<()> {
    if s == 0 {
        return Err(config_err!("upsampling ratio must be positive"));
    }
    Ok(())
}

/// Nearest-neighbour upsampling: `out[i', j'] = x[i'/s, j'/s]`.
pub fn nn_upsample<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    check_ratio(s)?;
    let [n, c, h, w] = x.dims();
    Ok(Tensor::from_fn([n, c, h * s, w * s], |b, ch, i, j| {
        x.at(b, ch, i / s, j / s)
    }))
}

/// Bilinear resize by an integer factor.
pub fn bilinear_upsample<T: Real>(
    x: &Tensor<T>,
    s: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    check_ratio(s)?;
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * s, w * s);
    let src = |dst: usize, in_len: usize, out_len: usize| -> f64 {
        if align_corners {
            if out_len > 1 {
                dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            } else {
                0.0
            }
        } else {
            (dst as f64 + 0.5) / s as f64 - 0.5
        }
    };
    let rows: Vec<f64> = (0..oh).map(|i| src(i, h, oh)).collect();
    let cols: Vec<f64> = (0..ow).map(|j| src(j, w, ow)).collect();
    Ok(Tensor::from_fn([n, c, oh, ow], |b, ch, i, j| {
        Tap::new(h, w, Coord::new(T::of(rows[i]), T::of(cols[j]))).interpolate(x.plane(b, ch), w)
    }))
}

/// Depth-to-space: `(n, c, h, w) -> (n, c/s^2, s*h, s*w)` with
/// `out[k, s*i+u, s*j+v] = in[k*s^2 + u*s + v, i, j]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    check_ratio(s)?;
    let [n, c, h, w] = x.dims();
    if c % (s * s) != 0 {
        return Err(shape_err!(
            "pixel_shuffle: {c} channels not divisible by {}",
            s * s
        ));
    }
    Ok(Tensor::from_fn(
        [n, c / (s * s), h * s, w * s],
        |b, k, i, j| x.at(b, k * s * s + (i % s) * s + j % s, i / s, j / s),
    ))
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    check_ratio(s)?;
    let [n, c, h, w] = x.dims();
    if h % s != 0 || w % s != 0 {
        return Err(shape_err!(
            "pixel_unshuffle: spatial {h}x{w} not divisible by {s}"
        ));
    }
    Ok(Tensor::from_fn(
        [n, c * s * s, h / s, w / s],
        |b, ch, i, j| {
            let (k, sub) = (ch / (s * s), ch % (s * s));
            x.at(b, k, i * s + sub / s, j * s + sub % s)
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid2() -> Tensor<f64> {
        Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    fn sample_one(x: &Tensor<f64>, r: f64, c: f64) -> f64 {
        let set = CoordSet::new(1, 1, 1, vec![Coord::new(r, c)]).unwrap();
        bilinear_sample(x, 0, &set).unwrap().values[0]
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_coords((5, 5), 1).unwrap(), vec![(5, 5)]);
        let w = window_coords((0, 0), 3).unwrap();
        assert_eq!(w.first(), Some(&(-1, -1)));
        assert_eq!(w.last(), Some(&(1, 1)));
        assert_eq!(
            window_coords((2, 3), 3).unwrap(),
            vec![
                (1, 2),
                (1, 3),
                (1, 4),
                (2, 2),
                (2, 3),
                (2, 4),
                (3, 2),
                (3, 3),
                (3, 4)
            ]
        );
        assert!(matches!(
            window_coords((0, 0), 4),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn bilinear_sample_examples() {
        let x = grid2();
        assert_eq!(sample_one(&x, 1.0, 0.0), 2.0);
        assert_eq!(sample_one(&x, 0.5, 0.5), 1.5);
        assert_eq!(sample_one(&x, 0.0, 0.25), 0.25);
        // clamp-to-edge
        assert_eq!(sample_one(&x, -3.0, 7.0), 1.0);
    }

    #[test]
    fn nn_upsample_examples() {
        let x = Tensor::<f64>::randn([1, 2, 3, 3], 3);
        assert_eq!(nn_upsample(&x, 1).unwrap(), x);
        let one = Tensor::<f64>::full([1, 1, 1, 1], 7.0);
        assert_eq!(nn_upsample(&one, 2).unwrap().data(), &[7.0; 4]);
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = nn_upsample(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_upsample_examples() {
        let x = Tensor::<f64>::full([1, 2, 3, 4], 1.25);
        assert!(bilinear_upsample(&x, 3, false)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.25));
        let x = Tensor::<f64>::randn([1, 2, 3, 4], 9);
        assert_eq!(bilinear_upsample(&x, 1, false).unwrap(), x);
        assert_eq!(bilinear_upsample(&x, 1, true).unwrap(), x);
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2, false).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let y = bilinear_upsample(&x, 2, true).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in y.data()[..4].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::<f64>::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        let x = Tensor::<f64>::randn([2, 3, 2, 2], 1);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(matches!(pixel_shuffle(&x, 2), Err(crate::Error::Shape(_))));
        assert!(matches!(
            pixel_unshuffle(&Tensor::<f64>::zeros([1, 1, 3, 4]), 2),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn tap_derivative_flags() {
        let t = Tap::new(4, 4, Coord::new(0.0f64, 1.5));
        assert!(!t.row_free);
        assert!(t.col_free);
        let t = Tap::new(4, 4, Coord::new(3.0f64, 2.0));
        assert!(!t.row_free);
        assert_eq!((t.r0, t.r1), (3, 3));
        let t = Tap::new(1, 1, Coord::new(0.3f64, -0.3));
        assert_eq!(t.corners(1).iter().map(|c| c.1).sum::<f64>(), 1.0);
    }

    #[test]
    fn window_sets_are_translation_equivariant() {
        let set = CoordSet::<f64>::windows(8, 8, 2, 3).unwrap();
        let a = set.at(6, 6);
        let b = set.at(8, 10);
        for (p, q) in a.iter().zip(b) {
            assert_eq!(q.row - p.row, 1.0);
            assert_eq!(q.col - p.col, 2.0);
        }
    }
}
