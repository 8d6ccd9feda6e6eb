//! Trilinear sampling at fractional voxel coordinates and 2× upsampling.

use super::tape::{Op, Tape, Var};
use super::{volume_dims, Scalar, Tensor};
use crate::error::{Error, Result};

/// The eight lattice neighbours of a fractional location. Neighbours outside
/// the volume read as zero and receive no gradient.
pub(crate) struct Corners<T> {
    /// Flat index per corner; only meaningful where `inside` has the bit set.
    idx: [usize; 8],
    inside: u8,
    frac: [T; 3],
}

pub(crate) fn corners<T: Scalar>(dims: [usize; 3], loc: [T; 3]) -> Corners<T> {
    let mut out = Corners {
        idx: [0; 8],
        inside: 0,
        frac: [T::zero(); 3],
    };
    let mut base = [0isize; 3];
    for a in 0..3 {
        let f = loc[a].floor();
        match f.to_isize() {
            Some(i) if loc[a].is_finite() => {
                base[a] = i;
                out.frac[a] = loc[a] - f;
            }
            _ => return out,
        }
    }
    // Per axis: is the lower / upper neighbour inside?
    let ok = |a: usize, bit: isize| {
        let p = base[a] + bit;
        p >= 0 && (p as usize) < dims[a]
    };
    for c in 0..8 {
        let bits = [(c >> 2) & 1, (c >> 1) & 1, c & 1].map(|b| b as isize);
        if ok(0, bits[0]) && ok(1, bits[1]) && ok(2, bits[2]) {
            let p = [0, 1, 2].map(|a| (base[a] + bits[a]) as usize);
            out.idx[c] = (p[0] * dims[1] + p[1]) * dims[2] + p[2];
            out.inside |= 1 << c;
        }
    }
    out
}

impl<T: Scalar> Corners<T> {
    /// Per axis `[1 - f, f]`.
    #[inline]
    fn axis_weights(&self) -> [[T; 2]; 3] {
        self.frac.map(|f| [T::one() - f, f])
    }

    #[inline]
    fn weight(w: &[[T; 2]; 3], c: usize) -> T {
        w[0][(c >> 2) & 1] * w[1][(c >> 1) & 1] * w[2][c & 1]
    }

    #[inline]
    pub(crate) fn interpolate(&self, vol: &[T]) -> T {
        let w = self.axis_weights();
        let mut acc = T::zero();
        for c in 0..8 {
            if self.inside & (1 << c) != 0 {
                acc += Self::weight(&w, c) * vol[self.idx[c]];
            }
        }
        acc
    }

    #[inline]
    pub(crate) fn scatter(&self, g: T, dvol: &mut [T]) {
        let w = self.axis_weights();
        for c in 0..8 {
            if self.inside & (1 << c) != 0 {
                dvol[self.idx[c]] += g * Self::weight(&w, c);
            }
        }
    }

    /// Spatial gradient of the interpolant with respect to the location.
    #[inline]
    pub(crate) fn gradient(&self, vol: &[T]) -> [T; 3] {
        let w = self.axis_weights();
        let sign = [-T::one(), T::one()];
        let mut g = [T::zero(); 3];
        for c in 0..8 {
            if self.inside & (1 << c) != 0 {
                let v = vol[self.idx[c]];
                let b = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
                g[0] += sign[b[0]] * w[1][b[1]] * w[2][b[2]] * v;
                g[1] += w[0][b[0]] * sign[b[1]] * w[2][b[2]] * v;
                g[2] += w[0][b[0]] * w[1][b[1]] * sign[b[2]] * v;
            }
        }
        g
    }
}

/// Trilinear interpolation of a single-channel `H×W×D` volume.
pub fn trilinear_sample<T: Scalar>(vol: &[T], dims: [usize; 3], loc: [T; 3]) -> T {
    corners(dims, loc).interpolate(vol)
}

fn check_locations(shape: &[usize]) -> Result<usize> {
    match shape {
        [m, 3] => Ok(*m),
        _ => Err(Error::shape(
            "grid_sample",
            format!("locations must be M×3, got {shape:?}"),
        )),
    }
}

pub(crate) fn grid_sample_forward<T: Scalar>(
    x: &Tensor<T>,
    locations: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, dims) = volume_dims(x.shape(), "grid_sample")?;
    let m = check_locations(locations.shape())?;
    let vox: usize = dims.iter().product();
    let mut out = vec![T::zero(); c * m];
    for (j, loc) in locations.data().chunks_exact(3).enumerate() {
        let cs = corners(dims, [loc[0], loc[1], loc[2]]);
        for ch in 0..c {
            out[ch * m + j] = cs.interpolate(&x.data()[ch * vox..(ch + 1) * vox]);
        }
    }
    Ok(Tensor::from_parts(vec![c, m], out))
}

pub(crate) fn grid_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    locations: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, dims) = (x.shape()[0], [x.shape()[1], x.shape()[2], x.shape()[3]]);
    let m = locations.shape()[0];
    let vox: usize = dims.iter().product();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dloc = vec![T::zero(); locations.numel()];
    for (j, loc) in locations.data().chunks_exact(3).enumerate() {
        let cs = corners(dims, [loc[0], loc[1], loc[2]]);
        for ch in 0..c {
            let gv = g.data()[ch * m + j];
            let range = ch * vox..(ch + 1) * vox;
            cs.scatter(gv, &mut dx[range.clone()]);
            let grad = cs.gradient(&x.data()[range]);
            for a in 0..3 {
                dloc[3 * j + a] += gv * grad[a];
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(locations.shape().to_vec(), dloc),
    )
}

/// Source taps `(lo, hi, weight_hi)` for each output index of a 2× upsample
/// with half-pixel centres.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear interpolation along the middle axis of an `outer×n×inner` array.
fn interp_axis<T: Scalar>(src: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = upsample_taps(n);
    let mut dst = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        for (i, &(lo, hi, t)) in taps.iter().enumerate() {
            let (wl, wh) = (T::c(1.0 - t), T::c(t));
            let s_lo = &src[(o * n + lo) * inner..][..inner];
            let s_hi = &src[(o * n + hi) * inner..][..inner];
            let d = &mut dst[(o * 2 * n + i) * inner..][..inner];
            for r in 0..inner {
                d[r] = wl * s_lo[r] + wh * s_hi[r];
            }
        }
    }
    dst
}

fn interp_axis_transpose<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = upsample_taps(n);
    let mut dst = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for (i, &(lo, hi, t)) in taps.iter().enumerate() {
            let (wl, wh) = (T::c(1.0 - t), T::c(t));
            let gi = &g[(o * 2 * n + i) * inner..][..inner];
            for r in 0..inner {
                dst[(o * n + lo) * inner + r] += wl * gi[r];
                dst[(o * n + hi) * inner + r] += wh * gi[r];
            }
        }
    }
    dst
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, [h, w, d]) = volume_dims(x.shape(), "upsample")?;
    let a = interp_axis(x.data(), c * h * w, d, 1);
    let b = interp_axis(&a, c * h, w, 2 * d);
    let out = interp_axis(&b, c, h, 4 * w * d);
    Ok(Tensor::from_parts(vec![c, 2 * h, 2 * w, 2 * d], out))
}

pub(crate) fn upsample2x_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (c, h, w, d) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let b = interp_axis_transpose(g.data(), c, h, 4 * w * d);
    let a = interp_axis_transpose(&b, c * h, w, 2 * d);
    let dx = interp_axis_transpose(&a, c * h * w, d, 1);
    Tensor::from_parts(in_shape.to_vec(), dx)
}

impl<T: Scalar> Tape<T> {
    /// Samples every channel of a `C×H×W×D` volume at `M` fractional
    /// `(h, w, d)` voxel coordinates, giving `C×M`.
    pub fn grid_sample_trilinear(&mut self, input: Var, locations: Var) -> Result<Var> {
        let out = grid_sample_forward(self.value(input), self.value(locations))?;
        Ok(self.push(
            out,
            Op::GridSample { input, locations },
            &[input, locations],
        ))
    }

    /// Doubles every spatial extent with trilinear interpolation
    /// (half-pixel centres, edge-clamped).
    pub fn trilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor != 2 {
            return Err(Error::Config(format!(
                "only factor 2 upsampling is supported, got {factor}"
            )));
        }
        let out = upsample2x_forward(self.value(input))?;
        Ok(self.push(out, Op::Upsample2x { input }, &[input]))
    }
}
