//! 3D cross-correlation (grouped, strided, zero-padded) and its deformable
//! variant, both lowered to tiled im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::sample::corners;
use super::tape::{Op, Tape, Var};
use super::{volume_dims, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col tile size, in elements.
const TILE_ELEMS: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) || groups == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel {kernel:?}, stride {stride:?} and groups {groups} must be positive"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            groups,
        })
    }

    /// Cubic kernel, one group.
    pub fn cube(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            groups: 1,
        }
    }

    /// Stride 1 with `(k-1)/2` padding, which preserves extents for odd `k`.
    pub fn same(kernel: usize) -> Self {
        Self::cube(kernel, 1, (kernel - 1) / 2)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::InvalidSpec(format!(
                    "axis {a}: input {} with padding {} is smaller than kernel {} (empty output)",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    taps: usize,
    in_vox: usize,
    out_vox: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        spec: &ConvSpec,
    ) -> Result<Self> {
        let (cin, in_dims) = volume_dims(input, op)?;
        let [cout, cin_g, kh, kw, kd] = *weight else {
            return Err(Error::shape(
                op,
                format!("weight must be Cout×Cin/g×kh×kw×kd, got {weight:?}"),
            ));
        };
        if [kh, kw, kd] != spec.kernel {
            return Err(Error::shape(
                op,
                format!(
                    "weight kernel {:?} disagrees with spec kernel {:?}",
                    [kh, kw, kd],
                    spec.kernel
                ),
            ));
        }
        let groups = spec.groups;
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::InvalidSpec(format!(
                "groups {groups} must divide in-channels {cin} and out-channels {cout}"
            )));
        }
        if cin_g * groups != cin {
            return Err(Error::shape(
                op,
                format!("weight expects {} input channels per group, input has {cin} over {groups} groups", cin_g),
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape(
                    op,
                    format!("bias must be [{cout}], got {b:?}"),
                ));
            }
        }
        let out_dims = spec.output_dims(in_dims)?;
        Ok(Self {
            cin,
            cout,
            groups,
            cin_g,
            cout_g: cout / groups,
            in_dims,
            out_dims,
            taps: spec.taps(),
            in_vox: in_dims.iter().product(),
            out_vox: out_dims.iter().product(),
        })
    }

    fn rows(&self) -> usize {
        self.cin_g * self.taps
    }

    fn tile_len(&self) -> usize {
        (TILE_ELEMS / self.rows()).clamp(1, self.out_vox)
    }
}

/// Top-left-front input coordinate of each output position in `p0..p0+len`.
fn tile_origins(g: &Geometry, spec: &ConvSpec, p0: usize, len: usize) -> Vec<[isize; 3]> {
    let [_, ow, od] = g.out_dims;
    (p0..p0 + len)
        .map(|p| {
            let o = [p / (ow * od), (p / od) % ow, p % od];
            std::array::from_fn(|a| (o[a] * spec.stride[a]) as isize - spec.padding[a] as isize)
        })
        .collect()
}

fn tap_offsets(spec: &ConvSpec) -> Vec<[isize; 3]> {
    let [kh, kw, kd] = spec.kernel;
    let mut taps = Vec::with_capacity(kh * kw * kd);
    for a in 0..kh {
        for b in 0..kw {
            for c in 0..kd {
                taps.push([a as isize, b as isize, c as isize]);
            }
        }
    }
    taps
}

/// Output positions `j..j+len` of a tile that share one `(oh, ow)` row.
#[derive(Debug, Clone, Copy)]
struct Run {
    j: usize,
    h: isize,
    w: isize,
    d0: isize,
    len: usize,
}

fn tile_runs(g: &Geometry, spec: &ConvSpec, p0: usize, len: usize) -> Vec<Run> {
    let [_, ow, od] = g.out_dims;
    let mut runs = Vec::new();
    let mut p = p0;
    while p < p0 + len {
        let k = p % od;
        let n = (od - k).min(p0 + len - p);
        let o = [p / (ow * od), (p / od) % ow, k];
        let at = |a: usize| (o[a] * spec.stride[a]) as isize - spec.padding[a] as isize;
        runs.push(Run {
            j: p - p0,
            h: at(0),
            w: at(1),
            d0: at(2),
            len: n,
        });
        p += n;
    }
    runs
}

/// For a run shifted by tap `off`: the input row start (if the row lies
/// inside the volume) and the sub-range of positions whose depth is in range.
#[inline]
fn run_span(
    r: &Run,
    off: [isize; 3],
    stride: isize,
    dims: [usize; 3],
) -> Option<(usize, isize, usize, usize)> {
    let (h, w) = (r.h + off[0], r.w + off[1]);
    if h < 0 || w < 0 || h as usize >= dims[0] || w as usize >= dims[1] {
        return None;
    }
    let first = r.d0 + off[2];
    let depth = dims[2] as isize;
    // first + k·stride must land in [0, depth)
    let lo = if first >= 0 {
        0
    } else {
        (-first + stride - 1) / stride
    };
    let hi = if first >= depth {
        0
    } else {
        (depth - first + stride - 1) / stride
    };
    let (lo, hi) = (
        lo.min(r.len as isize) as usize,
        hi.clamp(0, r.len as isize) as usize,
    );
    let row = (h as usize * dims[1] + w as usize) * dims[2];
    Some((row, first, lo, hi.max(lo)))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    group: usize,
    runs: &[Run],
    len: usize,
    taps: &[[isize; 3]],
    col: &mut [T],
) {
    let sd = spec.stride[2] as isize;
    for ci in 0..g.cin_g {
        let xc = &x[(group * g.cin_g + ci) * g.in_vox..][..g.in_vox];
        for (t, off) in taps.iter().enumerate() {
            let row = &mut col[(ci * g.taps + t) * len..][..len];
            for r in runs {
                let dst = &mut row[r.j..r.j + r.len];
                let Some((base, first, lo, hi)) = run_span(r, *off, sd, g.in_dims) else {
                    dst.fill(T::zero());
                    continue;
                };
                dst[..lo].fill(T::zero());
                dst[hi..].fill(T::zero());
                let start = base + (first + lo as isize * sd) as usize;
                if sd == 1 {
                    dst[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                } else {
                    for (k, v) in dst[lo..hi].iter_mut().enumerate() {
                        *v = xc[start + k * sd as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    g: &Geometry,
    spec: &ConvSpec,
    group: usize,
    runs: &[Run],
    len: usize,
    taps: &[[isize; 3]],
    dx: &mut [T],
) {
    let sd = spec.stride[2] as isize;
    for ci in 0..g.cin_g {
        let dxc = &mut dx[(group * g.cin_g + ci) * g.in_vox..][..g.in_vox];
        for (t, off) in taps.iter().enumerate() {
            let row = &col[(ci * g.taps + t) * len..][..len];
            for r in runs {
                let Some((base, first, lo, hi)) = run_span(r, *off, sd, g.in_dims) else {
                    continue;
                };
                let src = &row[r.j + lo..r.j + hi];
                let start = base + (first + lo as isize * sd) as usize;
                for (k, v) in src.iter().enumerate() {
                    dxc[start + k * sd as usize] += *v;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new("conv3d", x.shape(), w.shape(), b.map(|b| b.shape()), spec)?;
    let mut out = vec![T::zero(); g.cout * g.out_vox];
    let (xd, wd) = (x.data(), w.data());
    let rows = g.rows();
    if spec.is_pointwise() {
        for group in 0..g.groups {
            gemm(
                g.cout_g,
                rows,
                g.out_vox,
                T::one(),
                &wd[group * g.cout_g * rows..],
                (rows, 1),
                &xd[group * g.cin_g * g.in_vox..],
                (g.in_vox, 1),
                T::zero(),
                &mut out[group * g.cout_g * g.out_vox..],
                (g.out_vox, 1),
            );
        }
    } else {
        let taps = tap_offsets(spec);
        let tile = g.tile_len();
        let mut col = vec![T::zero(); rows * tile];
        for group in 0..g.groups {
            for p0 in (0..g.out_vox).step_by(tile) {
                let len = tile.min(g.out_vox - p0);
                let runs = tile_runs(&g, spec, p0, len);
                im2col(xd, &g, spec, group, &runs, len, &taps, &mut col);
                gemm(
                    g.cout_g,
                    rows,
                    len,
                    T::one(),
                    &wd[group * g.cout_g * rows..],
                    (rows, 1),
                    &col,
                    (len, 1),
                    T::zero(),
                    &mut out[group * g.cout_g * g.out_vox + p0..],
                    (g.out_vox, 1),
                );
            }
        }
    }
    if let Some(b) = b {
        for (chunk, bias) in out.chunks_mut(g.out_vox).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += *bias);
        }
    }
    let [oh, ow, od] = g.out_dims;
    Ok(Tensor::from_parts(vec![g.cout, oh, ow, od], out))
}

type ConvGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new("conv3d", x.shape(), w.shape(), None, spec)?;
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    let rows = g.rows();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    if spec.is_pointwise() {
        for group in 0..g.groups {
            let gy_g = &gyd[group * g.cout_g * g.out_vox..];
            gemm(
                g.cout_g,
                g.out_vox,
                rows,
                T::one(),
                gy_g,
                (g.out_vox, 1),
                &xd[group * g.cin_g * g.in_vox..],
                (1, g.in_vox),
                T::zero(),
                &mut dw[group * g.cout_g * rows..],
                (rows, 1),
            );
            if need_dx {
                gemm(
                    rows,
                    g.cout_g,
                    g.out_vox,
                    T::one(),
                    &wd[group * g.cout_g * rows..],
                    (1, rows),
                    gy_g,
                    (g.out_vox, 1),
                    T::zero(),
                    &mut dx[group * g.cin_g * g.in_vox..],
                    (g.in_vox, 1),
                );
            }
        }
    } else {
        let taps = tap_offsets(spec);
        let tile = g.tile_len();
        let mut col = vec![T::zero(); rows * tile];
        let mut dcol = vec![T::zero(); rows * tile];
        for group in 0..g.groups {
            for p0 in (0..g.out_vox).step_by(tile) {
                let len = tile.min(g.out_vox - p0);
                let runs = tile_runs(&g, spec, p0, len);
                let gy_tile = &gyd[group * g.cout_g * g.out_vox + p0..];
                im2col(xd, &g, spec, group, &runs, len, &taps, &mut col);
                gemm(
                    g.cout_g,
                    len,
                    rows,
                    T::one(),
                    gy_tile,
                    (g.out_vox, 1),
                    &col,
                    (1, len),
                    T::one(),
                    &mut dw[group * g.cout_g * rows..],
                    (rows, 1),
                );
                if need_dx {
                    gemm(
                        rows,
                        g.cout_g,
                        len,
                        T::one(),
                        &wd[group * g.cout_g * rows..],
                        (1, rows),
                        gy_tile,
                        (g.out_vox, 1),
                        T::zero(),
                        &mut dcol,
                        (len, 1),
                    );
                    col2im(&dcol, &g, spec, group, &runs, len, &taps, &mut dx);
                }
            }
        }
    }
    let db = need_db.then(|| {
        let sums = gyd
            .chunks(g.out_vox)
            .map(|c| c.iter().copied().sum())
            .collect();
        Tensor::from_parts(vec![g.cout], sums)
    });
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        db,
    ))
}

fn check_offsets(g: &Geometry, offsets: &[usize], spec: &ConvSpec) -> Result<()> {
    if spec.groups != 1 {
        return Err(Error::InvalidSpec(
            "deformable convolution supports one group".into(),
        ));
    }
    let want = [3 * g.taps, g.out_dims[0], g.out_dims[1], g.out_dims[2]];
    if offsets != want {
        return Err(Error::Config(format!(
            "deformable offsets must be {want:?} (3·S³ channels over the output grid), got {offsets:?}"
        )));
    }
    Ok(())
}

/// Sampling location of tap `t` at output position `p`.
#[inline]
fn deform_location<T: Scalar>(
    origin: [isize; 3],
    tap: [isize; 3],
    off: &[T],
    t: usize,
    p: usize,
    out_vox: usize,
) -> [T; 3] {
    std::array::from_fn(|a| T::c((origin[a] + tap[a]) as f64) + off[(3 * t + a) * out_vox + p])
}

fn deform_im2col<T: Scalar>(
    x: &[T],
    off: &[T],
    g: &Geometry,
    origins: &[[isize; 3]],
    p0: usize,
    taps: &[[isize; 3]],
    col: &mut [T],
) {
    let len = origins.len();
    for (t, tap) in taps.iter().enumerate() {
        for (j, o) in origins.iter().enumerate() {
            let loc = deform_location(*o, *tap, off, t, p0 + j, g.out_vox);
            let cs = corners(g.in_dims, loc);
            for ci in 0..g.cin {
                let xc = &x[ci * g.in_vox..][..g.in_vox];
                col[(ci * g.taps + t) * len + j] = cs.interpolate(xc);
            }
        }
    }
}

pub(crate) fn deform_conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(
        "deform_conv3d",
        x.shape(),
        w.shape(),
        b.map(|b| b.shape()),
        spec,
    )?;
    check_offsets(&g, offsets.shape(), spec)?;
    let rows = g.rows();
    let taps = tap_offsets(spec);
    let tile = g.tile_len();
    let mut col = vec![T::zero(); rows * tile];
    let mut out = vec![T::zero(); g.cout * g.out_vox];
    for p0 in (0..g.out_vox).step_by(tile) {
        let len = tile.min(g.out_vox - p0);
        let origins = tile_origins(&g, spec, p0, len);
        deform_im2col(x.data(), offsets.data(), &g, &origins, p0, &taps, &mut col);
        gemm(
            g.cout,
            rows,
            len,
            T::one(),
            w.data(),
            (rows, 1),
            &col,
            (len, 1),
            T::zero(),
            &mut out[p0..],
            (g.out_vox, 1),
        );
    }
    if let Some(b) = b {
        for (chunk, bias) in out.chunks_mut(g.out_vox).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += *bias);
        }
    }
    let [oh, ow, od] = g.out_dims;
    Ok(Tensor::from_parts(vec![g.cout, oh, ow, od], out))
}

pub(crate) struct DeformGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub offsets: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn deform_conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &ConvSpec,
    need_db: bool,
) -> Result<DeformGrads<T>> {
    let g = Geometry::new("deform_conv3d", x.shape(), w.shape(), None, spec)?;
    let rows = g.rows();
    let taps = tap_offsets(spec);
    let tile = g.tile_len();
    let (xd, off, gyd) = (x.data(), offsets.data(), gy.data());
    let mut col = vec![T::zero(); rows * tile];
    let mut dcol = vec![T::zero(); rows * tile];
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut doff = vec![T::zero(); offsets.numel()];
    for p0 in (0..g.out_vox).step_by(tile) {
        let len = tile.min(g.out_vox - p0);
        let origins = tile_origins(&g, spec, p0, len);
        let gy_tile = &gyd[p0..];
        deform_im2col(xd, off, &g, &origins, p0, &taps, &mut col);
        gemm(
            g.cout,
            len,
            rows,
            T::one(),
            gy_tile,
            (g.out_vox, 1),
            &col,
            (1, len),
            T::one(),
            &mut dw,
            (rows, 1),
        );
        gemm(
            rows,
            g.cout,
            len,
            T::one(),
            w.data(),
            (1, rows),
            gy_tile,
            (g.out_vox, 1),
            T::zero(),
            &mut dcol,
            (len, 1),
        );
        for (t, tap) in taps.iter().enumerate() {
            for (j, o) in origins.iter().enumerate() {
                let p = p0 + j;
                let loc = deform_location(*o, *tap, off, t, p, g.out_vox);
                let cs = corners(g.in_dims, loc);
                let mut dloc = [T::zero(); 3];
                for ci in 0..g.cin {
                    let gc = dcol[(ci * g.taps + t) * len + j];
                    if gc == T::zero() {
                        continue;
                    }
                    let base = ci * g.in_vox;
                    cs.scatter(gc, &mut dx[base..base + g.in_vox]);
                    let dv = cs.gradient(&xd[base..base + g.in_vox]);
                    for a in 0..3 {
                        dloc[a] += gc * dv[a];
                    }
                }
                for a in 0..3 {
                    doff[(3 * t + a) * g.out_vox + p] += dloc[a];
                }
            }
        }
    }
    let bias = need_db.then(|| {
        let sums = gyd
            .chunks(g.out_vox)
            .map(|c| c.iter().copied().sum())
            .collect();
        Tensor::from_parts(vec![g.cout], sums)
    });
    Ok(DeformGrads {
        input: Tensor::from_parts(x.shape().to_vec(), dx),
        weight: Tensor::from_parts(w.shape().to_vec(), dw),
        offsets: Tensor::from_parts(offsets.shape().to_vec(), doff),
        bias,
    })
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation `y(p0) = Σ_n w(p_n)·x(p0 + p_n)` with zero padding.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let out = conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                spec: *spec,
            },
            &inputs,
        ))
    }

    /// Per-channel convolution; `spec.groups` must equal the channel count.
    pub fn depthwise_conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let channels = self.shape(input).first().copied().unwrap_or(0);
        if spec.groups != channels {
            return Err(Error::InvalidSpec(format!(
                "depthwise convolution needs groups == channels ({} != {channels})",
                spec.groups
            )));
        }
        self.conv3d(input, weight, bias, spec)
    }

    /// Deformable convolution: tap `n` at output `p0` samples
    /// `x(p0 + p_n + Δp_n)` trilinearly, with `Δp_n` read from `offsets`
    /// channels `3n..3n+3` at `p0`.
    pub fn deform_conv3d(
        &mut self,
        input: Var,
        weight: Var,
        offsets: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let out = deform_conv3d_forward(
            self.value(input),
            self.value(weight),
            self.value(offsets),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![input, weight, offsets];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::DeformConv3d {
                input,
                weight,
                offsets,
                bias,
                spec: *spec,
            },
            &inputs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let s = ConvSpec::cube(3, 2, 1);
        assert_eq!(s.output_dims([8, 7, 5]).unwrap(), [4, 4, 3]);
        assert!(ConvSpec::cube(5, 1, 0).output_dims([4, 4, 4]).is_err());
        assert!(ConvSpec::new([3, 3, 3], [0, 1, 1], [0; 3], 1).is_err());
    }

    #[test]
    fn ones_kernel_sums_full_support() {
        let x = Tensor::<f64>::ones(&[1, 3, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, None, &ConvSpec::same(3)).unwrap();
        assert_eq!(y.get(&[0, 1, 1, 1]), 27.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::<f64>::ones(&[3, 4, 4, 4]);
        let w = Tensor::<f64>::ones(&[2, 1, 1, 1, 1]);
        let err =
            conv3d_forward(&x, &w, None, &ConvSpec::cube(1, 1, 0).with_groups(2)).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f64>::ones(&[3, 4, 4, 4]);
        let w = Tensor::<f64>::ones(&[2, 2, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, None, &ConvSpec::same(3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn wrong_offset_channels_rejected() {
        let x = Tensor::<f64>::ones(&[2, 4, 4, 4]);
        let w = Tensor::<f64>::ones(&[2, 2, 3, 3, 3]);
        let off = Tensor::<f64>::zeros(&[80, 4, 4, 4]);
        let err = deform_conv3d_forward(&x, &w, &off, None, &ConvSpec::same(3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn depthwise_rejects_wrong_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 3, 3]));
        let w = tape.constant(Tensor::ones(&[2, 2, 3, 3, 3]));
        assert!(tape
            .depthwise_conv3d(x, w, None, &ConvSpec::same(3))
            .is_err());
    }
}
