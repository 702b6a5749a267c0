//! Volumetric kernels: 3D cross-correlation, average pooling and
//! nearest-neighbour upsampling, forward and backward.
//!
//! Stride-1 convolution runs on a zero-padded copy of the input laid out so
//! that every kernel tap becomes one long contiguous multiply-add over a
//! "wide" output buffer (rows carry `2·pad` junk columns that are dropped on
//! the way out). Other strides fall back to direct loops.

use crate::error::{Error, Result};

/// Output extent of one axis: `floor((size + 2·pad − kernel) / stride) + 1`.
pub fn conv3d_output_len(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [c_in, d, h, w] = input_shape[..] else {
            return Err(Error::dim(format!(
                "conv3d input must be C×D×H×W, got {input_shape:?}"
            )));
        };
        let [c_out, kc, kd, kh, kw] = kernel_shape[..] else {
            return Err(Error::dim(format!(
                "conv3d kernel must be Cout×Cin×kd×kh×kw, got {kernel_shape:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv3d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv3d stride must be at least 1"));
        }
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv3d_output_len(input[axis], kernel[axis], stride, pad).ok_or_else(
                || {
                    Error::dim(format!(
                        "conv3d kernel {kernel:?} larger than padded input {input:?} (pad {pad})"
                    ))
                },
            )?;
        }
        Ok(Conv3dSpec {
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn padded(&self) -> [usize; 3] {
        self.input.map(|s| s + 2 * self.pad)
    }

    /// Length of the wide output buffer that covers every valid output
    /// position in padded-row coordinates.
    fn wide_len(&self) -> usize {
        let [_, p1, p2] = self.padded();
        let [o0, o1, o2] = self.output;
        ((o0 - 1) * p1 + (o1 - 1)) * p2 + o2
    }

    fn tap_offset(&self, a: usize, b: usize, c: usize) -> usize {
        let [_, p1, p2] = self.padded();
        (a * p1 + b) * p2 + c
    }

    fn wide_index(&self, z: usize, y: usize, x: usize) -> usize {
        let [_, p1, p2] = self.padded();
        (z * p1 + y) * p2 + x
    }
}

fn pad_channels(spec: &Conv3dSpec, x: &[f64]) -> Vec<f64> {
    let [d, h, w] = spec.input;
    let [p0, p1, p2] = spec.padded();
    let p = spec.pad;
    let mut out = vec![0.0; spec.c_in * p0 * p1 * p2];
    for ci in 0..spec.c_in {
        for z in 0..d {
            for y in 0..h {
                let src = ((ci * d + z) * h + y) * w;
                let dst = ((ci * p0 + z + p) * p1 + y + p) * p2 + p;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += alpha * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn conv3d_forward(spec: &Conv3dSpec, x: &[f64], k: &[f64]) -> Vec<f64> {
    if spec.stride != 1 {
        return conv3d_forward_strided(spec, x, k);
    }
    let xp = pad_channels(spec, x);
    let plen: usize = spec.padded().iter().product();
    let wide = spec.wide_len();
    let taps = spec.taps();
    let [kd, kh, kw] = spec.kernel;
    let [o0, o1, o2] = spec.output;
    let mut out = vec![0.0; spec.c_out * spec.out_voxels()];
    let mut acc = vec![0.0; wide];
    for co in 0..spec.c_out {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..spec.c_in {
            let src = &xp[ci * plen..(ci + 1) * plen];
            let kbase = (co * spec.c_in + ci) * taps;
            let mut t = 0;
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let off = spec.tap_offset(a, b, c);
                        axpy(&mut acc, &src[off..off + wide], k[kbase + t]);
                        t += 1;
                    }
                }
            }
        }
        let dst = &mut out[co * o0 * o1 * o2..(co + 1) * o0 * o1 * o2];
        for z in 0..o0 {
            for y in 0..o1 {
                let wi = spec.wide_index(z, y, 0);
                let di = (z * o1 + y) * o2;
                dst[di..di + o2].copy_from_slice(&acc[wi..wi + o2]);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv3d_backward(
    spec: &Conv3dSpec,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    if spec.stride != 1 {
        return conv3d_backward_strided(spec, x, k, gout);
    }
    let xp = pad_channels(spec, x);
    let plen: usize = spec.padded().iter().product();
    let wide = spec.wide_len();
    let taps = spec.taps();
    let [kd, kh, kw] = spec.kernel;
    let [o0, o1, o2] = spec.output;
    let mut gxp = vec![0.0; xp.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gw = vec![0.0; wide];
    for co in 0..spec.c_out {
        gw.iter_mut().for_each(|v| *v = 0.0);
        let src = &gout[co * o0 * o1 * o2..(co + 1) * o0 * o1 * o2];
        for z in 0..o0 {
            for y in 0..o1 {
                let wi = spec.wide_index(z, y, 0);
                let si = (z * o1 + y) * o2;
                gw[wi..wi + o2].copy_from_slice(&src[si..si + o2]);
            }
        }
        for ci in 0..spec.c_in {
            let xs = &xp[ci * plen..(ci + 1) * plen];
            let gxs = &mut gxp[ci * plen..(ci + 1) * plen];
            let kbase = (co * spec.c_in + ci) * taps;
            let mut t = 0;
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let off = spec.tap_offset(a, b, c);
                        gk[kbase + t] += dot(&gw, &xs[off..off + wide]);
                        axpy(&mut gxs[off..off + wide], &gw, k[kbase + t]);
                        t += 1;
                    }
                }
            }
        }
    }
    let [d, h, w] = spec.input;
    let [p0, p1, p2] = spec.padded();
    let p = spec.pad;
    let mut gx = vec![0.0; x.len()];
    for ci in 0..spec.c_in {
        for z in 0..d {
            for y in 0..h {
                let dst = ((ci * d + z) * h + y) * w;
                let src = ((ci * p0 + z + p) * p1 + y + p) * p2 + p;
                gx[dst..dst + w].copy_from_slice(&gxp[src..src + w]);
            }
        }
    }
    (gx, gk)
}

/// Visits every (output index, input index, kernel index) triple of a
/// strided convolution, skipping taps that land in the zero padding.
fn for_each_tap(spec: &Conv3dSpec, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = spec.input;
    let [kd, kh, kw] = spec.kernel;
    let [o0, o1, o2] = spec.output;
    let (s, p) = (spec.stride as isize, spec.pad as isize);
    for co in 0..spec.c_out {
        for z in 0..o0 {
            for y in 0..o1 {
                for xo in 0..o2 {
                    let oi = ((co * o0 + z) * o1 + y) * o2 + xo;
                    for ci in 0..spec.c_in {
                        for a in 0..kd {
                            let iz = z as isize * s + a as isize - p;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for b in 0..kh {
                                let iy = y as isize * s + b as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for c in 0..kw {
                                    let ix = xo as isize * s + c as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let ii = ((ci * d + iz as usize) * h + iy as usize) * w
                                        + ix as usize;
                                    let ki = (((co * spec.c_in + ci) * kd + a) * kh + b) * kw + c;
                                    f(oi, ii, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_forward_strided(spec: &Conv3dSpec, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.c_out * spec.out_voxels()];
    for_each_tap(spec, |oi, ii, ki| out[oi] += x[ii] * k[ki]);
    out
}

fn conv3d_backward_strided(
    spec: &Conv3dSpec,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; spec.c_in * spec.in_voxels()];
    let mut gk = vec![0.0; k.len()];
    for_each_tap(spec, |oi, ii, ki| {
        gx[ii] += gout[oi] * k[ki];
        gk[ki] += gout[oi] * x[ii];
    });
    (gx, gk)
}

pub(crate) fn pool_dims(shape: &[usize], factor: usize) -> Result<(usize, [usize; 3], [usize; 3])> {
    let [c, d, h, w] = shape[..] else {
        return Err(Error::dim(format!(
            "pooling expects C×D×H×W, got {shape:?}"
        )));
    };
    if factor == 0 {
        return Err(Error::dim("pooling factor must be at least 1"));
    }
    let input = [d, h, w];
    if input.iter().any(|s| s % factor != 0) {
        return Err(Error::dim(format!(
            "spatial extent {input:?} not divisible by pooling factor {factor}"
        )));
    }
    Ok((c, input, input.map(|s| s / factor)))
}

/// Calls `f(fine_index, coarse_index)` for every fine voxel, where the
/// coarse voxel is the `factor³` block containing it.
fn for_each_block(c: usize, fine: [usize; 3], factor: usize, mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = fine;
    let coarse = fine.map(|s| s / factor);
    let mut fi = 0;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let row = ((ch * coarse[0] + z / factor) * coarse[1] + y / factor) * coarse[2];
                for x in 0..w {
                    f(fi, row + x / factor);
                    fi += 1;
                }
            }
        }
    }
}

/// Sums one axis at a time, so a block of 2×2×2 equal values adds up
/// exactly and pooling undoes nearest upsampling bit for bit.
pub(crate) fn avg_pool_forward(c: usize, fine: [usize; 3], factor: usize, x: &[f64]) -> Vec<f64> {
    let mut dims = [c, fine[0], fine[1], fine[2]];
    let mut cur = x.to_vec();
    for axis in (1..4).rev() {
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let (n, m) = (dims[axis], dims[axis] / factor);
        let mut next = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                let dst = &mut next[(o * m + j) * inner..(o * m + j + 1) * inner];
                for k in 0..factor {
                    let src = &cur[(o * n + j * factor + k) * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        dims[axis] = m;
        cur = next;
    }
    let scale = 1.0 / (factor * factor * factor) as f64;
    cur.iter_mut().for_each(|v| *v *= scale);
    cur
}

pub(crate) fn avg_pool_backward(c: usize, fine: [usize; 3], factor: usize, gout: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (factor * factor * factor) as f64;
    let mut gx = vec![0.0; c * fine.iter().product::<usize>()];
    for_each_block(c, fine, factor, |fi, ci| gx[fi] = gout[ci] * scale);
    gx
}

pub(crate) fn upsample_forward(c: usize, coarse: [usize; 3], factor: usize, x: &[f64]) -> Vec<f64> {
    let fine = coarse.map(|s| s * factor);
    let mut out = vec![0.0; c * fine.iter().product::<usize>()];
    for_each_block(c, fine, factor, |fi, ci| out[fi] = x[ci]);
    out
}

pub(crate) fn upsample_backward(c: usize, coarse: [usize; 3], factor: usize, gout: &[f64]) -> Vec<f64> {
    let fine = coarse.map(|s| s * factor);
    let mut gx = vec![0.0; c * coarse.iter().product::<usize>()];
    for_each_block(c, fine, factor, |fi, ci| gx[ci] += gout[fi]);
    gx
}
