//! Direct 3-D convolution and its non-overlapping transpose.
//!
//! Volumes are channels-first `C × H × W × D` without a batch axis.
//! Convolution weights are `C_out × C_in × k1 × k2 × k3`; transposed
//! convolution weights are `C_in × C_out × k1 × k2 × k3`, so one weight
//! tensor serves a convolution and its adjoint.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{axpy, dot};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with `k/2` padding (shape-preserving for odd kernels).
    pub fn same(kernel: [usize; 3]) -> Self {
        Self { stride: [1; 3], padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    /// Kernel equal to stride, no padding.
    pub fn non_overlapping(kernel: [usize; 3]) -> Self {
        Self { stride: kernel, padding: [0; 3] }
    }

    /// Output extents of a convolution over `input` with `kernel`.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let (len, k, s, p) = (input[axis], kernel[axis], self.stride[axis], self.padding[axis]);
            if k == 0 || s == 0 {
                return Err(TensorError::ConvExtent {
                    op: "conv3d",
                    axis,
                    detail: format!("kernel {k} / stride {s} must be positive"),
                });
            }
            let span = len + 2 * p;
            if span < k || (span - k) % s != 0 {
                return Err(TensorError::ConvExtent {
                    op: "conv3d",
                    axis,
                    detail: format!("({len} + 2·{p} − {k}) / {s} + 1"),
                });
            }
            out[axis] = (span - k) / s + 1;
        }
        Ok(out)
    }
}

/// Output positions `o` in `[lo, hi)` whose input `o·s + k_off − pad` lies in `[0, in_len)`.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    geo: ConvGeometry,
}

impl ConvDims {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (kernel offset, output row, input row, z-range) run
    /// touched by input channel slab `x` and output channel slab `y`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, (usize, usize), usize)) {
        let [_, w_in, d_in] = self.input;
        let [h_out, w_out, d_out] = self.out;
        let [k1, k2, k3] = self.kernel;
        let [s1, s2, s3] = self.geo.stride;
        let [p1, p2, p3] = self.geo.padding;
        for a in 0..k1 {
            let (x_lo, x_hi) = valid_range(a, p1, s1, self.input[0], h_out);
            for b in 0..k2 {
                let (y_lo, y_hi) = valid_range(b, p2, s2, w_in, w_out);
                for c in 0..k3 {
                    let (z_lo, z_hi) = valid_range(c, p3, s3, d_in, d_out);
                    if z_lo >= z_hi {
                        continue;
                    }
                    let kidx = (a * k2 + b) * k3 + c;
                    let iz0 = z_lo * s3 + c - p3;
                    for ox in x_lo..x_hi {
                        let ix = ox * s1 + a - p1;
                        for oy in y_lo..y_hi {
                            let iy = oy * s2 + b - p2;
                            let out_off = (ox * w_out + oy) * d_out;
                            let in_off = (ix * w_in + iy) * d_in;
                            f(kidx, out_off, in_off, (z_lo, z_hi), iz0);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(d: &ConvDims, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (d.in_vol(), d.out_vol(), d.k_vol());
    let s3 = d.geo.stride[2];
    let mut out = vec![T::zero(); d.co * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(co, y)| {
        if let Some(b) = bias {
            y.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..d.ci {
            let xc = &x[ci * in_vol..(ci + 1) * in_vol];
            let wk = &w[(co * d.ci + ci) * k_vol..(co * d.ci + ci + 1) * k_vol];
            d.for_each_run(|kidx, out_off, in_off, (z_lo, z_hi), iz0| {
                let wv = wk[kidx];
                if wv == T::zero() {
                    return;
                }
                let len = z_hi - z_lo;
                let dst = &mut y[out_off + z_lo..out_off + z_hi];
                if s3 == 1 {
                    axpy(wv, &xc[in_off + iz0..in_off + iz0 + len], dst);
                } else {
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v += wv * xc[in_off + iz0 + j * s3];
                    }
                }
            });
        }
    });
    out
}

fn conv_backward_input<T: Element>(d: &ConvDims, w: &[T], dy: &[T]) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (d.in_vol(), d.out_vol(), d.k_vol());
    let s3 = d.geo.stride[2];
    let mut dx = vec![T::zero(); d.ci * in_vol];
    dx.par_chunks_mut(in_vol).enumerate().for_each(|(ci, dxc)| {
        for co in 0..d.co {
            let dyc = &dy[co * out_vol..(co + 1) * out_vol];
            let wk = &w[(co * d.ci + ci) * k_vol..(co * d.ci + ci + 1) * k_vol];
            d.for_each_run(|kidx, out_off, in_off, (z_lo, z_hi), iz0| {
                let wv = wk[kidx];
                if wv == T::zero() {
                    return;
                }
                let len = z_hi - z_lo;
                let src = &dyc[out_off + z_lo..out_off + z_hi];
                if s3 == 1 {
                    axpy(wv, src, &mut dxc[in_off + iz0..in_off + iz0 + len]);
                } else {
                    for (j, &g) in src.iter().enumerate() {
                        dxc[in_off + iz0 + j * s3] += wv * g;
                    }
                }
            });
        }
    });
    dx
}

fn conv_backward_weight<T: Element>(d: &ConvDims, x: &[T], dy: &[T]) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (d.in_vol(), d.out_vol(), d.k_vol());
    let s3 = d.geo.stride[2];
    let mut dw = vec![T::zero(); d.co * d.ci * k_vol];
    dw.par_chunks_mut(d.ci * k_vol).enumerate().for_each(|(co, dwc)| {
        let dyc = &dy[co * out_vol..(co + 1) * out_vol];
        for ci in 0..d.ci {
            let xc = &x[ci * in_vol..(ci + 1) * in_vol];
            let acc = &mut dwc[ci * k_vol..(ci + 1) * k_vol];
            d.for_each_run(|kidx, out_off, in_off, (z_lo, z_hi), iz0| {
                let len = z_hi - z_lo;
                let g = &dyc[out_off + z_lo..out_off + z_hi];
                acc[kidx] += if s3 == 1 {
                    dot(g, &xc[in_off + iz0..in_off + iz0 + len])
                } else {
                    g.iter().enumerate().map(|(j, &gv)| gv * xc[in_off + iz0 + j * s3]).sum()
                };
            });
        }
    });
    dw
}

fn channel_sums<T: Element>(dy: &[T], vol: usize) -> Vec<T> {
    dy.chunks_exact(vol).map(|c| c.iter().copied().sum()).collect()
}

fn volume_dims<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    match *x.shape() {
        [c, h, w, d] => Ok((c, [h, w, d])),
        _ => Err(TensorError::ShapeMismatch { op, left: x.shape().to_vec(), right: vec![0, 0, 0, 0] }),
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => {
            Err(TensorError::ShapeMismatch { op, left: vec![channels], right: b.shape().to_vec() })
        }
        _ => Ok(()),
    }
}

impl<T: Element> Tensor<T> {
    /// 3-D cross-correlation of a `C_in × H × W × D` volume.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geo: ConvGeometry) -> Result<Tensor<T>> {
        let (ci, input) = volume_dims("conv3d", self)?;
        let (co, kernel) = match *weight.shape() {
            [co, wci, k1, k2, k3] if wci == ci => (co, [k1, k2, k3]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    left: self.shape().to_vec(),
                    right: weight.shape().to_vec(),
                })
            }
        };
        check_bias("conv3d", bias, co)?;
        let out = geo.output_extents(input, kernel)?;
        let dims = ConvDims { ci, co, input, kernel, out, geo };
        let data = conv_forward(&dims, self.data(), weight.data(), bias.map(|b| b.data()));
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("conv3d", data, vec![co, out[0], out[1], out[2]], &inputs, move |ins, _, g| {
            let dx = ins[0].tracks_grad().then(|| conv_backward_input(&dims, ins[1].data(), g));
            let dw = ins[1].tracks_grad().then(|| conv_backward_weight(&dims, ins[0].data(), g));
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(channel_sums(g, dims.out_vol())));
            }
            grads
        }))
    }

    /// Transposed convolution with kernel equal to stride (non-overlapping
    /// upsampling): each input voxel expands into one `k1 × k2 × k3` block.
    ///
    /// Weight layout is `C_in × C_out × k1 × k2 × k3`; this is the exact
    /// adjoint of [`Tensor::conv3d`] with the same weight tensor and
    /// [`ConvGeometry::non_overlapping`].
    pub fn deconv3d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Result<Tensor<T>> {
        if kernel != stride || kernel.contains(&0) {
            return Err(TensorError::Unsupported {
                op: "deconv3d",
                detail: format!("kernel {kernel:?} with stride {stride:?}; only kernel == stride is supported"),
            });
        }
        let (ci, input) = volume_dims("deconv3d", self)?;
        let co = match *weight.shape() {
            [wci, co, k1, k2, k3] if wci == ci && [k1, k2, k3] == kernel => co,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "deconv3d",
                    left: self.shape().to_vec(),
                    right: weight.shape().to_vec(),
                })
            }
        };
        check_bias("deconv3d", bias, co)?;
        let out = [input[0] * kernel[0], input[1] * kernel[1], input[2] * kernel[2]];
        let dims =
            ConvDims { ci: co, co: ci, input: out, kernel, out: input, geo: ConvGeometry::non_overlapping(kernel) };
        let data = deconv_forward(&dims, self.data(), weight.data(), bias.map(|b| b.data()));
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("deconv3d", data, vec![co, out[0], out[1], out[2]], &inputs, move |ins, _, g| {
            // The adjoint of a transposed convolution is the convolution.
            let dx = ins[0].tracks_grad().then(|| conv_forward(&dims, g, ins[1].data(), None));
            let dw = ins[1].tracks_grad().then(|| conv_backward_weight_t(&dims, ins[0].data(), g));
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(channel_sums(g, dims.in_vol())));
            }
            grads
        }))
    }
}

/// Forward transposed convolution. `d` describes the *matching convolution*
/// (from the upsampled volume back to the coarse one), so `d.co` is this
/// op's input channel count and `d.ci` its output channel count.
fn deconv_forward<T: Element>(d: &ConvDims, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (fine_vol, coarse_vol, k_vol) = (d.in_vol(), d.out_vol(), d.k_vol());
    let mut out = vec![T::zero(); d.ci * fine_vol];
    out.par_chunks_mut(fine_vol).enumerate().for_each(|(c_out, y)| {
        if let Some(b) = bias {
            y.iter_mut().for_each(|v| *v = b[c_out]);
        }
        for c_in in 0..d.co {
            let xc = &x[c_in * coarse_vol..(c_in + 1) * coarse_vol];
            let wk = &w[(c_in * d.ci + c_out) * k_vol..(c_in * d.ci + c_out + 1) * k_vol];
            scatter_blocks(d, xc, wk, y);
        }
    });
    out
}

fn scatter_blocks<T: Element>(d: &ConvDims, coarse: &[T], wk: &[T], fine: &mut [T]) {
    let [h, w, dd] = d.out;
    let [_, fw, fd] = d.input;
    let [k1, k2, k3] = d.kernel;
    for a in 0..k1 {
        for b in 0..k2 {
            for c in 0..k3 {
                let wv = wk[(a * k2 + b) * k3 + c];
                if wv == T::zero() {
                    continue;
                }
                for ix in 0..h {
                    for iy in 0..w {
                        let src = &coarse[(ix * w + iy) * dd..(ix * w + iy + 1) * dd];
                        let base = ((ix * k1 + a) * fw + iy * k2 + b) * fd + c;
                        for (iz, &v) in src.iter().enumerate() {
                            fine[base + iz * k3] += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of the transposed convolution (`C_in × C_out × k` layout).
fn conv_backward_weight_t<T: Element>(d: &ConvDims, x: &[T], dy: &[T]) -> Vec<T> {
    // Same contraction as the convolution weight gradient with the roles of
    // the fine (dy) and coarse (x) volumes matching `d`.
    conv_backward_weight(d, dy, x)
}
