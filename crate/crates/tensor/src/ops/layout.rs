use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::split_axis;
use crate::tensor::{numel_of, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `order`.
fn permute_data<T: Element>(src: &[T], shape: &[usize], order: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // Odometer over the output index; the innermost axis is walked as a run.
    let last = rank - 1;
    let (run_len, run_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        if run_stride == 1 {
            out.extend_from_slice(&src[offset..offset + run_len]);
        } else {
            out.extend((0..run_len).map(|j| src[offset + j * run_stride]));
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Element> Tensor<T> {
    /// Reinterprets the data under a new shape with the same element count.
    /// Storage is shared, not copied.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ElementCount {
                from: self.shape().to_vec(),
                from_len: self.numel(),
                to: shape.to_vec(),
                to_len: numel_of(shape),
            });
        }
        Ok(Tensor::from_op_shared("reshape", Arc::clone(self.storage()), shape.to_vec(), &[self], |_, _, g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = order.len() == rank && order.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidPermutation { order: order.to_vec(), rank });
        }
        let data = permute_data(self.data(), self.shape(), order);
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape()[a]).collect();
        let inv = inverse_order(order);
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op("permute", data, out_shape, &[self], move |_, _, g| {
            vec![Some(permute_data(g, &grad_shape, &inv))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { op: "transpose", axis: 1, rank: r });
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.swap(r - 2, r - 1);
        self.permute(&order)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis { op: "narrow", axis, rank: self.rank() });
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        if start + len > full || len == 0 {
            return Err(TensorError::Domain {
                op: "narrow",
                detail: format!("range {start}..{} outside extent {full}", start + len),
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op("narrow", out, shape, &[self], move |_, _, g| {
            let mut dx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| TensorError::Domain { op: "concat", detail: "no inputs".into() })?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: first.rank() });
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::from_op("concat", out, shape, &refs, move |_, _, g| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Adds a vector along `axis`, broadcast over all other axes
    /// (bias add for channels-first volumes or channels-last token rows).
    pub fn add_bias(&self, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis { op: "add_bias", axis, rank: self.rank() });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if bias.numel() != len {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let x = self.data();
        let b = bias.data();
        let mut out = x.to_vec();
        for o in 0..outer {
            for (j, &bj) in b.iter().enumerate() {
                let base = (o * len + j) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        Ok(Tensor::from_op("add_bias", out, self.shape().to_vec(), &[self, bias], move |_, _, g| {
            let mut gb = vec![T::zero(); len];
            for o in 0..outer {
                for (j, acc) in gb.iter_mut().enumerate() {
                    let base = (o * len + j) * inner;
                    *acc += g[base..base + inner].iter().copied().sum::<T>();
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use crate::{Tensor, TensorError};

    #[test]
    fn reshape_round_trip() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        let y = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(x.data(), y.data());
        assert!(matches!(x.reshape(&[4, 2]), Err(TensorError::ElementCount { .. })));
    }

    #[test]
    fn permute_round_trip_channels() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let y = x.permute(&[3, 0, 1, 2]).unwrap();
        assert_eq!(y.shape(), &[5, 2, 3, 4]);
        let z = y.permute(&[1, 2, 3, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn permute_index_arithmetic() {
        // out[c][a][b] = in[a][b][c] on a 2×3×4 tensor
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    let direct = x.data()[a * 12 + b * 4 + c];
                    assert_eq!(y.data()[c * 6 + a * 3 + b], direct);
                }
            }
        }
    }

    #[test]
    fn permute_rejects_bad_order() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
        assert!(x.permute(&[0, 2]).is_err());
    }

    #[test]
    fn narrow_concat_inverse() {
        let x = Tensor::from_fn(&[3, 8], |i| i as f64);
        let parts: Vec<_> = (0..4).map(|h| x.narrow(1, h * 2, 2).unwrap()).collect();
        let y = Tensor::concat(&parts, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn add_bias_channels_first() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::from_slice(&[1.0, 2.0], &[2]).unwrap();
        assert_eq!(x.add_bias(&b, 0).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let b3 = Tensor::from_slice(&[1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(x.add_bias(&b3, 1).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn permute_inverse_is_identity(dims in proptest::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
            let x = Tensor::from_fn(&dims, |i| ((i as u64 * 2654435761) ^ seed) as f64);
            let rank = dims.len();
            let mut order: Vec<usize> = (0..rank).collect();
            order.rotate_left((seed as usize) % rank);
            if rank > 2 { order.swap(0, rank - 1); }
            let mut inv = vec![0; rank];
            for (i, &a) in order.iter().enumerate() { inv[a] = i; }
            let y = x.permute(&order).unwrap().permute(&inv).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert_eq!(y.data(), x.data());
        }
    }
}
