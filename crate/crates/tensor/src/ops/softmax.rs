use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::split_axis;
use crate::tensor::Tensor;

fn check_axis<T: Element>(op: &'static str, x: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(TensorError::InvalidAxis { op, axis, rank: x.rank() });
    }
    Ok(())
}

/// Applies `f` to every lane along `axis`: `f(lane_in, lane_out)` with lanes
/// gathered contiguously.
fn for_each_lane<T: Element>(
    shape: &[usize],
    axis: usize,
    input: &[T],
    output: &mut [T],
    mut f: impl FnMut(&[T], &mut [T]),
) {
    let (outer, len, inner) = split_axis(shape, axis);
    if inner == 1 {
        for (src, dst) in input.chunks_exact(len).zip(output.chunks_exact_mut(len)) {
            f(src, dst);
        }
        return;
    }
    let mut lane_in = vec![T::zero(); len];
    let mut lane_out = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lane_in[j] = input[base + j * inner];
            }
            f(&lane_in, &mut lane_out);
            for j in 0..len {
                output[base + j * inner] = lane_out[j];
            }
        }
    }
}

fn softmax_lane<T: Element>(x: &[T], y: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = (xi - max).exp();
        total += *yi;
    }
    let inv = T::one() / total;
    y.iter_mut().for_each(|v| *v *= inv);
}

fn log_softmax_lane<T: Element>(x: &[T], y: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = x.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + total.ln();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi - log_z;
    }
}

/// Two-input variant of [`for_each_lane`] used by the backward rules:
/// `f(forward_lane, grad_lane, out_lane)`.
fn for_each_lane2<T: Element>(
    shape: &[usize],
    axis: usize,
    fwd: &[T],
    grad: &[T],
    output: &mut [T],
    mut f: impl FnMut(&[T], &[T], &mut [T]),
) {
    let (outer, len, inner) = split_axis(shape, axis);
    if inner == 1 {
        for ((a, b), dst) in fwd.chunks_exact(len).zip(grad.chunks_exact(len)).zip(output.chunks_exact_mut(len)) {
            f(a, b, dst);
        }
        return;
    }
    let mut la = vec![T::zero(); len];
    let mut lb = vec![T::zero(); len];
    let mut lo = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                la[j] = fwd[base + j * inner];
                lb[j] = grad[base + j * inner];
            }
            f(&la, &lb, &mut lo);
            for j in 0..len {
                output[base + j * inner] = lo[j];
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self, axis)?;
        let shape = self.shape().to_vec();
        let mut out = vec![T::zero(); self.numel()];
        for_each_lane(&shape, axis, self.data(), &mut out, softmax_lane);
        Ok(Tensor::from_op("softmax", out, shape.clone(), &[self], move |_, s, g| {
            // dx = s ⊙ (g − Σ g⊙s)
            let mut dx = vec![T::zero(); s.len()];
            for_each_lane2(&shape, axis, s, g, &mut dx, |s, g, out| {
                let dot: T = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for ((o, &si), &gi) in out.iter_mut().zip(s).zip(g) {
                    *o = si * (gi - dot);
                }
            });
            vec![Some(dx)]
        }))
    }

    /// Logarithm of the softmax along `axis`, computed without forming the
    /// probabilities first.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("log_softmax", self, axis)?;
        let shape = self.shape().to_vec();
        let mut out = vec![T::zero(); self.numel()];
        for_each_lane(&shape, axis, self.data(), &mut out, log_softmax_lane);
        Ok(Tensor::from_op("log_softmax", out, shape.clone(), &[self], move |_, y, g| {
            // dx = g − softmax · Σ g
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane2(&shape, axis, y, g, &mut dx, |y, g, out| {
                let total: T = g.iter().copied().sum();
                for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
                    *o = gi - yi.exp() * total;
                }
            });
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tensor, TensorError};

    #[test]
    fn constant_vector_is_uniform() {
        let s = Tensor::<f64>::full(&[5], 3.0).softmax(0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_element_is_one() {
        let s = Tensor::from_slice(&[-42.0f64], &[1]).unwrap().softmax(0).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn ln2_pair() {
        let s = Tensor::from_slice(&[0.0f64, 2f64.ln()], &[2]).unwrap().softmax(0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_axis_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(x.softmax(2), Err(TensorError::InvalidAxis { .. })));
        assert!(x.log_softmax(5).is_err());
    }

    #[test]
    fn non_last_axis_sums_to_one() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| ((i * 37) % 11) as f64 * 0.3);
        let s = x.softmax(1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let total: f64 = (0..4).map(|j| s.data()[o * 8 + j * 2 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let s = Tensor::from_slice(&[1000.0f32, 0.0], &[2]).unwrap().softmax(0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let l = Tensor::from_slice(&[1000.0f32, 0.0], &[2]).unwrap().log_softmax(0).unwrap();
        assert!(l.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::from_fn(&[2, 5], |i| (i as f64 * 0.7).sin() * 3.0);
        let a = x.log_softmax(1).unwrap();
        let b = x.softmax(1).unwrap().log().unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
