use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::split_axis;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    fn tag(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Reduces over `axis` (or every element when `None`).
    ///
    /// A full reduction yields a rank-0 tensor. With `keepdim` the reduced
    /// axis stays as extent 1.
    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>, keepdim: bool) -> Result<Tensor<T>> {
        let tag = op.tag();
        let (outer, len, inner, out_shape) = match axis {
            None => {
                if self.numel() == 0 {
                    return Err(TensorError::Domain { op: tag, detail: "empty tensor".into() });
                }
                let shape = if keepdim { vec![1; self.rank()] } else { vec![] };
                (1, self.numel(), 1, shape)
            }
            Some(ax) => {
                if ax >= self.rank() {
                    return Err(TensorError::InvalidAxis { op: tag, axis: ax, rank: self.rank() });
                }
                let (o, l, i) = split_axis(self.shape(), ax);
                let mut shape = self.shape().to_vec();
                if keepdim {
                    shape[ax] = 1;
                } else {
                    shape.remove(ax);
                }
                (o, l, i, shape)
            }
        };
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = if op == ReduceOp::Max { vec![0usize; outer * inner] } else { Vec::new() };
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = T::zero();
                        for j in 0..len {
                            acc += x[base + j * inner];
                        }
                        out[idx] = if op == ReduceOp::Mean { acc / T::of(len as f64) } else { acc };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if x[base + j * inner] > x[base + best * inner] {
                                best = j;
                            }
                        }
                        argmax[idx] = base + best * inner;
                        out[idx] = x[base + best * inner];
                    }
                }
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op(tag, out, out_shape, &[self], move |_, _, g| {
            let mut dx = vec![T::zero(); n];
            match op {
                ReduceOp::Max => {
                    for (&pos, &gv) in argmax.iter().zip(g) {
                        dx[pos] += gv;
                    }
                }
                ReduceOp::Sum | ReduceOp::Mean => {
                    let k = if op == ReduceOp::Mean { T::one() / T::of(len as f64) } else { T::one() };
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] * k;
                            let base = o * len * inner + i;
                            for j in 0..len {
                                dx[base + j * inner] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        self.reduce(ReduceOp::Sum, None, false).expect("sum of non-empty tensor")
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, Some(axis), keepdim)
    }

    pub fn mean(&self) -> Tensor<T> {
        self.reduce(ReduceOp::Mean, None, false).expect("mean of non-empty tensor")
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, Some(axis), keepdim)
    }

    pub fn max(&self) -> Tensor<T> {
        self.reduce(ReduceOp::Max, None, false).expect("max of non-empty tensor")
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Max, Some(axis), keepdim)
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(x, &[x.len()]).unwrap()
    }

    #[test]
    fn basic_reductions() {
        assert_eq!(v(&[1.0, 2.0, 3.0]).sum().item().unwrap(), 6.0);
        assert_eq!(Tensor::<f64>::full(&[2, 3], 4.5).mean().item().unwrap(), 4.5);
        assert_eq!(v(&[3.0, -1.0, 7.0]).max().item().unwrap(), 7.0);
    }

    #[test]
    fn axis_shapes() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(x.sum_axis(1, false).unwrap().shape(), &[2, 4]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1, 4]);
        assert_eq!(x.sum_axis(0, false).unwrap().data()[0], 12.0);
        assert!(x.max_axis(3, false).is_err());
    }

    #[test]
    fn max_gradient_routes_to_argmax() {
        let x = v(&[3.0, -1.0, 7.0]).requires_grad();
        x.max().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_axis_gradient_broadcasts() {
        let x = Tensor::<f64>::zeros(&[2, 4]).requires_grad();
        x.mean_axis(1, false).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 8]);
    }
}
