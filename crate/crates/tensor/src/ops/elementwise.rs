use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = zip_map(self.data(), other.data(), |x, y| x + y);
        Ok(Tensor::from_op("add", data, self.shape().to_vec(), &[self, other], |_, _, g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = zip_map(self.data(), other.data(), |x, y| x - y);
        Ok(Tensor::from_op("sub", data, self.shape().to_vec(), &[self, other], |_, _, g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = zip_map(self.data(), other.data(), |x, y| x * y);
        Ok(Tensor::from_op("mul", data, self.shape().to_vec(), &[self, other], |ins, _, g| {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![Some(zip_map(g, b, |g, y| g * y)), Some(zip_map(g, a, |g, x| g * x))]
        }))
    }

    /// Elementwise quotient; the divisor must be nonzero everywhere.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self, other)?;
        if other.data().iter().any(|v| v.is_zero()) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        let data = zip_map(self.data(), other.data(), |x, y| x / y);
        Ok(Tensor::from_op("div", data, self.shape().to_vec(), &[self, other], |ins, out, g| {
            let b = ins[1].data();
            let ga = zip_map(g, b, |g, y| g / y);
            let gb = g.iter().zip(out).zip(b).map(|((&g, &q), &y)| -g * q / y).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let k = T::of(factor);
        let data = self.data().iter().map(|&x| x * k).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), &[self], move |_, _, g| {
            vec![Some(g.iter().map(|&v| v * k).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), &[self], |_, _, g| vec![Some(g.to_vec())])
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::of(slope);
        let data = self.data().iter().map(|&x| if x > T::zero() { x } else { x * s }).collect();
        Tensor::from_op("leaky_relu", data, self.shape().to_vec(), &[self], move |ins, _, g| {
            let x = ins[0].data();
            vec![Some(zip_map(g, x, |g, x| if x > T::zero() { g } else { g * s }))]
        })
    }

    /// Natural logarithm; every entry must be strictly positive.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN is rejected too
    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(bad) = self.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(TensorError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Ok(Tensor::from_op("log", data, self.shape().to_vec(), &[self], |ins, _, g| {
            vec![Some(zip_map(g, ins[0].data(), |g, x| g / x))]
        }))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op("exp", data, self.shape().to_vec(), &[self], |_, out, g| {
            vec![Some(zip_map(g, out, |g, y| g * y))]
        })
    }
}
