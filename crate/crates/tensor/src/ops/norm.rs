use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// Layer normalization over the last axis with per-channel affine.
    ///
    /// Uses the population variance (divide by the channel count).
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().ok_or(TensorError::InvalidAxis { op: "layernorm", axis: 0, rank: 0 })?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(eps > 0.0) {
            return Err(TensorError::Domain { op: "layernorm", detail: format!("eps = {eps}") });
        }
        let rows = self.numel() / c;
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(eps);
        let (g, b) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        for (r, row) in self.data().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op("layernorm", out, self.shape().to_vec(), &[self, gamma, beta], move |ins, _, dy| {
            let g = ins[1].data();
            let mut dx = vec![T::zero(); rows * c];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dh = vec![T::zero(); c];
            for r in 0..rows {
                let xh = &xhat[r * c..(r + 1) * c];
                let dyr = &dy[r * c..(r + 1) * c];
                let mut mean_dh = T::zero();
                let mut mean_dh_xh = T::zero();
                for j in 0..c {
                    dgamma[j] += dyr[j] * xh[j];
                    dbeta[j] += dyr[j];
                    dh[j] = dyr[j] * g[j];
                    mean_dh += dh[j];
                    mean_dh_xh += dh[j] * xh[j];
                }
                mean_dh *= inv_c;
                mean_dh_xh *= inv_c;
                for j in 0..c {
                    dx[r * c + j] = rstd[r] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }))
    }
}
