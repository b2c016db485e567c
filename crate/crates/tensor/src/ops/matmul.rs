use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{gemm, transpose};
use crate::tensor::Tensor;

struct MatDims {
    batch_a: usize,
    batch_b: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    batched: bool,
}

fn dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatDims> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", left: a.shape().to_vec(), right: b.shape().to_vec() };
    let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
        match *s {
            [r, c] => Some((1, r, c)),
            [bt, r, c] => Some((bt, r, c)),
            _ => None,
        }
    };
    let (batch_a, m, k) = split(a.shape()).ok_or_else(mismatch)?;
    let (batch_b, k2, n) = split(b.shape()).ok_or_else(mismatch)?;
    if k != k2 || (batch_a != batch_b && batch_a != 1 && batch_b != 1) {
        return Err(mismatch());
    }
    Ok(MatDims { batch_a, batch_b, batch: batch_a.max(batch_b), m, k, n, batched: a.rank() == 3 || b.rank() == 3 })
}

impl<T: Element> Tensor<T> {
    /// Matrix product of rank-2 or batched rank-3 operands.
    ///
    /// Batch extents must be equal or 1 (broadcast). The result is rank 3
    /// whenever either operand is.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let d = dims(self, other)?;
        let (m, k, n) = (d.m, d.k, d.n);
        let mut out = vec![T::zero(); d.batch * m * n];
        let (a, b) = (self.data(), other.data());
        for bi in 0..d.batch {
            let ab = if d.batch_a == 1 { 0 } else { bi };
            let bb = if d.batch_b == 1 { 0 } else { bi };
            gemm(
                m,
                k,
                n,
                &a[ab * m * k..(ab + 1) * m * k],
                &b[bb * k * n..(bb + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if d.batched { vec![d.batch, m, n] } else { vec![m, n] };
        let (batch, batch_a, batch_b) = (d.batch, d.batch_a, d.batch_b);
        Ok(Tensor::from_op("matmul", out, shape, &[self, other], move |ins, _, g| {
            let (a, b) = (ins[0].data(), ins[1].data());
            let mut ga = ins[0].tracks_grad().then(|| vec![T::zero(); batch_a * m * k]);
            let mut gb = ins[1].tracks_grad().then(|| vec![T::zero(); batch_b * k * n]);
            for bi in 0..batch {
                let ab = if batch_a == 1 { 0 } else { bi };
                let bb = if batch_b == 1 { 0 } else { bi };
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    let bt = transpose(k, n, &b[bb * k * n..(bb + 1) * k * n]);
                    gemm(m, n, k, gc, &bt, &mut ga[ab * m * k..(ab + 1) * m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC
                    let at = transpose(m, k, &a[ab * m * k..(ab + 1) * m * k]);
                    gemm(k, m, n, &at, gc, &mut gb[bb * k * n..(bb + 1) * k * n]);
                }
            }
            vec![ga, gb]
        }))
    }
}
