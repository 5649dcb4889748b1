//! Differentiable tensor operations.
//!
//! Forward paths call into [`super::kernels`]; backward closures also work on
//! raw slices through the kernels and never record new graph nodes. All
//! kernels accumulate into zero-initialized buffers.

use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{GsError, Result};

impl Tensor {
    /// Reinterpret the (row-major, contiguous) buffer under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(GsError::Dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        let out = self.to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(|parents, grad, _out| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(grad);
                }
            }),
        ))
    }

    /// Elementwise addition with trailing-aligned broadcasting.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, rhs, |a, b| a + b, BinaryKind::Add)
    }

    /// Elementwise (Hadamard) product with trailing-aligned broadcasting.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast(self, rhs, |a, b| a * b, BinaryKind::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|parents, grad, _out| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(grad);
                }
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |parents, grad, _out| {
                if parents[0].requires_grad() {
                    let g: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    parents[0].accumulate_grad(&g);
                }
            }),
        )
    }

    /// C[M,N] = self[M,K] · rhs[K,N]
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GsError::Dim(format!(
                "matmul expects [M,K]x[K,N], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.data(), &rhs.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |parents, grad, _out| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(grad, &b.data(), m, n, k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(&a.data(), grad, m, k, n, &mut db);
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Batched matmul: self[N,A,B] · rhs[N,B,C] -> [N,A,C]
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(GsError::Dim(format!(
                "bmm expects [N,A,B]x[N,B,C], got {sa:?} x {sb:?}"
            )));
        }
        let (nb, a_, b_, c_) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * a_ * c_];
        {
            let (ad, bd) = (self.data(), rhs.data());
            for i in 0..nb {
                kernels::matmul_nn(
                    &ad[i * a_ * b_..(i + 1) * a_ * b_],
                    &bd[i * b_ * c_..(i + 1) * b_ * c_],
                    a_,
                    b_,
                    c_,
                    &mut out[i * a_ * c_..(i + 1) * a_ * c_],
                );
            }
        }
        Ok(Tensor::from_op(
            vec![nb, a_, c_],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |parents, grad, _out| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut da = vec![0.0; nb * a_ * b_];
                    for i in 0..nb {
                        kernels::matmul_nt(
                            &grad[i * a_ * c_..(i + 1) * a_ * c_],
                            &bd[i * b_ * c_..(i + 1) * b_ * c_],
                            a_,
                            c_,
                            b_,
                            &mut da[i * a_ * b_..(i + 1) * a_ * b_],
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut db = vec![0.0; nb * b_ * c_];
                    for i in 0..nb {
                        kernels::matmul_tn(
                            &ad[i * a_ * b_..(i + 1) * a_ * b_],
                            &grad[i * a_ * c_..(i + 1) * a_ * c_],
                            a_,
                            b_,
                            c_,
                            &mut db[i * b_ * c_..(i + 1) * b_ * c_],
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Batched matmul against a transposed right operand:
    /// self[N,A,D] · rhs[N,C,D]ᵀ -> [N,A,C]. This is the q·kᵀ pattern.
    pub fn bmm_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(GsError::Dim(format!(
                "bmm_nt expects [N,A,D]x[N,C,D], got {sa:?} x {sb:?}"
            )));
        }
        let (nb, a_, d_, c_) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; nb * a_ * c_];
        {
            let (ad, bd) = (self.data(), rhs.data());
            for i in 0..nb {
                kernels::matmul_nt(
                    &ad[i * a_ * d_..(i + 1) * a_ * d_],
                    &bd[i * c_ * d_..(i + 1) * c_ * d_],
                    a_,
                    d_,
                    c_,
                    &mut out[i * a_ * c_..(i + 1) * a_ * c_],
                );
            }
        }
        Ok(Tensor::from_op(
            vec![nb, a_, c_],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |parents, grad, _out| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut da = vec![0.0; nb * a_ * d_];
                    for i in 0..nb {
                        kernels::matmul_nn(
                            &grad[i * a_ * c_..(i + 1) * a_ * c_],
                            &bd[i * c_ * d_..(i + 1) * c_ * d_],
                            a_,
                            c_,
                            d_,
                            &mut da[i * a_ * d_..(i + 1) * a_ * d_],
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut db = vec![0.0; nb * c_ * d_];
                    for i in 0..nb {
                        kernels::matmul_tn(
                            &grad[i * a_ * c_..(i + 1) * a_ * c_],
                            &ad[i * a_ * d_..(i + 1) * a_ * d_],
                            a_,
                            c_,
                            d_,
                            &mut db[i * c_ * d_..(i + 1) * c_ * d_],
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// 2D cross-correlation with zero padding (no kernel flip).
    /// self[B,Cin,H,W], kernel[Cout,Cin,kh,kw] -> [B,Cout,H',W']
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let d = ConvDims::new(self.shape(), kernel.shape(), stride, padding).ok_or_else(|| {
            GsError::Dim(format!(
                "conv2d: input {:?} incompatible with kernel {:?} (stride {stride}, padding {padding})",
                self.shape(),
                kernel.shape()
            ))
        })?;
        let mut out = vec![0.0; d.batch * d.c_out * d.h_out * d.w_out];
        kernels::conv2d_forward(&self.data(), &kernel.data(), &d, &mut out);
        let shape = vec![d.batch, d.c_out, d.h_out, d.w_out];
        let dims = Arc::new(d);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |parents, grad, _out| {
                let (x, k) = (&parents[0], &parents[1]);
                if x.requires_grad() {
                    let mut gin = vec![0.0; x.numel()];
                    kernels::conv2d_backward_input(grad, &k.data(), &dims, &mut gin);
                    x.accumulate_grad(&gin);
                }
                if k.requires_grad() {
                    let mut gk = vec![0.0; k.numel()];
                    kernels::conv2d_backward_kernel(grad, &x.data(), &dims, &mut gk);
                    k.accumulate_grad(&gk);
                }
            }),
        ))
    }

    /// y = x·W + b over the last axis, batched over leading axes.
    /// weight[Din,Dout], bias[Dout].
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let (ws, bs) = (weight.shape(), bias.shape());
        if shape.is_empty() || ws.len() != 2 || bs.len() != 1 {
            return Err(GsError::Dim(format!(
                "linear expects x[..,Din], weight[Din,Dout], bias[Dout]; got {shape:?}, {ws:?}, {bs:?}"
            )));
        }
        let din = *shape.last().unwrap();
        if ws[0] != din || ws[1] != bs[0] {
            return Err(GsError::Dim(format!(
                "linear: x last extent {din} vs weight {ws:?} / bias {bs:?}"
            )));
        }
        let rows = self.numel() / din;
        let flat = self.reshape(&[rows, din])?;
        let y = flat.matmul(weight)?.add(bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        y.reshape(&out_shape)
    }

    /// Max-subtracted softmax along `axis`; each slice sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(GsError::Input(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    max = max.max(x[base + t * inner]);
                }
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (x[base + t * inner] - max).exp();
                    out[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[base + t * inner] /= sum;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |parents, grad, out| {
                if !parents[0].requires_grad() {
                    return;
                }
                let mut dx = vec![0.0; grad.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for t in 0..len {
                            let ix = base + t * inner;
                            dot += grad[ix] * out[ix];
                        }
                        for t in 0..len {
                            let ix = base + t * inner;
                            dx[ix] = out[ix] * (grad[ix] - dot);
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    /// Normalize the last axis to mean 0 / variance 1 (population variance,
    /// `eps` inside the square root), then scale/shift by gamma/beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            GsError::Dim("layer_norm requires rank >= 1".to_string())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(GsError::Dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for t in 0..d {
                out[r * d + t] = (row[t] - mean) * inv * g[t] + b[t];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |parents, grad, _out| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let xd = x.data();
                let gd = gamma.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for t in 0..d {
                        let xhat = (row[t] - mean) * inv;
                        let gh = grow[t] * gd[t];
                        mean_gh += gh;
                        mean_ghx += gh * xhat;
                        dgamma[t] += grow[t] * xhat;
                        dbeta[t] += grow[t];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for t in 0..d {
                        let xhat = (row[t] - mean) * inv;
                        let gh = grow[t] * gd[t];
                        dx[r * d + t] = inv * (gh - mean_gh - xhat * mean_ghx);
                    }
                }
                drop(xd);
                drop(gd);
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&dbeta);
                }
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|parents, grad, out| {
                if parents[0].requires_grad() {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                        .collect();
                    parents[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|parents, grad, out| {
                if parents[0].requires_grad() {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    parents[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>();
        let n = self.numel();
        Tensor::from_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |parents, grad, _out| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(&vec![grad[0]; n]);
                }
            }),
        )
    }

    /// Fixed-weight scalar projection Σ wᵢ·xᵢ (finite-difference harness).
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(GsError::Dim(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.numel()
            )));
        }
        let s: f64 = self.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let w = Arc::new(weights.to_vec());
        Ok(Tensor::from_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |parents, grad, _out| {
                if parents[0].requires_grad() {
                    let dx: Vec<f64> = w.iter().map(|wi| wi * grad[0]).collect();
                    parents[0].accumulate_grad(&dx);
                }
            }),
        ))
    }

    /// Global average pool over the spatial axes: [B,C,H,W] -> [B,C].
    pub fn spatial_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(GsError::Dim(format!("spatial_mean expects rank 4, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.data();
        let mut out = vec![0.0; b * c];
        for i in 0..b * c {
            out[i] = x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![b, c],
            out,
            vec![self.clone()],
            Box::new(move |parents, grad, _out| {
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; b * c * hw];
                    for i in 0..b * c {
                        let g = grad[i] / hw as f64;
                        for v in &mut dx[i * hw..(i + 1) * hw] {
                            *v = g;
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }
            }),
        ))
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&self) -> Tensor {
        self.sum_all().mul_scalar(1.0 / self.numel() as f64)
    }

    /// [B,C,H,W] -> [B,H,W,C]
    pub fn nchw_to_nhwc(&self) -> Result<Tensor> {
        permute4(self, [0, 2, 3, 1])
    }

    /// [B,H,W,C] -> [B,C,H,W]
    pub fn nhwc_to_nchw(&self) -> Result<Tensor> {
        permute4(self, [0, 3, 1, 2])
    }
}

/// Mean over the batch of -log softmax(logits)[label], log-sum-exp stable.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(GsError::Dim(format!(
            "cross_entropy expects logits [B,n], got {s:?}"
        )));
    }
    let (b, n) = (s[0], s[1]);
    if labels.len() != b {
        return Err(GsError::Input(format!(
            "cross_entropy: {} labels for batch {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(GsError::Input(format!(
            "cross_entropy: label {bad} out of range for {n} classes"
        )));
    }
    let x = logits.data();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &x[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    loss /= b as f64;
    drop(x);
    let labels = Arc::new(labels.to_vec());
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |parents, grad, _out| {
            if !parents[0].requires_grad() {
                return;
            }
            let x = parents[0].data();
            let mut dx = vec![0.0; b * n];
            let scale = grad[0] / b as f64;
            for (r, &label) in labels.iter().enumerate() {
                let row = &x[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for t in 0..n {
                    let p = (row[t] - max).exp() / sum;
                    dx[r * n + t] = scale * (p - if t == label { 1.0 } else { 0.0 });
                }
            }
            drop(x);
            parents[0].accumulate_grad(&dx);
        }),
    ))
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(GsError::Input("concat of zero tensors".to_string()));
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(GsError::Input(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for (i, x) in xs.iter().enumerate() {
        if x.shape().len() != rank {
            return Err(GsError::Dim(format!(
                "concat: input {i} has rank {} != {rank}",
                x.shape().len()
            )));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != xs[0].shape()[d] {
                return Err(GsError::Dim(format!(
                    "concat: input {i} shape {:?} incompatible with {:?} along non-concat axis {d}",
                    x.shape(),
                    xs[0].shape()
                )));
            }
        }
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let tail: usize = out_shape[axis + 1..].iter().product();
    let total_inner = out_shape[axis] * tail;
    let mut out = vec![0.0; outer * total_inner];
    let chunk_sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * tail).collect();
    {
        let mut offset = 0;
        for (x, &chunk) in xs.iter().zip(&chunk_sizes) {
            let xd = x.data();
            for o in 0..outer {
                out[o * total_inner + offset..o * total_inner + offset + chunk]
                    .copy_from_slice(&xd[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
    }
    let parents: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |parents, grad, _out| {
            let mut offset = 0;
            for (p, &chunk) in parents.iter().zip(&chunk_sizes) {
                if p.requires_grad() {
                    let mut dp = vec![0.0; outer * chunk];
                    for o in 0..outer {
                        dp[o * chunk..(o + 1) * chunk].copy_from_slice(
                            &grad[o * total_inner + offset..o * total_inner + offset + chunk],
                        );
                    }
                    p.accumulate_grad(&dp);
                }
                offset += chunk;
            }
        }),
    ))
}

enum BinaryKind {
    Add,
    Mul,
}

fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    kind: BinaryKind,
) -> Result<Tensor> {
    let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        GsError::Dim(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        ))
    })?;
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    {
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
            for ((o, &x), &y) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                *o = f(x, y);
            }
        } else {
            let ndim = out_shape.len();
            let sa = kernels::broadcast_strides(a.shape(), ndim);
            let sb = kernels::broadcast_strides(b.shape(), ndim);
            let mut idx = vec![0usize; ndim];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in out.iter_mut() {
                *o = f(ad[ia], bd[ib]);
                for d in (0..ndim).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    ia -= sa[d] * out_shape[d];
                    ib -= sb[d] * out_shape[d];
                }
            }
        }
    }
    let out_shape_cl = out_shape.clone();
    let backward: super::BackwardFn = match kind {
        BinaryKind::Add => Box::new(move |parents, grad, _out| {
            for p in parents {
                if p.requires_grad() {
                    let g = kernels::reduce_to_shape(grad, &out_shape_cl, p.shape());
                    p.accumulate_grad(&g);
                }
            }
        }),
        BinaryKind::Mul => Box::new(move |parents, grad, _out| {
            let (a, b) = (&parents[0], &parents[1]);
            let ndim = out_shape_cl.len();
            if a.requires_grad() {
                let bd = b.data();
                let sb = kernels::broadcast_strides(b.shape(), ndim);
                let mut weighted = vec![0.0; grad.len()];
                apply_strided(&out_shape_cl, &sb, |o, src| {
                    weighted[o] = grad[o] * bd[src];
                });
                drop(bd);
                let g = kernels::reduce_to_shape(&weighted, &out_shape_cl, a.shape());
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                let ad = a.data();
                let sa = kernels::broadcast_strides(a.shape(), ndim);
                let mut weighted = vec![0.0; grad.len()];
                apply_strided(&out_shape_cl, &sa, |o, src| {
                    weighted[o] = grad[o] * ad[src];
                });
                drop(ad);
                let g = kernels::reduce_to_shape(&weighted, &out_shape_cl, b.shape());
                b.accumulate_grad(&g);
            }
        }),
    };
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        backward,
    ))
}

fn apply_strided(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0);
        return;
    }
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for flat in 0..numel {
        f(flat, src);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
}

/// Generic gather: out[i] = x[map[i]]; backward scatter-adds, so repeated
/// source indices accumulate correctly.
pub(crate) fn gather_op(x: &Tensor, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Tensor {
    debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
    let xd = x.data();
    let out: Vec<f64> = map.iter().map(|&s| xd[s]).collect();
    drop(xd);
    let back_map = Arc::clone(&map);
    Tensor::from_op(
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |parents, grad, _out| {
            if parents[0].requires_grad() {
                let mut dx = vec![0.0; parents[0].numel()];
                for (g, &src) in grad.iter().zip(back_map.iter()) {
                    dx[src] += g;
                }
                parents[0].accumulate_grad(&dx);
            }
        }),
    )
}

/// Gather-style permutation op: out = x permuted by `perm`, grad scattered back.
fn permute4(x: &Tensor, perm: [usize; 4]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(GsError::Dim(format!("permute expects rank 4, got {s:?}")));
    }
    let in_shape = [s[0], s[1], s[2], s[3]];
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let map = build_permute_map(in_shape, perm);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for (o, &src) in out.iter_mut().zip(&map) {
        *o = xd[src];
    }
    drop(xd);
    let map = Arc::new(map);
    Ok(Tensor::from_op(
        out_shape.to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |parents, grad, _out| {
            if parents[0].requires_grad() {
                let mut dx = vec![0.0; grad.len()];
                for (g, &src) in grad.iter().zip(map.iter()) {
                    dx[src] += g;
                }
                parents[0].accumulate_grad(&dx);
            }
        }),
    ))
}

fn build_permute_map(in_shape: [usize; 4], perm: [usize; 4]) -> Vec<usize> {
    let out_shape = [
        in_shape[perm[0]],
        in_shape[perm[1]],
        in_shape[perm[2]],
        in_shape[perm[3]],
    ];
    let mut in_strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        in_strides[d] = acc;
        acc *= in_shape[d];
    }
    let numel: usize = in_shape.iter().product();
    let mut map = vec![0usize; numel];
    let mut flat = 0;
    for i0 in 0..out_shape[0] {
        for i1 in 0..out_shape[1] {
            for i2 in 0..out_shape[2] {
                for i3 in 0..out_shape[3] {
                    let out_idx = [i0, i1, i2, i3];
                    let mut src = 0;
                    for d in 0..4 {
                        src += out_idx[d] * in_strides[perm[d]];
                    }
                    map[flat] = src;
                    flat += 1;
                }
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity_case() {
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = i2.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![0.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        let a: Vec<f64> = (0..12).map(|_| rng.range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    want[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let c = Tensor::from_vec(a, &[3, 4])
            .unwrap()
            .matmul(&Tensor::from_vec(b, &[4, 2]).unwrap())
            .unwrap();
        assert_close(&c.to_vec(), &want, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec((0..9).map(|v| v as f64).collect(), &[1, 1, 3, 3]).unwrap();
        let k = Tensor::from_vec(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.0);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = crate::rng::Rng::new(17);
        let (b, cin, h, w) = (1, 2, 5, 5);
        let (cout, kh, kw) = (3, 3, 3);
        let (stride, pad) = (2, 1);
        let x: Vec<f64> = (0..b * cin * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        let k: Vec<f64> = (0..cout * cin * kh * kw).map(|_| rng.range(-1.0, 1.0)).collect();
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let mut want = vec![0.0; b * cout * h_out * w_out];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                        s += x[((bi * cin + ci) * h + y as usize) * w
                                            + xx as usize]
                                            * k[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        want[((bi * cout + co) * h_out + oy) * w_out + ox] = s;
                    }
                }
            }
        }
        let y = Tensor::from_vec(x, &[b, cin, h, w])
            .unwrap()
            .conv2d(&Tensor::from_vec(k, &[cout, cin, kh, kw]).unwrap(), stride, pad)
            .unwrap();
        assert_eq!(y.shape(), &[b, cout, h_out, w_out]);
        assert_close(&y.to_vec(), &want, 1e-12);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(x.conv2d(&k, 1, 0), Err(GsError::Dim(_))));
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = x.linear(&w, &b).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let x0 = Tensor::zeros(&[3, 2]);
        let bias = Tensor::from_vec(vec![0.5, -0.5], &[2]).unwrap();
        let y0 = x0.linear(&w, &bias).unwrap();
        assert_eq!(y0.to_vec(), vec![0.5, -0.5, 0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn linear_matches_flattened_matmul_oracle() {
        let mut rng = crate::rng::Rng::new(23);
        let x: Vec<f64> = (0..24).map(|_| rng.range(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.range(-1.0, 1.0)).collect();
        let xt = Tensor::from_vec(x.clone(), &[2, 3, 4]).unwrap();
        let wt = Tensor::from_vec(w.clone(), &[4, 5]).unwrap();
        let bt = Tensor::from_vec(b.clone(), &[5]).unwrap();
        let y = xt.linear(&wt, &bt).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        // oracle: flatten batch, plain matmul + bias
        let mut want = vec![0.0; 30];
        for r in 0..6 {
            for j in 0..5 {
                let mut s = b[j];
                for k in 0..4 {
                    s += x[r * 4 + k] * w[k * 5 + j];
                }
                want[r * 5 + j] = s;
            }
        }
        assert_close(&y.to_vec(), &want, 1e-12);
    }

    #[test]
    fn linear_din_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 5]);
        let b = Tensor::zeros(&[5]);
        assert!(matches!(x.linear(&w, &b), Err(GsError::Dim(_))));
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let x = Tensor::full(&[2, 5], 3.7);
        let y = x.softmax(1).unwrap();
        for &v in y.to_vec().iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7], &[4]).unwrap();
        let a = x.softmax(0).unwrap();
        let b = x.add_scalar(13.5).softmax(0).unwrap();
        assert_close(&a.to_vec(), &b.to_vec(), 1e-14);
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let x = Tensor::from_vec(vec![0.0, 3.0_f64.ln()], &[2]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_close(&y.to_vec(), &[0.25, 0.75], 1e-14);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(31);
        let x: Vec<f64> = (0..60).map(|_| rng.range(-5.0, 5.0)).collect();
        let y = Tensor::from_vec(x, &[3, 4, 5]).unwrap().softmax(1).unwrap();
        let d = y.to_vec();
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|t| d[(o * 4 + t) * 5 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for t in 0..4 {
                    assert!(d[(o * 4 + t) * 5 + i] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let x = Tensor::full(&[3, 4], 2.5);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for &v in y.to_vec().iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_slice() {
        let x = Tensor::from_vec(vec![1.0, -1.0], &[1, 2]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert_close(&y.to_vec(), &[1.0, -1.0], 1e-9);
    }

    #[test]
    fn layer_norm_statistics_oracle() {
        let mut rng = crate::rng::Rng::new(37);
        let d = 16;
        let x: Vec<f64> = (0..4 * d).map(|_| rng.range(-2.0, 2.0)).collect();
        let y = Tensor::from_vec(x, &[4, d])
            .unwrap()
            .layer_norm(&Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-5)
            .unwrap();
        let out = y.to_vec();
        for r in 0..4 {
            let row = &out[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn activations_closed_form() {
        let x = Tensor::from_vec(vec![-1.0, 2.0], &[2]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 2.0]);
        let s = Tensor::from_vec(vec![0.0, 3.0_f64.ln()], &[2])
            .unwrap()
            .sigmoid();
        assert_close(&s.to_vec(), &[0.5, 0.75], 1e-14);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = concat(&[&x], 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_channel_shape_arithmetic() {
        let a = Tensor::zeros(&[2, 2, 3, 3]);
        let b = Tensor::zeros(&[2, 3, 3, 3]);
        let y = concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 3]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut rng = crate::rng::Rng::new(41);
        let a: Vec<f64> = (0..2 * 2 * 4).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.uniform()).collect();
        let at = Tensor::from_vec(a.clone(), &[2, 2, 4]).unwrap();
        let bt = Tensor::from_vec(b.clone(), &[2, 3, 4]).unwrap();
        let y = concat(&[&at, &bt], 1).unwrap();
        let d = y.to_vec();
        for o in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    assert_eq!(d[(o * 5 + c) * 4 + i], a[(o * 2 + c) * 4 + i]);
                }
            }
            for c in 0..3 {
                for i in 0..4 {
                    assert_eq!(d[(o * 5 + 2 + c) * 4 + i], b[(o * 3 + c) * 4 + i]);
                }
            }
        }
    }

    #[test]
    fn concat_incompatible_reports_offender() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3, 3]);
        let err = concat(&[&a, &b], 1).unwrap_err();
        assert!(err.to_string().contains("input 1"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let logits = Tensor::full(&[3, 7], 0.42);
        let loss = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss.item() - (7.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_near_zero() {
        let mut row = vec![0.0; 5];
        row[2] = 1e4;
        let logits = Tensor::from_vec(row, &[1, 5]).unwrap();
        let loss = cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.item().abs() < 1e-12);
        assert!(loss.item() >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = crate::rng::Rng::new(43);
        let x: Vec<f64> = (0..20).map(|_| rng.range(-3.0, 3.0)).collect();
        let labels = [1usize, 4, 0, 2];
        let mut want = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &x[r * 5..(r + 1) * 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[l].exp() / denom).ln();
        }
        want /= 4.0;
        let loss = cross_entropy(&Tensor::from_vec(x, &[4, 5]).unwrap(), &labels).unwrap();
        assert!((loss.item() - want).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(GsError::Input(_))
        ));
    }

    #[test]
    fn broadcast_add_and_mul() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let z = x.mul(&b).unwrap();
        assert_eq!(z.to_vec(), vec![10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = crate::rng::Rng::new(47);
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.uniform()).collect();
        let t = Tensor::from_vec(x.clone(), &[2, 3, 4, 5]).unwrap();
        let back = t.nchw_to_nhwc().unwrap().nhwc_to_nchw().unwrap();
        assert_eq!(back.to_vec(), x);
    }

    #[test]
    fn spatial_mean_matches_manual() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[1, 2, 2, 2])
            .unwrap();
        let y = x.spatial_mean().unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 25.0]);
    }
}
