//! Forward kernels and their backward rules.

use super::Tensor;
use crate::error::{Error, Result};

/// Row-major C[m,n] += alpha * A[m,k] * B[k,n]; strides let either operand be
/// read transposed without copying.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "{op} requires a rank-2 tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

impl Tensor {
    /// Standard matrix product; gradients are dA = dC·Bᵀ and dB = Aᵀ·dC.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims_2d(self, "matmul")?;
        let (k2, n) = dims_2d(other, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, 0.0, &mut out);
        drop(a);
        drop(b);

        Tensor::make_result(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, out_grad, parents| {
                let a = parents[0].inner.borrow();
                let b = parents[1].inner.borrow();
                let da = parents[0].is_tracked().then(|| {
                    let mut g = vec![0.0; m * k];
                    // dC[m,n] · Bᵀ[n,k]
                    dgemm(m, n, k, out_grad, n as isize, 1, &b.data, 1, n as isize, 0.0, &mut g);
                    g
                });
                let db = parents[1].is_tracked().then(|| {
                    let mut g = vec![0.0; k * n];
                    // Aᵀ[k,m] · dC[m,n]
                    dgemm(k, m, n, &a.data, 1, k as isize, out_grad, n as isize, 1, 0.0, &mut g);
                    g
                });
                vec![da, db]
            }),
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
        };
        Tensor::make_result(
            "add",
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|_, out_grad, _| {
                vec![Some(out_grad.to_vec()), Some(out_grad.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0)?)
    }

    /// Adds a length-D bias to every row of a (..., D) tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().expect("non-empty shape");
        if bias.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: bias.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = bias.inner.borrow();
            a.data
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data[i % d])
                .collect()
        };
        Tensor::make_result(
            "add_bias",
            self.shape(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, out_grad, parents| {
                let dx = parents[0].is_tracked().then(|| out_grad.to_vec());
                let db = parents[1].is_tracked().then(|| {
                    let mut g = vec![0.0; d];
                    for (i, og) in out_grad.iter().enumerate() {
                        g[i % d] += og;
                    }
                    g
                });
                vec![dx, db]
            }),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()
        };
        Tensor::make_result(
            "mul",
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|_, out_grad, parents| {
                let a = parents[0].inner.borrow();
                let b = parents[1].inner.borrow();
                let da = parents[0]
                    .is_tracked()
                    .then(|| out_grad.iter().zip(&b.data).map(|(g, y)| g * y).collect());
                let db = parents[1]
                    .is_tracked()
                    .then(|| out_grad.iter().zip(&a.data).map(|(g, x)| g * x).collect());
                vec![da, db]
            }),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|x| x * factor).collect();
        Tensor::make_result(
            "scale",
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                vec![Some(out_grad.iter().map(|g| g * factor).collect())]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|x| x.max(0.0)).collect();
        Tensor::make_result(
            "relu",
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|_, out_grad, parents| {
                let x = parents[0].inner.borrow();
                vec![Some(
                    out_grad
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn tanh_act(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.inner.borrow().data.iter().map(|x| x.tanh()).collect();
        Tensor::make_result(
            "tanh",
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|out_data, out_grad, _| {
                vec![Some(
                    out_grad
                        .iter()
                        .zip(out_data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )]
            }),
        )
    }

    /// GELU via the tanh approximation, with its exact analytic derivative.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let out: Vec<f64> = self
            .inner
            .borrow()
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        Tensor::make_result(
            "gelu",
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|_, out_grad, parents| {
                let x = parents[0].inner.borrow();
                vec![Some(
                    out_grad
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &x)| {
                            let t = (C * (x + A * x * x * x)).tanh();
                            let sech2 = 1.0 - t * t;
                            g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x))
                        })
                        .collect(),
                )]
            }),
        )
    }

    /// Numerically stable softmax over the last dimension; each slice sums
    /// to 1.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().expect("non-empty shape");
        if d == 0 {
            return Err(Error::invalid("softmax over an empty last dimension"));
        }
        let data = self.inner.borrow().data.clone();
        let mut out = vec![0.0; data.len()];
        for (row_in, row_out) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::make_result(
            "softmax",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |out_data, out_grad, _| {
                let mut dx = vec![0.0; out_data.len()];
                for ((y, dy), dxr) in out_data
                    .chunks_exact(d)
                    .zip(out_grad.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for ((dxi, yi), dyi) in dxr.iter_mut().zip(y).zip(dy) {
                        *dxi = yi * (dyi - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Per-slice normalization over the last dimension followed by an affine
    /// transform: y = (x − mean)/sqrt(var + eps) · gamma + beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape();
        let d = *shape.last().expect("non-empty shape");
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let x = self.inner.borrow().data.clone();
        let g = gamma.inner.borrow().data.clone();
        let b = beta.inner.borrow().data.clone();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * g[i] + b[i];
            }
        }
        Tensor::make_result(
            "layer_norm",
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, out_grad, parents| {
                let dn = d as f64;
                let dx = parents[0].is_tracked().then(|| {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let dy = &out_grad[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let istd = inv_std[r];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..d {
                            let dxhat = dy[i] * g[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xh[i];
                        }
                        for i in 0..d {
                            let dxhat = dy[i] * g[i];
                            dx[r * d + i] =
                                istd * (dxhat - sum_dxhat / dn - xh[i] * sum_dxhat_xhat / dn);
                        }
                    }
                    dx
                });
                let dgamma = parents[1].is_tracked().then(|| {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += out_grad[r * d + i] * xhat[r * d + i];
                        }
                    }
                    dg
                });
                let dbeta = parents[2].is_tracked().then(|| {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += out_grad[r * d + i];
                        }
                    }
                    db
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Mean negative log-softmax probability of the targets over non-ignored
    /// positions. Fails if every position carries the ignore id.
    pub fn cross_entropy(&self, targets: &[u32], ignore_id: u32) -> Result<Tensor> {
        let (t, v) = dims_2d(self, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::invalid(format!(
                "cross_entropy: {t} logit rows but {} targets",
                targets.len()
            )));
        }
        let active: Vec<usize> = (0..t).filter(|&i| targets[i] != ignore_id).collect();
        if active.is_empty() {
            return Err(Error::invalid(
                "cross_entropy: all positions ignored, mean is undefined",
            ));
        }
        for &i in &active {
            if targets[i] as usize >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy: target {} out of vocabulary range {v}",
                    targets[i]
                )));
            }
        }
        let logits = self.inner.borrow().data.clone();
        let n = active.len() as f64;
        // softmax probabilities per active row, kept for the backward rule
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for &i in &active {
            let row = &logits[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in probs[i * v..(i + 1) * v].iter_mut() {
                *p /= sum;
            }
            let log_z = sum.ln() + max;
            loss += log_z - row[targets[i] as usize];
        }
        loss /= n;
        let targets = targets.to_vec();
        Tensor::make_result(
            "cross_entropy",
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                let scale = out_grad[0] / n;
                let mut dx = vec![0.0; t * v];
                for &i in &active {
                    let p = &probs[i * v..(i + 1) * v];
                    let dxr = &mut dx[i * v..(i + 1) * v];
                    for (d, &pi) in dxr.iter_mut().zip(p) {
                        *d = pi * scale;
                    }
                    dxr[targets[i] as usize] -= scale;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.inner.borrow().data.iter().sum();
        let numel = self.numel();
        Tensor::make_result(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, out_grad, _| vec![Some(vec![out_grad[0]; numel])]),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = dims_2d(self, "transpose")?;
        let data = self.inner.borrow().data.clone();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        Tensor::make_result(
            "transpose",
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                let mut g = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = out_grad[j * m + i];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Same data, new extents; the element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.inner.borrow().data.clone();
        Tensor::make_result(
            "reshape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, out_grad, _| vec![Some(out_grad.to_vec())]),
        )
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = dims_2d(self, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.inner.borrow().data[start * n..(start + len) * n].to_vec();
        Tensor::make_result(
            "slice_rows",
            vec![len, n],
            data,
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                let mut g = vec![0.0; m * n];
                g[start * n..(start + len) * n].copy_from_slice(out_grad);
                vec![Some(g)]
            }),
        )
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = dims_2d(self, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of bounds for {n} cols",
                start + len
            )));
        }
        let src = self.inner.borrow();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.data[i * n + start..i * n + start + len]);
        }
        drop(src);
        Tensor::make_result(
            "slice_cols",
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + len]
                        .copy_from_slice(&out_grad[i * len..(i + 1) * len]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Stacks rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let (_, n) = dims_2d(&parts[0], "concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (m_p, n_p) = dims_2d(p, "concat_rows")?;
            if n_p != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            rows.push(m_p);
            data.extend_from_slice(&p.inner.borrow().data);
        }
        let total: usize = rows.iter().sum();
        Tensor::make_result(
            "concat_rows",
            vec![total, n],
            data,
            parts.to_vec(),
            Box::new(move |_, out_grad, parents| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parents.len());
                for (p, &m_p) in parents.iter().zip(&rows) {
                    let chunk = m_p * n;
                    grads.push(
                        p.is_tracked()
                            .then(|| out_grad[offset..offset + chunk].to_vec()),
                    );
                    offset += chunk;
                }
                grads
            }),
        )
    }

    /// Stacks rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let (m, _) = dims_2d(&parts[0], "concat_cols")?;
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            let (m_p, n_p) = dims_2d(p, "concat_cols")?;
            if m_p != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            cols.push(n_p);
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &n_p) in parts.iter().zip(&cols) {
            let src = p.inner.borrow();
            for i in 0..m {
                data[i * total + offset..i * total + offset + n_p]
                    .copy_from_slice(&src.data[i * n_p..(i + 1) * n_p]);
            }
            offset += n_p;
        }
        let cols_bw = cols.clone();
        Tensor::make_result(
            "concat_cols",
            vec![m, total],
            data,
            parts.to_vec(),
            Box::new(move |_, out_grad, parents| {
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for (p, &n_p) in parents.iter().zip(&cols_bw) {
                    grads.push(p.is_tracked().then(|| {
                        let mut g = vec![0.0; m * n_p];
                        for i in 0..m {
                            g[i * n_p..(i + 1) * n_p].copy_from_slice(
                                &out_grad[i * total + offset..i * total + offset + n_p],
                            );
                        }
                        g
                    }));
                    offset += n_p;
                }
                grads
            }),
        )
    }

    /// Gathers rows of a (V, D) table by token id; the backward rule
    /// scatter-adds into the table.
    pub fn embed_lookup(&self, ids: &[u32]) -> Result<Tensor> {
        let (v, d) = dims_2d(self, "embed_lookup")?;
        if ids.is_empty() {
            return Err(Error::invalid("embed_lookup with no ids"));
        }
        for &id in ids {
            if id as usize >= v {
                return Err(Error::invalid(format!(
                    "embed_lookup: id {id} out of table range {v}"
                )));
            }
        }
        let table = self.inner.borrow();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&table.data[id as usize * d..(id as usize + 1) * d]);
        }
        drop(table);
        let ids = ids.to_vec();
        Tensor::make_result(
            "embed_lookup",
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |_, out_grad, _| {
                let mut g = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (gd, og) in dst.iter_mut().zip(&out_grad[row * d..(row + 1) * d]) {
                        *gd += og;
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}
