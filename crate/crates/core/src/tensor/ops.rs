//! Forward/backward rules for every differentiable op the backbone needs.
//!
//! Rank support is deliberately narrow: vectors and matrices, plus the
//! row-wise fused ops (softmax, layernorm, l2-normalize) a transformer uses.

use super::{Tensor, TensorError, TensorResult};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> TensorResult {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let an = self.node.clone();
        let bn = other.node.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    g.iter().zip(&bn.data).map(|(g, b)| g * b).collect(),
                    g.iter().zip(&an.data).map(|(g, a)| g * a).collect(),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![g.iter().map(|v| -v).collect()]),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|v| v * c).collect()]),
        )
    }

    /// Elementwise product with a constant array (masks, OT plans).
    pub fn mul_const(&self, m: &[f64]) -> TensorResult {
        if m.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        let data = self.data().iter().zip(m).map(|(a, b)| a * b).collect();
        let m = m.to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&m).map(|(g, m)| g * m).collect()]),
        ))
    }

    pub fn add_const(&self, m: &[f64]) -> TensorResult {
        if m.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        let data = self.data().iter().zip(m).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        ))
    }

    /// Multiply every element by a one-element tensor (learnable scalar).
    pub fn scale_by(&self, s: &Tensor) -> TensorResult {
        if s.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let data = self.data().iter().map(|v| v * sv).collect();
        let xn = self.node.clone();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                let dx = g.iter().map(|g| g * sv).collect();
                let ds = g.iter().zip(&xn.data).map(|(g, x)| g * x).sum();
                vec![dx, vec![ds]]
            }),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> TensorResult {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let an = self.node.clone();
        let bn = other.node.clone();
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // da = g . b^T ; db = a^T . g
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != 0.0 {
                            for l in 0..k {
                                da[i * k + l] += gij * bn.data[l * n + j];
                            }
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = an.data[i * k + l];
                        if ail != 0.0 {
                            for j in 0..n {
                                db[l * n + j] += ail * g[i * n + j];
                            }
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> TensorResult {
        let (r, c) = self.rows_cols("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data()[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dg = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dg[i * c + j] = g[j * r + i];
                    }
                }
                vec![dg]
            }),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        ))
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let y = data.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&y).map(|(g, y)| g * y).collect()]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        let xn = self.node.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&xn.data).map(|(g, x)| g / x).collect()]),
        )
    }

    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        let xn = self.node.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&xn.data)
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect()]
            }),
        )
    }

    pub fn softplus(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let xn = self.node.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&xn.data)
                    .map(|(g, &x)| g * sigmoid_scalar(x))
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let y = data.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect()]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![s / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
        )
    }

    /// Weighted sum against a constant weight array, producing a scalar.
    pub fn weighted_sum(&self, w: &[f64]) -> TensorResult {
        if w.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self.data().iter().zip(w).map(|(a, b)| a * b).sum();
        let w = w.to_vec();
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g| vec![w.iter().map(|wi| wi * g[0]).collect()]),
        ))
    }

    /// x[r,c] + b[c], broadcast over rows.
    pub fn add_broadcast_row(&self, b: &Tensor) -> TensorResult {
        let (r, c) = self.rows_cols("add_broadcast_row")?;
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast_row",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b.data()[j];
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone(), b.clone()],
            Box::new(move |g| {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                vec![g.to_vec(), db]
            }),
        ))
    }

    /// Row-wise softmax with max-subtraction. `mask` is an optional additive
    /// constant (e.g. -1e30 on disallowed attention positions).
    pub fn softmax_rows(&self, mask: Option<&[f64]>) -> TensorResult {
        let (r, c) = self.rows_cols("softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![m.len()],
                });
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let masked: Vec<f64> = match mask {
                Some(m) => row
                    .iter()
                    .zip(&m[i * c..(i + 1) * c])
                    .map(|(a, b)| a + b)
                    .collect(),
                None => row.to_vec(),
            };
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (masked[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![dx]
            }),
        ))
    }

    pub fn log_softmax_rows(&self) -> TensorResult {
        let (r, c) = self.rows_cols("log_softmax_rows")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .map(|v| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let logp = data.clone();
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gs = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = gs[j] - logp[i * c + j].exp() * gsum;
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Row-wise layer norm followed by affine gain/bias over the last axis.
    pub fn layernorm_rows(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TensorResult {
        let (r, c) = self.rows_cols("layernorm_rows")?;
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm_rows",
                lhs: vec![r, c],
                rhs: gain.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mu: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mu) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gain.data()[j] + bias.data()[j];
            }
        }
        let gn = gain.node.clone();
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let gs = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        dgain[j] += gs[j] * xh[j];
                        dbias[j] += gs[j];
                        dxhat[j] = gs[j] * gn.data[j];
                    }
                    let m1: f64 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2: f64 =
                        dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                vec![dx, dgain, dbias]
            }),
        ))
    }

    /// L2-normalize each row. Rows with tiny norm are left near-zero.
    pub fn normalize_rows(&self) -> TensorResult {
        let (r, c) = self.rows_cols("normalize_rows")?;
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gs[j] - ys[j] * dot) / norms[i];
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Gather rows of a [v, c] matrix; backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> TensorResult {
        let (v, c) = self.rows_cols("gather_rows")?;
        for &i in idx {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: v,
                });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let rows = idx.len();
        Ok(Tensor::from_op(
            data,
            vec![rows, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; v * c];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] += g[r * c + j];
                    }
                }
                vec![dt]
            }),
        ))
    }

    /// Each output row is a weighted combination of table rows
    /// (bilinear interpolation of a positional grid).
    pub fn gather_rows_weighted(&self, taps: &[Vec<(usize, f64)>]) -> TensorResult {
        let (v, c) = self.rows_cols("gather_rows_weighted")?;
        let rows = taps.len();
        let mut data = vec![0.0; rows * c];
        for (r, tap) in taps.iter().enumerate() {
            for &(i, w) in tap {
                if i >= v {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows_weighted",
                        index: i,
                        len: v,
                    });
                }
                for j in 0..c {
                    data[r * c + j] += w * self.data()[i * c + j];
                }
            }
        }
        let taps = taps.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![rows, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; v * c];
                for (r, tap) in taps.iter().enumerate() {
                    for &(i, w) in tap {
                        for j in 0..c {
                            dt[i * c + j] += w * g[r * c + j];
                        }
                    }
                }
                vec![dt]
            }),
        ))
    }

    /// Vertically stack matrices with the same column count.
    pub fn concat_rows(parts: &[Tensor]) -> TensorResult {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, c) = parts[0].rows_cols("concat_rows")?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut total = 0;
        for p in parts {
            let (r, pc) = p.rows_cols("concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![total, c],
                    rhs: p.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.data());
            sizes.push(r);
            total += r;
        }
        Ok(Tensor::from_op(
            data,
            vec![total, c],
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &r in &sizes {
                    out.push(g[off * c..(off + r) * c].to_vec());
                    off += r;
                }
                out
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> TensorResult {
        let (r, c) = self.rows_cols("slice_rows")?;
        if start + len > r {
            return Err(TensorError::InvalidRange {
                op: "slice_rows",
                shape: self.shape().to_vec(),
            });
        }
        let data = self.data()[start * c..(start + len) * c].to_vec();
        Ok(Tensor::from_op(
            data,
            vec![len, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; r * c];
                dt[start * c..(start + len) * c].copy_from_slice(g);
                vec![dt]
            }),
        ))
    }

    /// Single row as a vector of shape [c].
    pub fn row(&self, i: usize) -> TensorResult {
        let (_, c) = self.rows_cols("row")?;
        self.slice_rows(i, 1)?.reshape(vec![c])
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> TensorResult {
        let (r, c) = self.rows_cols("slice_cols")?;
        if start + len > c {
            return Err(TensorError::InvalidRange {
                op: "slice_cols",
                shape: self.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data()[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::from_op(
            data,
            vec![r, len],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; r * c];
                for i in 0..r {
                    dt[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![dt]
            }),
        ))
    }

    /// Horizontally stack matrices with the same row count.
    pub fn concat_cols(parts: &[Tensor]) -> TensorResult {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (r, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r, total],
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(Tensor::from_op(
            data,
            vec![r, total],
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    out.push(dp);
                    off += w;
                }
                out
            }),
        ))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += ail * brow[j];
                }
            }
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity() {
        let a = Tensor::constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = Tensor::constant(vec![2.0, 3.0, 4.0, 5.0], vec![2, 2]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::constant(vec![1.0, 2.0], vec![1, 2]);
        let b = Tensor::constant(vec![3.0, 4.0], vec![2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::constant(vec![0.0; 6], vec![2, 3]);
        let b = Tensor::constant(vec![0.0; 4], vec![2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let x = Tensor::constant(vec![0.0, 0.0], vec![1, 2]);
        let y = x.softmax_rows(None).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.5, epsilon = 1e-12);

        let big = Tensor::constant(vec![1000.0, 1000.0], vec![1, 2]);
        let y = big.softmax_rows(None).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_analytic() {
        let x = Tensor::constant(vec![0.0, 3.0_f64.ln()], vec![1, 2]);
        let y = x.softmax_rows(None).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn layernorm_constant_row_gives_bias() {
        let x = Tensor::constant(vec![3.0, 3.0, 3.0, 3.0], vec![1, 4]);
        let gain = Tensor::constant(vec![1.0; 4], vec![4]);
        let bias = Tensor::constant(vec![0.5; 4], vec![4]);
        let y = x.layernorm_rows(&gain, &bias, 1e-5).unwrap();
        for v in y.data() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn layernorm_already_normalized() {
        let x = Tensor::constant(vec![1.0, -1.0], vec![1, 2]);
        let gain = Tensor::constant(vec![1.0, 1.0], vec![2]);
        let bias = Tensor::constant(vec![0.0, 0.0], vec![2]);
        let y = x.layernorm_rows(&gain, &bias, 1e-9).unwrap();
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y.data()[1], -1.0, epsilon = 1e-4);
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let x = Tensor::constant(vec![3.0, 4.0], vec![1, 2]);
        let y = x.normalize_rows().unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data()[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let t = Tensor::leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let g = t.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        g.sum().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_inverse() {
        let a = Tensor::constant(vec![1.0, 2.0], vec![1, 2]);
        let b = Tensor::constant(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]);
        let cat = Tensor::concat_rows(&[a, b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        let back = cat.slice_rows(1, 2).unwrap();
        assert_eq!(back.data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
