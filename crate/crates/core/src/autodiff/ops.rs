use super::kernels::{gemm_acc, gemm_nt_acc};
use super::special::for_each_erf;
use super::tape::{heads_permute, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `(gelu(x), gelu'(x))` with the exact Gaussian CDF.
#[cfg(test)]
fn gelu_with_derivative(x: f64) -> (f64, f64) {
    let (e, de) = super::special::erf_with_derivative(x * INV_SQRT_2);
    let cdf = 0.5 * (1.0 + e);
    let pdf = 0.5 * INV_SQRT_2 * de;
    (x * cdf, cdf + x * pdf)
}

#[cfg(test)]
fn gelu(x: f64) -> f64 {
    gelu_with_derivative(x).0
}

/// For each output element of `patchify` on a `[b, c, s, s]` batch, the flat
/// source index in the input. Output layout is `[b, (s/patch)², c·patch²]`,
/// patches in row-major grid order, each flattened channel, row, column.
pub(super) fn patch_layout(batch: usize, channels: usize, side: usize, patch: usize) -> impl Iterator<Item = usize> {
    let grid = side / patch;
    (0..batch).flat_map(move |b| {
        (0..grid * grid).flat_map(move |cell| {
            let (gy, gx) = (cell / grid, cell % grid);
            (0..channels).flat_map(move |c| {
                (0..patch).flat_map(move |r| {
                    (0..patch).map(move |q| ((b * channels + c) * side + gy * patch + r) * side + gx * patch + q)
                })
            })
        })
    })
}

fn check_rows(op: &'static str, indices: &[usize], len: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= len) {
        Some(&index) => Err(Error::Index { op, index, len }),
        None => Ok(()),
    }
}

impl Tape {
    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let needs = self.any_grad(&[x]);
        self.record(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let needs = self.any_grad(&[a, b]);
        self.record(value, op, needs)
    }

    /// `[.., k] × [k, n] → [.., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 1 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// Batched `[B, m, k] × [B, k, n]`, or `[B, m, k] × [B, n, k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let inner_b = if transpose_b { 2 } else { 1 };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[inner_b] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &av.data()[i * m * k..(i + 1) * m * k];
            let bi = &bv.data()[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt_acc(ai, bi, ci, m, k, n);
            } else {
                gemm_acc(ai, bi, ci, m, k, n);
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.binary(a, b, value, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if xv.rank() == 0 || n == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.unary(x, value, Op::Softmax(x)))
    }

    /// Row-wise normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if xv.rank() == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel();
        let (mut out, mut slope) = (vec![0.0; n], vec![0.0; n]);
        let mut i = 0;
        for_each_erf(xv.data(), INV_SQRT_2, |e, de, v| {
            let cdf = 0.5 * (1.0 + e);
            out[i] = v * cdf;
            slope[i] = cdf + v * 0.5 * INV_SQRT_2 * de;
            i += 1;
        });
        let value = Tensor::new(xv.shape(), out).expect("same shape");
        self.unary(x, value, Op::Gelu { x, slope })
    }

    /// Selects rows along the second-to-last axis. A `[p, d]` input takes a
    /// single index list; a `[b, p, d]` input takes one list per batch entry,
    /// all of the same length. Indices are constants for differentiation.
    pub fn gather_rows(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let batch = match s.len() {
            2 => 1,
            3 => s[0],
            _ => return Err(Error::dim("gather_rows", s, &[indices.len()])),
        };
        let (p, d) = (s[s.len() - 2], s[s.len() - 1]);
        let k = indices.first().map_or(0, Vec::len);
        if indices.len() != batch || indices.iter().any(|i| i.len() != k) {
            return Err(Error::dim("gather_rows", s, &[indices.len(), k]));
        }
        let mut out = Vec::with_capacity(batch * k * d);
        for (b, idx) in indices.iter().enumerate() {
            check_rows("gather_rows", idx, p)?;
            for &i in idx {
                out.extend_from_slice(&xv.data()[(b * p + i) * d..(b * p + i + 1) * d]);
            }
        }
        let shape = if s.len() == 2 { vec![k, d] } else { vec![batch, k, d] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.unary(
            x,
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates along the second-to-last axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::dim("concat_rows", sa, sb));
        }
        let d = sa[r - 1];
        let (ra, rb) = (sa[r - 2], sb[r - 2]);
        let outer = av.numel() / (ra * d).max(1);
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for o in 0..outer {
            out.extend_from_slice(&av.data()[o * ra * d..(o + 1) * ra * d]);
            out.extend_from_slice(&bv.data()[o * rb * d..(o + 1) * rb * d]);
        }
        let mut shape = sa.to_vec();
        shape[r - 2] = ra + rb;
        let value = Tensor::new(&shape, out)?;
        Ok(self.binary(a, b, value, Op::ConcatRows(a, b)))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let data = xv.data().repeat(n);
        let value = Tensor::new(&shape, data).expect("broadcast shape");
        self.unary(x, value, Op::BroadcastBatch(x))
    }

    /// `[b, p, h·dh] → [b·h, p, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::dim("split_heads", &s, &[heads]));
        }
        let hd = s[2] / heads;
        let mut out = vec![0.0; self.value(x).numel()];
        heads_permute(self.value(x).data(), &mut out, s[0], s[1], heads, hd, true);
        let value = Tensor::new(&[s[0] * heads, s[1], hd], out)?;
        Ok(self.unary(x, value, Op::SplitHeads { x, heads }))
    }

    /// `[b·h, p, dh] → [b, p, h·dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::dim("merge_heads", &s, &[heads]));
        }
        let batch = s[0] / heads;
        let mut out = vec![0.0; self.value(x).numel()];
        heads_permute(self.value(x).data(), &mut out, batch, s[1], heads, s[2], false);
        let value = Tensor::new(&[batch, s[1], heads * s[2]], out)?;
        Ok(self.unary(x, value, Op::MergeHeads { x, heads }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let full = xv.last_dim();
        if xv.rank() == 0 || start + len > full {
            return Err(Error::Index {
                op: "slice_last",
                index: start + len,
                len: full,
            });
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(full) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.unary(x, value, Op::SliceLast { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// `[b, c, s, s] → [b, (s/patch)², c·patch²]`
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || patch == 0 || !s[2].is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "cannot split image of shape {s:?} into {patch}×{patch} patches"
            )));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = patch_layout(s[0], s[1], s[2], patch).map(|i| src[i]).collect();
        let grid = s[2] / patch;
        let value = Tensor::new(&[s[0], grid * grid, s[1] * patch * patch], out)?;
        Ok(self.unary(x, value, Op::Patchify { x, patch }))
    }

    /// Picks `table[h, i, j]` for every pair `(i, j)` of each index list:
    /// `[h, S, S] → [b·h, k, k]`.
    pub fn gather_pairs(&mut self, table: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let s = tv.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::dim("gather_pairs", s, &[indices.len()]));
        }
        let (heads, size) = (s[0], s[1]);
        let k = indices.first().map_or(0, Vec::len);
        if indices.iter().any(|i| i.len() != k) {
            return Err(Error::dim("gather_pairs", s, &[indices.len(), k]));
        }
        let mut out = Vec::with_capacity(indices.len() * heads * k * k);
        for idx in indices {
            check_rows("gather_pairs", idx, size)?;
            for h in 0..heads {
                for &i in idx {
                    for &j in idx {
                        out.push(tv.data()[(h * size + i) * size + j]);
                    }
                }
            }
        }
        let value = Tensor::new(&[indices.len() * heads, k, k], out)?;
        Ok(self.unary(
            table,
            value,
            Op::GatherPairs {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `[b, c]` logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::dim("cross_entropy_logits", lv.shape(), &[labels.len()]));
        }
        let c = lv.shape()[1];
        check_rows("cross_entropy_logits", labels, c)?;
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.unary(x, value, Op::Mean(x))
    }

    /// Elementwise sign; never carries gradient.
    pub fn sign(&mut self, x: Var) -> Var {
        let value = self.value(x).sign();
        self.record(value, Op::Sign, false)
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).clamp(lo, hi);
        self.unary(x, value, Op::Clamp { x, lo, hi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        assert!(close(t.value(y).data(), &[1.0, 0.0], 1e-12));
    }

    #[test]
    fn layer_norm_reference_rows() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[4]));
        let b = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);

        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-300).unwrap();
        assert!(close(t.value(y).data(), &[-1.0, 1.0], 1e-12));
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(gelu(-10.0).abs() < 1e-6);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        for x in [-3.0, -0.7, 0.2, 1.5, 4.0] {
            let reference = 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2));
            assert!((gelu(x) - reference).abs() < 1e-15);
        }
    }

    #[test]
    fn gather_rows_picks_and_scatters() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let y = t.gather_rows(x, &[vec![2, 0]]).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0]);
        let id = t.gather_rows(x, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(t.value(id), t.value(x));

        let picked = t.gather_rows(x, &[vec![1]]).unwrap();
        let loss = t.sum(picked);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            t.gather_rows(x, &[vec![0, 3]]),
            Err(Error::Index { index: 3, len: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![10.0, -10.0]]));
        let ce = t.cross_entropy_logits(l, &[0]).unwrap();
        assert!(t.value(ce).item().unwrap() < 1e-6);

        let l = t.constant(Tensor::zeros(&[3, 5]));
        let ce = t.cross_entropy_logits(l, &[0, 4, 2]).unwrap();
        assert!((t.value(ce).item().unwrap() - 5f64.ln()).abs() < 1e-12);

        assert!(matches!(
            t.cross_entropy_logits(l, &[0, 5, 1]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_simple_losses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut t = Tape::new();
        let xv = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn backward_is_single_use_and_scalar_only() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2]));
        let unused = t.leaf(Tensor::ones(&[3]));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
        assert!(matches!(t.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn sign_and_clamp_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![-2.0, 0.5, 2.0]).unwrap());
        let s = t.sign(x);
        assert_eq!(t.value(s).data(), &[-1.0, 1.0, 1.0]);
        let c = t.clamp(x, -1.0, 1.0);
        let both = t.add(s, c).unwrap();
        let loss = t.sum(both);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn patchify_orders_grid_then_channel_row_col() {
        let mut t = Tape::new();
        let img = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.patchify(img, 1).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 4, 1]);
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let whole = t.patchify(img, 2).unwrap();
        assert_eq!(t.value(whole).shape(), &[1, 1, 4]);
        assert!(t.patchify(img, 3).is_err());
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let x = t.constant(Tensor::new(&[2, 3, 4], data).unwrap());
        let s = t.split_heads(x, 2).unwrap();
        assert_eq!(t.value(s).shape(), &[4, 3, 2]);
        // head 1 of batch 0, token 0 = columns 2..4 of row 0
        assert_eq!(&t.value(s).data()[6..8], &[2.0, 3.0]);
        let m = t.merge_heads(s, 2).unwrap();
        assert_eq!(t.value(m), t.value(x));
    }
}
