//! Float kernels shared by the autodiff tape and the plain inference path.
//!
//! Both paths call these functions so float-mode logits agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// RMS normalization of each row followed by a per-column gain. Returns the
/// normalized tensor and the per-row reciprocal RMS values.
pub fn rms_norm(x: &FloatTensor, gain: &FloatTensor, eps: f32) -> Result<(FloatTensor, Vec<f32>)> {
    let (rows, cols) = x.matrix_dims("rms_norm")?;
    if gain.dims() != [cols] {
        return Err(Error::shape("rms_norm", x.dims(), gain.dims()));
    }
    let g = gain.data();
    let mut out = Vec::with_capacity(rows * cols);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().fold(0.0f32, |a, &v| a + v * v) / cols as f32;
        let rinv = 1.0 / (ms + eps).sqrt();
        inv.push(rinv);
        out.extend(row.iter().zip(g).map(|(&v, &gv)| v * rinv * gv));
    }
    Ok((FloatTensor::from_vec(x.shape().clone(), out)?, inv))
}

/// Adds `bias[N]` to every row of `x[M×N]`.
pub fn add_bias(x: &FloatTensor, bias: &FloatTensor) -> Result<FloatTensor> {
    let (_, cols) = x.matrix_dims("add_bias")?;
    if bias.dims() != [cols] {
        return Err(Error::shape("add_bias", x.dims(), bias.dims()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gathers rows of `table` by id.
pub fn embedding(table: &FloatTensor, ids: &[u32]) -> Result<FloatTensor> {
    let (vocab, dim) = table.matrix_dims("embedding")?;
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        out.extend_from_slice(table.row(id as usize));
    }
    FloatTensor::from_vec(Shape::matrix(ids.len(), dim)?, out)
}

/// Causal multi-head attention for one sequence.
///
/// `q` holds `tq` query rows whose absolute positions start at `q_offset`;
/// `k` and `v` hold `tk ≥ q_offset + tq` key/value rows from position 0.
/// Query row `i` attends to key rows `0..=q_offset + i`. When `probs` is
/// given it receives the attention weights laid out `[head][i][j]` with
/// `j < tk` (masked entries zero).
pub fn causal_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tq: usize,
    tk: usize,
    dim: usize,
    n_heads: usize,
    q_offset: usize,
    out: &mut [f32],
    mut probs: Option<&mut [f32]>,
) {
    let dh = dim / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0.0f32; tk];
    for h in 0..n_heads {
        let c0 = h * dh;
        for i in 0..tq {
            let q_row = &q[i * dim + c0..i * dim + c0 + dh];
            let visible = q_offset + i + 1;
            let mut max = f32::NEG_INFINITY;
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                let k_row = &k[j * dim + c0..j * dim + c0 + dh];
                let dot = q_row.iter().zip(k_row).fold(0.0f32, |a, (&x, &y)| a + x * y);
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut denom = 0.0f32;
            for s in &mut scores[..visible] {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in &mut scores[..visible] {
                *s /= denom;
            }
            let o_row = &mut out[i * dim + c0..i * dim + c0 + dh];
            o_row.fill(0.0);
            for (j, &p) in scores[..visible].iter().enumerate() {
                let v_row = &v[j * dim + c0..j * dim + c0 + dh];
                for (o, &vv) in o_row.iter_mut().zip(v_row) {
                    *o += p * vv;
                }
            }
            if let Some(p) = probs.as_deref_mut() {
                let base = (h * tq + i) * tk;
                p[base..base + visible].copy_from_slice(&scores[..visible]);
                p[base + visible..base + tk].fill(0.0);
            }
        }
    }
}

/// Mean next-token negative log-likelihood (nats) and the row softmax.
pub fn cross_entropy(logits: &FloatTensor, targets: &[u32]) -> Result<(f32, FloatTensor)> {
    let (rows, vocab) = logits.matrix_dims("cross_entropy")?;
    if targets.is_empty() {
        return Err(Error::Empty("cross_entropy targets"));
    }
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy", logits.dims(), &[targets.len()]));
    }
    let mut probs = Vec::with_capacity(rows * vocab);
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x));
        let start = probs.len();
        let mut denom = 0.0f32;
        for &x in row {
            let e = (x - max).exp();
            denom += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= denom;
        }
        let nll = denom.ln() + max - row[t as usize];
        total += nll as f64;
    }
    let mean = (total / rows as f64) as f32;
    Ok((mean, FloatTensor::from_vec(logits.shape().clone(), probs)?))
}

/// Summed NLL in f64, used by perplexity evaluation.
pub fn nll_sum(logits: &FloatTensor, targets: &[u32]) -> Result<f64> {
    let (rows, vocab) = logits.matrix_dims("nll_sum")?;
    if targets.len() != rows {
        return Err(Error::shape("nll_sum", logits.dims(), &[targets.len()]));
    }
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x));
        let denom = row.iter().fold(0.0f32, |a, &x| a + (x - max).exp());
        total += (denom.ln() + max - row[t as usize]) as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-3f64;
            let f = |v: f64| {
                let t = (0.797_884_560_8 * (v + 0.044_715 * v * v * v)).tanh();
                0.5 * v * (1.0 + t)
            };
            let fd = (f(x as f64 + h) - f(x as f64 - h)) / (2.0 * h);
            assert!((gelu_grad(x) as f64 - fd).abs() < 1e-4, "x={x}");
        }
    }

    #[test]
    fn hand_softmax_nll() {
        // Row 0 favors token 0 with logits [ln2, 0, 0]: p = [1/2, 1/4, 1/4].
        let l2 = std::f32::consts::LN_2;
        let logits = FloatTensor::from_rows(&[&[l2, 0.0, 0.0], &[0.0, l2, 0.0], &[0.0, 0.0, 0.0]]).unwrap();
        let (mean, _) = cross_entropy(&logits, &[0, 2, 1]).unwrap();
        let expected = ((2.0f64).ln() + (4.0f64).ln() + (3.0f64).ln()) / 3.0;
        assert!((mean as f64 - expected).abs() < 1e-6);
        let sum = nll_sum(&logits, &[0, 2, 1]).unwrap();
        assert!((sum - 3.0 * expected).abs() < 1e-5);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = FloatTensor::zeros(Shape::matrix(4, 256).unwrap());
        let (mean, _) = cross_entropy(&logits, &[1, 2, 3, 4]).unwrap();
        assert!((mean.exp() - 256.0).abs() < 1e-3);
    }

    #[test]
    fn empty_targets_rejected() {
        let logits = FloatTensor::zeros(Shape::matrix(1, 4).unwrap());
        assert!(matches!(cross_entropy(&logits, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn attention_first_row_copies_first_value() {
        let (dim, heads) = (4, 2);
        let q = [0.3, -0.1, 0.8, 0.2, 0.5, 0.5, -0.5, 0.1];
        let k = [0.1, 0.2, 0.3, 0.4, -0.2, 0.6, 0.0, 0.9];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f32; 8];
        causal_attention(&q, &k, &v, 2, 2, dim, heads, 0, &mut out, None);
        assert_eq!(&out[..4], &v[..4]);
        // Second row is a convex combination of the two value rows.
        for c in 0..4 {
            assert!(out[4 + c] >= v[c].min(v[4 + c]) && out[4 + c] <= v[c].max(v[4 + c]));
        }
    }
}
