//! Multi-head scaled dot-product attention over an explicit query→key pattern.
//!
//! Global, window and correlation attention differ only in which keys each
//! query may see, so all three lower onto one kernel that takes the allowed
//! key set per query in compressed-row form.

use crate::error::{config_err, Result};

/// Allowed keys per query, plus an optional relative-position bias row for
/// every (query, key) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPattern {
    n_queries: usize,
    n_keys: usize,
    offsets: Vec<usize>,
    keys: Vec<usize>,
    bias_rows: Option<(Vec<usize>, usize)>,
}

impl AttentionPattern {
    /// Every query sees every key.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        let lists = (0..n_queries).map(|_| (0..n_keys).collect()).collect();
        Self::from_lists(n_keys, lists).expect("dense pattern is always valid")
    }

    pub fn from_lists(n_keys: usize, lists: Vec<Vec<usize>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for (q, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return config_err(format!("query {q} has no keys"));
            }
            if let Some(&k) = list.iter().find(|&&k| k >= n_keys) {
                return config_err(format!("query {q} references key {k} >= {n_keys}"));
            }
            keys.extend_from_slice(list);
            offsets.push(keys.len());
        }
        Ok(Self {
            n_queries: lists.len(),
            n_keys,
            offsets,
            keys,
            bias_rows: None,
        })
    }

    /// Attach a bias-table row index to every entry, in entry order.
    pub fn with_bias(mut self, rows: Vec<usize>, table_rows: usize) -> Result<Self> {
        if rows.len() != self.keys.len() {
            return config_err("bias index count does not match pattern entries");
        }
        if rows.iter().any(|&r| r >= table_rows) {
            return config_err("bias index out of range");
        }
        self.bias_rows = Some((rows, table_rows));
        Ok(self)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    /// Total number of (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn keys_of(&self, q: usize) -> &[usize] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn bias_table_rows(&self) -> Option<usize> {
        self.bias_rows.as_ref().map(|(_, n)| *n)
    }

    pub fn bias_row(&self, entry: usize) -> Option<usize> {
        self.bias_rows.as_ref().map(|(r, _)| r[entry])
    }

    pub(crate) fn entries(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }

    pub(crate) fn key_at(&self, entry: usize) -> usize {
        self.keys[entry]
    }
}

/// Forward pass. `q` is `n_q × d`, `k`/`v` are `n_k × d`, `bias` is
/// `table_rows × heads`. Returns the output and the attention probabilities
/// (`nnz × heads`) for the backward pass.
pub fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    pattern: &AttentionPattern,
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; pattern.n_queries * d];
    let mut probs = vec![0.0; pattern.nnz() * heads];
    let mut scores = Vec::new();
    for qi in 0..pattern.n_queries {
        let range = pattern.entries(qi);
        for h in 0..heads {
            let qv = &q[qi * d + h * dh..qi * d + (h + 1) * dh];
            scores.clear();
            for e in range.clone() {
                let kj = pattern.key_at(e);
                let kv = &k[kj * d + h * dh..kj * d + (h + 1) * dh];
                let mut s = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>() * scale;
                if let (Some(b), Some(row)) = (bias, pattern.bias_row(e)) {
                    s += b[row * heads + h];
                }
                scores.push(s);
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let o = &mut out[qi * d + h * dh..qi * d + (h + 1) * dh];
            for (n, e) in range.clone().enumerate() {
                let p = scores[n] / z;
                probs[e * heads + h] = p;
                let kj = pattern.key_at(e);
                let vv = &v[kj * d + h * dh..kj * d + (h + 1) * dh];
                for (ov, &x) in o.iter_mut().zip(vv) {
                    *ov += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradient buffers for [`backward`]; `None` entries are skipped.
pub struct AttentionGrads<'a> {
    pub dq: Option<&'a mut [f64]>,
    pub dk: Option<&'a mut [f64]>,
    pub dv: Option<&'a mut [f64]>,
    pub dbias: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: usize,
    heads: usize,
    pattern: &AttentionPattern,
    mut grads: AttentionGrads<'_>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    for qi in 0..pattern.n_queries {
        let range = pattern.entries(qi);
        for h in 0..heads {
            let go = &dout[qi * d + h * dh..qi * d + (h + 1) * dh];
            dp.clear();
            let mut dot = 0.0;
            for e in range.clone() {
                let kj = pattern.key_at(e);
                let vv = &v[kj * d + h * dh..kj * d + (h + 1) * dh];
                let g = go.iter().zip(vv).map(|(a, b)| a * b).sum::<f64>();
                dot += probs[e * heads + h] * g;
                dp.push(g);
                if let Some(dv) = grads.dv.as_deref_mut() {
                    let p = probs[e * heads + h];
                    for (t, &x) in dv[kj * d + h * dh..kj * d + (h + 1) * dh].iter_mut().zip(go) {
                        *t += p * x;
                    }
                }
            }
            for (n, e) in range.clone().enumerate() {
                let ds = probs[e * heads + h] * (dp[n] - dot);
                let kj = pattern.key_at(e);
                if let Some(dq) = grads.dq.as_deref_mut() {
                    let kv = &k[kj * d + h * dh..kj * d + (h + 1) * dh];
                    for (t, &x) in dq[qi * d + h * dh..qi * d + (h + 1) * dh].iter_mut().zip(kv) {
                        *t += ds * scale * x;
                    }
                }
                if let Some(dk) = grads.dk.as_deref_mut() {
                    let qv = &q[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for (t, &x) in dk[kj * d + h * dh..kj * d + (h + 1) * dh].iter_mut().zip(qv) {
                        *t += ds * scale * x;
                    }
                }
                if let (Some(db), Some(row)) = (grads.dbias.as_deref_mut(), pattern.bias_row(e)) {
                    db[row * heads + h] += ds;
                }
            }
        }
    }
}
