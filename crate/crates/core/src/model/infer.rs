//! Eager inference forward and greedy decoding.

use serde::{Deserialize, Serialize};

use super::{names, split_input, ModelConfig, ModelParams, SequenceInput};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, gemm, softmax_in_place};
use crate::tensor::Tensor;

/// Attention implementation used by the eager path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKernel {
    /// Full score matrix, masked softmax, then `P·V`.
    Naive,
    /// Key blocks with a running max and normaliser; never materialises the
    /// full score matrix. `causal: false` exists only as a negative control.
    Blocked { block: usize, causal: bool },
}

impl AttentionKernel {
    pub fn blocked(block: usize) -> Self {
        Self::Blocked {
            block,
            causal: true,
        }
    }
}

/// Per-head queries and keys after their norms, before rotation.
#[derive(Debug, Clone)]
pub struct HeadQk {
    pub q: Tensor,
    pub k: Tensor,
}

fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(n * len);
    for r in 0..n {
        out.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
    }
    Tensor::from_parts(vec![n, len], out)
}

fn key_allowed(i: usize, j: usize, causal: bool, key_valid: Option<&[bool]>) -> bool {
    (!causal || j <= i) && key_valid.is_none_or(|v| v[j])
}

/// Reference kernel. `q`, `k`, `v` are `n × d`.
pub fn attention_naive(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_valid: Option<&[bool]>,
) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; n * n];
    gemm(n, d, n, q.data(), false, k.data(), true, &mut scores, 0.0);
    for (i, row) in scores.chunks_mut(n).enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            *s = if key_allowed(i, j, true, key_valid) {
                *s * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        softmax_in_place(row)?;
    }
    let mut out = vec![0.0; n * d];
    gemm(n, n, d, &scores, false, v.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Online-softmax kernel over `block × block` tiles.
pub fn attention_blocked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_valid: Option<&[bool]>,
    block: usize,
    causal: bool,
) -> Result<Tensor> {
    if block == 0 {
        return Err(Error::config("attention block size must be >= 1"));
    }
    let (n, d) = q.dims2()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut s = vec![0.0; block * block];
    for i0 in (0..n).step_by(block) {
        let i1 = (i0 + block).min(n);
        let bq = i1 - i0;
        let mut m = vec![f64::NEG_INFINITY; bq];
        let mut l = vec![0.0; bq];
        let acc = &mut out[i0 * d..i1 * d];
        for j0 in (0..n).step_by(block) {
            if causal && j0 >= i1 {
                break;
            }
            let j1 = (j0 + block).min(n);
            let bk = j1 - j0;
            let tile = &mut s[..bq * bk];
            gemm(
                bq,
                d,
                bk,
                &q.data()[i0 * d..i1 * d],
                false,
                &k.data()[j0 * d..j1 * d],
                true,
                tile,
                0.0,
            );
            for r in 0..bq {
                let row = &mut tile[r * bk..(r + 1) * bk];
                let mut row_max = f64::NEG_INFINITY;
                for (c, x) in row.iter_mut().enumerate() {
                    if key_allowed(i0 + r, j0 + c, causal, key_valid) {
                        *x *= scale;
                        row_max = row_max.max(*x);
                    } else {
                        *x = f64::NEG_INFINITY;
                    }
                }
                if row_max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let m_new = m[r].max(row_max);
                let corr = (m[r] - m_new).exp();
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m_new).exp();
                    sum += *x;
                }
                l[r] = l[r] * corr + sum;
                m[r] = m_new;
                for a in &mut acc[r * d..(r + 1) * d] {
                    *a *= corr;
                }
            }
            gemm(
                bq,
                bk,
                d,
                tile,
                false,
                &v.data()[j0 * d..j1 * d],
                false,
                acc,
                1.0,
            );
        }
        for r in 0..bq {
            if l[r] == 0.0 {
                return Err(Error::Numeric {
                    op: "attention_blocked",
                    detail: format!("query {} has no visible key", i0 + r),
                });
            }
            for a in &mut acc[r * d..(r + 1) * d] {
                *a /= l[r];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

fn embed(params: &ModelParams, input: &SequenceInput) -> Result<Tensor> {
    let cfg = params.config();
    let split = split_input(cfg, input)?;
    let h = cfg.hidden;
    let mut rows: Vec<f64> = Vec::with_capacity((split.order.len()) * h);
    if let Some(p) = &split.patches {
        let proj = ops::matmul(p, params.get(names::PATCH_WEIGHT)?)?;
        rows.extend_from_slice(ops::add_row(&proj, params.get(names::PATCH_BIAS)?)?.data());
    }
    let table = params.get(names::TOKEN_EMBEDDING)?;
    for &id in &split.token_ids {
        rows.extend_from_slice(table.row(id));
    }
    let mut x = Vec::with_capacity(split.order.len() * h);
    for &r in &split.order {
        x.extend_from_slice(&rows[r * h..(r + 1) * h]);
    }
    Ok(Tensor::from_parts(vec![split.order.len(), h], x))
}

fn norm(params: &ModelParams, cfg: &ModelConfig, x: &Tensor, prefix: &str) -> Result<Tensor> {
    ops::layer_norm(
        x,
        params.get(&format!("{prefix}.gain"))?,
        params.get(&format!("{prefix}.bias"))?,
        cfg.ln_eps,
    )
}

fn run(
    params: &ModelParams,
    input: &SequenceInput,
    kernel: AttentionKernel,
    key_valid: Option<&[bool]>,
    mut trace: Option<&mut Vec<Vec<HeadQk>>>,
) -> Result<Tensor> {
    let cfg = params.config();
    let mut x = embed(params, input)?;
    let n = x.shape()[0];
    if let Some(kv) = key_valid {
        if kv.len() != n {
            return Err(Error::Shape {
                op: "logits",
                lhs: vec![n],
                rhs: vec![kv.len()],
            });
        }
    }
    let positions: Vec<usize> = (0..n).collect();
    let hd = cfg.head_dim();
    for l in 0..cfg.n_layers {
        let p = |s: &str| names::layer(l, s);
        let h = norm(params, cfg, &x, &p("attn_norm"))?;
        let q = ops::matmul(&h, params.get(&p("attn.wq"))?)?;
        let k = ops::matmul(&h, params.get(&p("attn.wk"))?)?;
        let v = ops::matmul(&h, params.get(&p("attn.wv"))?)?;
        let mut cat = vec![0.0; n * cfg.hidden];
        let mut layer_trace = Vec::new();
        for head in 0..cfg.n_heads {
            let qh = norm(
                params,
                cfg,
                &slice_cols(&q, head * hd, hd),
                &p("attn.q_norm"),
            )?;
            let kh = norm(
                params,
                cfg,
                &slice_cols(&k, head * hd, hd),
                &p("attn.k_norm"),
            )?;
            let vh = slice_cols(&v, head * hd, hd);
            let qr = ops::rope(&qh, &positions, cfg.rope_base, false)?;
            let kr = ops::rope(&kh, &positions, cfg.rope_base, false)?;
            if trace.is_some() {
                layer_trace.push(HeadQk { q: qh, k: kh });
            }
            let o = match kernel {
                AttentionKernel::Naive => attention_naive(&qr, &kr, &vh, key_valid)?,
                AttentionKernel::Blocked { block, causal } => {
                    attention_blocked(&qr, &kr, &vh, key_valid, block, causal)?
                }
            };
            for r in 0..n {
                cat[r * cfg.hidden + head * hd..r * cfg.hidden + (head + 1) * hd]
                    .copy_from_slice(o.row(r));
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(layer_trace);
        }
        let cat = Tensor::from_parts(vec![n, cfg.hidden], cat);
        x = ops::add(&x, &ops::matmul(&cat, params.get(&p("attn.wo"))?)?)?;
        let h = norm(params, cfg, &x, &p("mlp_norm"))?;
        let up = ops::relu_sq(&ops::matmul(&h, params.get(&p("mlp.up"))?)?);
        x = ops::add(&x, &ops::matmul(&up, params.get(&p("mlp.down"))?)?)?;
    }
    let x = norm(params, cfg, &x, "final_norm")?;
    ops::matmul(&x, params.get(names::OUTPUT_HEAD)?)
}

/// Logits `n × vocab` without building a differentiation graph.
pub fn logits(
    params: &ModelParams,
    input: &SequenceInput,
    kernel: AttentionKernel,
    key_valid: Option<&[bool]>,
) -> Result<Tensor> {
    run(params, input, kernel, key_valid, None)
}

/// Normalised per-head queries and keys of every layer, before rotation.
pub fn trace_qk(params: &ModelParams, input: &SequenceInput) -> Result<Vec<Vec<HeadQk>>> {
    let mut trace = Vec::new();
    run(
        params,
        input,
        AttentionKernel::Naive,
        None,
        Some(&mut trace),
    )?;
    Ok(trace)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax token until `eos` (included in the output) or
/// `max_new` tokens. Ties go to the lowest id.
pub fn decode_greedy(
    params: &ModelParams,
    prompt: &SequenceInput,
    max_new: usize,
    eos: u32,
    kernel: AttentionKernel,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::contract("max_new_tokens must be >= 1"));
    }
    let max_seq = params.config().max_seq;
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= max_seq {
            return Err(Error::Capacity {
                len: seq.len() + 1,
                max_seq,
            });
        }
        let logits = logits(params, &seq, kernel, None)?;
        let next = argmax(logits.row(seq.len() - 1)) as u32;
        out.push(next);
        if next == eos {
            break;
        }
        seq.push_token(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv(n: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[n, d], 1.0, &mut r),
            Tensor::randn(&[n, d], 1.0, &mut r),
            Tensor::randn(&[n, d], 1.0, &mut r),
        )
    }

    #[test]
    fn blocked_matches_naive_across_block_sizes() {
        let (q, k, v) = qkv(37, 8, 1);
        let reference = attention_naive(&q, &k, &v, None).unwrap();
        for block in [1, 4, 16, 37, 64] {
            let fast = attention_blocked(&q, &k, &v, None, block, true).unwrap();
            assert!(
                reference.max_abs_diff(&fast).unwrap() < 1e-12,
                "block {block}"
            );
        }
    }

    #[test]
    fn padding_keys_are_ignored() {
        let (q, k, v) = qkv(6, 4, 2);
        let valid = [true, true, true, false, true, false];
        let a = attention_naive(&q, &k, &v, Some(&valid)).unwrap();
        let b = attention_blocked(&q, &k, &v, Some(&valid), 2, true).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        // query 4 sees keys 0,1,2,4 only: changing key 3 must not matter
        let mut k2 = k.clone();
        k2.data_mut()[3 * 4] += 5.0;
        let c = attention_naive(&q, &k2, &v, Some(&valid)).unwrap();
        assert_eq!(a.row(4), c.row(4));
    }

    #[test]
    fn dropping_the_causal_mask_changes_early_rows() {
        let (q, k, v) = qkv(10, 4, 3);
        let a = attention_naive(&q, &k, &v, None).unwrap();
        let b = attention_blocked(&q, &k, &v, None, 4, false).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
        // the last row sees everything either way
        let last = a
            .row(9)
            .iter()
            .zip(b.row(9))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(last < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn zero_block_is_rejected() {
        let (q, k, v) = qkv(2, 2, 4);
        assert!(attention_blocked(&q, &k, &v, None, 0, true).is_err());
    }
}
