//! Exact small-scale attention arithmetic, used as the correctness oracle
//! for KVP's online-softmax merging of partial attention outputs.
//!
//! Everything here is 64-bit and unoptimized on purpose: these routines
//! exist to check numerics, not to be fast. Matrices are dense row-major
//! `Vec<Vec<f64>>`.
//!
//! Causal masking is expressed through `causal_offset`, the number of key
//! positions preceding the first query row *within the given key range*:
//! query row `r` may attend key row `j` iff `j <= causal_offset + r`. KV
//! shards cover contiguous key ranges, so a shard starting at global key
//! `s0` for queries whose first global position is `p0` uses
//! `causal_offset = p0 - s0` (possibly negative).

use crate::error::{Result, SimError};

pub type Mat = Vec<Vec<f64>>;

fn check_rect(name: &str, m: &Mat, cols: usize) -> Result<()> {
    for row in m {
        if row.len() != cols {
            return Err(SimError::DimensionMismatch(format!(
                "{name}: expected {cols} columns, found {}",
                row.len()
            )));
        }
    }
    Ok(())
}

fn check_shapes(q: &Mat, k: &Mat, v: &Mat) -> Result<usize> {
    let d = q.first().map(|r| r.len()).unwrap_or(0);
    if d == 0 || q.is_empty() {
        return Err(SimError::DimensionMismatch("empty query matrix".into()));
    }
    check_rect("Q", q, d)?;
    check_rect("K", k, d)?;
    check_rect("V", v, d)?;
    if k.len() != v.len() {
        return Err(SimError::DimensionMismatch(format!(
            "K has {} rows, V has {}",
            k.len(),
            v.len()
        )));
    }
    Ok(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise `softmax(Q K^T / sqrt(d) + causal mask) V` in one pass over the
/// full key range. Errors if dimensions disagree or a query row attends no
/// keys at all.
pub fn reference_attention(q: &Mat, k: &Mat, v: &Mat, causal_offset: i64) -> Result<Mat> {
    let d = check_shapes(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    for (r, q_row) in q.iter().enumerate() {
        let limit = causal_offset + r as i64; // inclusive highest key index
        let hi = (limit + 1).clamp(0, k.len() as i64) as usize;
        if hi == 0 {
            return Err(SimError::InvalidArgument(format!(
                "query row {r} attends no keys"
            )));
        }
        let logits: Vec<f64> = k[..hi].iter().map(|k_row| dot(q_row, k_row) * scale).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&s| (s - m).exp()).collect();
        let denom: f64 = weights.iter().sum();
        let mut row = vec![0.0; d];
        for (w, v_row) in weights.iter().zip(&v[..hi]) {
            for (acc, &x) in row.iter_mut().zip(v_row) {
                *acc += w * x;
            }
        }
        for x in &mut row {
            *x /= denom;
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-shard attention state in shifted-exponent space.
///
/// For query row `r`: `running_max[r]` is the maximum logit seen,
/// `running_denominator[r] = sum_j exp(s_j - max)`, and `partial_output[r] =
/// sum_j exp(s_j - max) * V_j`. A row that attends no key in the shard holds
/// `(-inf, 0, zeros)` and contributes nothing when merged.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    pub partial_output: Mat,
    pub running_max: Vec<f64>,
    pub running_denominator: Vec<f64>,
}

impl PartialAttention {
    pub fn query_rows(&self) -> usize {
        self.partial_output.len()
    }

    pub fn head_dim(&self) -> usize {
        self.partial_output.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// Computes the shifted-exponent partial state for one contiguous KV shard.
pub fn partial_attention(
    q: &Mat,
    k_shard: &Mat,
    v_shard: &Mat,
    causal_offset: i64,
) -> Result<PartialAttention> {
    if k_shard.is_empty() {
        return Err(SimError::EmptyInput("KV shard has no keys".into()));
    }
    let d = check_shapes(q, k_shard, v_shard)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut partial_output = Vec::with_capacity(q.len());
    let mut running_max = Vec::with_capacity(q.len());
    let mut running_denominator = Vec::with_capacity(q.len());
    for (r, q_row) in q.iter().enumerate() {
        let limit = causal_offset + r as i64;
        let hi = (limit + 1).clamp(0, k_shard.len() as i64) as usize;
        if hi == 0 {
            partial_output.push(vec![0.0; d]);
            running_max.push(f64::NEG_INFINITY);
            running_denominator.push(0.0);
            continue;
        }
        let logits: Vec<f64> =
            k_shard[..hi].iter().map(|k_row| dot(q_row, k_row) * scale).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let mut row = vec![0.0; d];
        for (&s, v_row) in logits.iter().zip(&v_shard[..hi]) {
            let w = (s - m).exp();
            denom += w;
            for (acc, &x) in row.iter_mut().zip(v_row) {
                *acc += w * x;
            }
        }
        partial_output.push(row);
        running_max.push(m);
        running_denominator.push(denom);
    }
    Ok(PartialAttention { partial_output, running_max, running_denominator })
}

/// Merges partial states into the exact softmax-attention output over the
/// union of their shards: re-shift every part to the global row maximum, sum
/// denominators and weighted outputs, then normalize. Permutation-invariant.
pub fn merge_partials(parts: &[PartialAttention]) -> Result<Mat> {
    let first = parts
        .first()
        .ok_or_else(|| SimError::EmptyInput("no partial states to merge".into()))?;
    let rows = first.query_rows();
    let d = first.head_dim();
    for p in parts {
        if p.query_rows() != rows || p.head_dim() != d {
            return Err(SimError::DimensionMismatch(format!(
                "partial state shape {}x{} does not match {}x{}",
                p.query_rows(),
                p.head_dim(),
                rows,
                d
            )));
        }
    }
    let mut out = vec![vec![0.0; d]; rows];
    for r in 0..rows {
        let global_max = parts
            .iter()
            .map(|p| p.running_max[r])
            .fold(f64::NEG_INFINITY, f64::max);
        if global_max == f64::NEG_INFINITY {
            return Err(SimError::InvalidArgument(format!(
                "query row {r} attends no keys in any shard"
            )));
        }
        let mut denom = 0.0;
        for p in parts {
            if p.running_denominator[r] == 0.0 {
                continue;
            }
            let shift = (p.running_max[r] - global_max).exp();
            denom += p.running_denominator[r] * shift;
            for (acc, &x) in out[r].iter_mut().zip(&p.partial_output[r]) {
                *acc += shift * x;
            }
        }
        for x in &mut out[r] {
            *x /= denom;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
        let scale = b
            .iter()
            .flatten()
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
            .max(1e-300);
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
            / scale
    }

    /// Unshifted plain-exponential softmax, deliberately a different code
    /// path from `reference_attention`'s max-shifted version.
    fn naive_double_loop(q: &Mat, k: &Mat, v: &Mat, causal_offset: i64) -> Mat {
        let d = q[0].len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![vec![0.0; d]; q.len()];
        for r in 0..q.len() {
            let hi = ((causal_offset + r as i64 + 1).max(0) as usize).min(k.len());
            let mut denom = 0.0;
            for j in 0..hi {
                denom += (dot(&q[r], &k[j]) * scale).exp();
            }
            for j in 0..hi {
                let w = (dot(&q[r], &k[j]) * scale).exp() / denom;
                for col in 0..d {
                    out[r][col] += w * v[j][col];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_identity() {
        // softmax over one logit is 1, so the output is exactly the V row.
        let q = vec![vec![0.3, -0.7]];
        let k = vec![vec![0.0, 0.0]]; // Q.K = 0
        let v = vec![vec![5.0, -2.0]];
        let out = reference_attention(&q, &k, &v, 0).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k_row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Mat = (0..6).map(|_| k_row.clone()).collect();
        let v = random_mat(&mut rng, 6, 4);
        for _ in 0..4 {
            let q = random_mat(&mut rng, 1, 4);
            let out = reference_attention(&q, &k, &v, 5).unwrap();
            for col in 0..4 {
                let mean: f64 = v.iter().map(|row| row[col]).sum::<f64>() / 6.0;
                assert!((out[0][col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (q_rows, n, d) = (4, 64, 8);
        let q = random_mat(&mut rng, q_rows, d);
        let k = random_mat(&mut rng, n, d);
        let v = random_mat(&mut rng, n, d);
        let offset = (n - q_rows) as i64;
        let reference = reference_attention(&q, &k, &v, offset).unwrap();
        let naive = naive_double_loop(&q, &k, &v, offset);
        assert!(max_rel_err(&reference, &naive) < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = vec![vec![0.0, 1.0]];
        let k = vec![vec![0.0, 1.0, 2.0]];
        let v = vec![vec![0.0, 1.0, 2.0]];
        assert!(reference_attention(&q, &k, &v, 0).is_err());
        assert!(partial_attention(&q, &k, &v, 0).is_err());
    }

    #[test]
    fn single_shard_finalize_equals_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_mat(&mut rng, 3, 6);
        let k = random_mat(&mut rng, 20, 6);
        let v = random_mat(&mut rng, 20, 6);
        let part = partial_attention(&q, &k, &v, 17).unwrap();
        let merged = merge_partials(&[part]).unwrap();
        let reference = reference_attention(&q, &k, &v, 17).unwrap();
        assert!(max_rel_err(&merged, &reference) < 1e-12);
    }

    #[test]
    fn one_key_shard_state() {
        let q = vec![vec![1.0, 0.0]];
        let k = vec![vec![0.5, 0.5]];
        let v = vec![vec![2.0, 3.0]];
        let part = partial_attention(&q, &k, &v, 0).unwrap();
        let logit = 0.5 / (2.0f64).sqrt();
        assert!((part.running_max[0] - logit).abs() < 1e-15);
        assert_eq!(part.running_denominator[0], 1.0); // exp(0)
    }

    #[test]
    fn disjoint_shards_merge_to_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (q_rows, n, d) = (4, 64, 8);
        let q = random_mat(&mut rng, q_rows, d);
        let k = random_mat(&mut rng, n, d);
        let v = random_mat(&mut rng, n, d);
        let offset = (n - q_rows) as i64;
        let split = 24usize;
        let p1 = partial_attention(&q, &k[..split].to_vec(), &v[..split].to_vec(), offset).unwrap();
        let p2 = partial_attention(
            &q,
            &k[split..].to_vec(),
            &v[split..].to_vec(),
            offset - split as i64,
        )
        .unwrap();
        let merged = merge_partials(&[p1, p2]).unwrap();
        let reference = reference_attention(&q, &k, &v, offset).unwrap();
        assert!(max_rel_err(&merged, &reference) < 1e-6);
    }

    #[test]
    fn merge_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (q_rows, n, d) = (2, 48, 4);
        let q = random_mat(&mut rng, q_rows, d);
        let k = random_mat(&mut rng, n, d);
        let v = random_mat(&mut rng, n, d);
        let offset = (n - q_rows) as i64;
        let bounds = [0usize, 12, 20, 48];
        let parts: Vec<_> = bounds
            .windows(2)
            .map(|w| {
                partial_attention(
                    &q,
                    &k[w[0]..w[1]].to_vec(),
                    &v[w[0]..w[1]].to_vec(),
                    offset - w[0] as i64,
                )
                .unwrap()
            })
            .collect();
        let forward = merge_partials(&parts).unwrap();
        let reversed: Vec<_> = parts.iter().rev().cloned().collect();
        let backward = merge_partials(&reversed).unwrap();
        assert!(max_rel_err(&forward, &backward) < 1e-9);
    }

    #[test]
    fn merge_errors() {
        assert!(merge_partials(&[]).is_err());
        let q = vec![vec![0.0, 1.0]];
        let k = vec![vec![0.0, 1.0]];
        let v = vec![vec![0.0, 1.0]];
        let a = partial_attention(&q, &k, &v, 0).unwrap();
        let q3 = vec![vec![0.0, 1.0, 2.0]];
        let k3 = vec![vec![0.0, 1.0, 2.0]];
        let v3 = vec![vec![0.0, 1.0, 2.0]];
        let b = partial_attention(&q3, &k3, &v3, 0).unwrap();
        assert!(merge_partials(&[a, b]).is_err());
    }

    #[test]
    fn output_rows_are_convex_combinations_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.random_range(2..32);
            let d = rng.random_range(1..8);
            let q = random_mat(&mut rng, 2, d);
            let k = random_mat(&mut rng, n, d);
            let v = random_mat(&mut rng, n, d);
            let offset = (n - 2) as i64;
            let out = reference_attention(&q, &k, &v, offset).unwrap();
            for (r, row) in out.iter().enumerate() {
                let hi = (offset as usize + r + 1).min(n);
                for col in 0..d {
                    let lo_v =
                        v[..hi].iter().map(|x| x[col]).fold(f64::INFINITY, f64::min);
                    let hi_v =
                        v[..hi].iter().map(|x| x[col]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(row[col] >= lo_v - 1e-9 && row[col] <= hi_v + 1e-9);
                }
            }
        }
    }
}
