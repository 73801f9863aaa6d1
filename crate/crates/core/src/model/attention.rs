//! Attention heads of the MHAR layer and the interval matrices they index.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Scalar, Tape, Var};

/// `TI[i][j] = min(|days[j] − days[i]|, k_t)` for one row of days.
pub fn compute_ti(days: &[i64], kt: usize) -> Vec<u32> {
    let n = days.len();
    let mut out = Vec::with_capacity(n * n);
    for &di in days {
        for &dj in days {
            out.push((dj - di).unsigned_abs().min(kt as u64) as u32);
        }
    }
    out
}

/// `PI[i][j] = max(−k_p, min(j − i, k_p))`.
pub fn compute_pi(n: usize, kp: usize) -> Vec<i64> {
    let k = kp as i64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            out.push((j - i).clamp(-k, k));
        }
    }
    out
}

/// Row indices into the `(2k_p + 1)`-row position-interval table.
pub fn pi_table_index(n: usize, kp: usize) -> Arc<[u32]> {
    compute_pi(n, kp).into_iter().map(|p| (p + kp as i64) as u32).collect()
}

/// Time-interval table indices for a whole batch of `[B×n]` days.
pub fn ti_table_index(days: &[i64], batch: usize, n: usize, kt: usize) -> Arc<[u32]> {
    let mut out = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        out.extend(compute_ti(&days[b * n..(b + 1) * n], kt));
    }
    out.into()
}

/// Per-head projections, all `[d×d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Shared per-batch context for every head.
pub struct HeadInput<'a> {
    /// Layer input, `[B·n × d]`.
    pub h: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// `[B·n]`, true on real tokens.
    pub key_mask: &'a [bool],
}

/// Head output `[B·n × d_h]` and its attention weights `[B×n×n]`.
pub struct HeadOutput {
    pub out: Var,
    pub weights: Var,
}

fn attend<T: Scalar>(tape: &mut Tape<T>, scores: Var, v: Var, input: &HeadInput<'_>, dh: usize) -> Result<HeadOutput> {
    let scaled = tape.scale(scores, T::one() / T::from_usize(dh).expect("dim").sqrt());
    let weights = tape.softmax_masked(scaled, input.key_mask)?;
    let v3 = tape.reshape(v, &[input.batch, input.seq_len, dh])?;
    let ctx = tape.batch_matmul(weights, v3)?;
    let out = tape.reshape(ctx, &[input.batch * input.seq_len, dh])?;
    Ok(HeadOutput { out, weights })
}

/// Self-attention whose queries and keys see item content plus an absolute
/// context embedding: `Q = (H + E)W_Q`, `K = (H + E)W_K`, `V = H·W_V`.
/// `e_abs` is `[B·n × d]`; `None` gives a plain content-only head.
pub fn absolute_head<T: Scalar>(
    tape: &mut Tape<T>,
    input: &HeadInput<'_>,
    e_abs: Option<Var>,
    proj: Projections,
) -> Result<HeadOutput> {
    let x = match e_abs {
        Some(e) => tape.add(input.h, e)?,
        None => input.h,
    };
    let q = tape.matmul(x, proj.w_q)?;
    let k = tape.matmul(x, proj.w_k)?;
    let v = tape.matmul(input.h, proj.w_v)?;
    let dh = tape.shape(q)[1];
    let (b, n) = (input.batch, input.seq_len);
    let q3 = tape.reshape(q, &[b, n, dh])?;
    let k3 = tape.reshape(k, &[b, n, dh])?;
    let scores = tape.batch_matmul_bt(q3, k3)?;
    attend(tape, scores, v, input, dh)
}

/// Relative embeddings for a relative head.
pub struct Relative {
    /// Interval embedding table `[R×d]` (`M_RT` or `M_RP`).
    pub table: Var,
    /// Projection of interval embeddings into the head, `[d×d_h]`.
    pub w_r: Var,
    /// Content bias `u` and interval bias `w`, both `[d_h]`.
    pub u: Var,
    pub w: Var,
    /// Table row for each `(i, j)`: one `n×n` block or one per batch row.
    pub index: Arc<[u32]>,
}

/// Transformer-XL style head:
/// `s_ij = (q_iᵀk_j + q_iᵀr_ij + uᵀk_j + wᵀr_ij) / √d_h`
/// computed as `(q_i + u)ᵀk_j + (q_i + w)ᵀr_ij` with `r_ij = table[index_ij]·W_R`.
pub fn relative_head<T: Scalar>(
    tape: &mut Tape<T>,
    input: &HeadInput<'_>,
    rel: &Relative,
    proj: Projections,
) -> Result<HeadOutput> {
    let q = tape.matmul(input.h, proj.w_q)?;
    let k = tape.matmul(input.h, proj.w_k)?;
    let v = tape.matmul(input.h, proj.w_v)?;
    let dh = tape.shape(q)[1];
    let (b, n) = (input.batch, input.seq_len);
    let projected = tape.matmul(rel.table, rel.w_r)?;
    let qu = tape.add_bias(q, rel.u)?;
    let qw = tape.add_bias(q, rel.w)?;
    let qu3 = tape.reshape(qu, &[b, n, dh])?;
    let qw3 = tape.reshape(qw, &[b, n, dh])?;
    let k3 = tape.reshape(k, &[b, n, dh])?;
    let content = tape.batch_matmul_bt(qu3, k3)?;
    let positional = tape.gather_dot(qw3, projected, rel.index.clone())?;
    let scores = tape.add(content, positional)?;
    attend(tape, scores, v, input, dh)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn ti_examples() {
        assert_eq!(compute_ti(&[0, 3, 200], 128), vec![0, 3, 128, 3, 0, 128, 128, 128, 0]);
        assert!(compute_ti(&[5, 5, 5, 5], 10).iter().all(|&v| v == 0));
    }

    #[test]
    fn pi_examples() {
        assert_eq!(compute_pi(3, 2), vec![0, 1, 2, -1, 0, 1, -2, -1, 0]);
        assert_eq!(compute_pi(5, 2)[4], 2);
        assert_eq!(&*pi_table_index(3, 2), &[2, 3, 4, 1, 2, 3, 0, 1, 2]);
    }

    proptest! {
        #[test]
        fn ti_is_clipped_symmetric_with_zero_diagonal(days in prop::collection::vec(0i64..2000, 1..20), kt in 1usize..600) {
            let n = days.len();
            let ti = compute_ti(&days, kt);
            for i in 0..n {
                prop_assert_eq!(ti[i * n + i], 0);
                for j in 0..n {
                    prop_assert!(ti[i * n + j] as usize <= kt);
                    prop_assert_eq!(ti[i * n + j], ti[j * n + i]);
                }
            }
        }

        #[test]
        fn pi_is_antisymmetric_inside_the_clip(n in 1usize..30, kp in 1usize..5) {
            let pi = compute_pi(n, kp);
            for i in 0..n {
                prop_assert_eq!(pi[i * n + i], 0);
                for j in 0..n {
                    prop_assert!(pi[i * n + j].unsigned_abs() as usize <= kp);
                    prop_assert_eq!(pi[i * n + j], -pi[j * n + i]);
                }
            }
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn weights(tape: &Tape<f64>, v: Var) -> Vec<f64> {
        tape.value(v).values().to_vec()
    }

    #[test]
    fn zero_absolute_context_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, n, d, dh) = (2, 3, 4, 2);
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(rand_tensor(&[b * n, d], &mut rng));
        let proj = Projections {
            w_q: tape.constant(rand_tensor(&[d, dh], &mut rng)),
            w_k: tape.constant(rand_tensor(&[d, dh], &mut rng)),
            w_v: tape.constant(rand_tensor(&[d, dh], &mut rng)),
        };
        let mask = vec![true; b * n];
        let input = HeadInput { h, batch: b, seq_len: n, key_mask: &mask };
        let zero = tape.constant(Tensor::zeros(&[b * n, d]));
        let with = absolute_head(&mut tape, &input, Some(zero), proj).unwrap();
        let without = absolute_head(&mut tape, &input, None, proj).unwrap();
        assert_eq!(weights(&tape, with.weights), weights(&tape, without.weights));
        assert_eq!(weights(&tape, with.out), weights(&tape, without.out));
    }

    #[test]
    fn single_unmasked_key_returns_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (3, 2);
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(rand_tensor(&[n, d], &mut rng));
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let proj = Projections {
            w_q: tape.constant(rand_tensor(&[d, d], &mut rng)),
            w_k: tape.constant(rand_tensor(&[d, d], &mut rng)),
            w_v: tape.constant(eye),
        };
        let mask = vec![false, false, true];
        let input = HeadInput { h, batch: 1, seq_len: n, key_mask: &mask };
        let out = absolute_head(&mut tape, &input, None, proj).unwrap();
        let v = tape.value(h).row(2).to_vec();
        for i in 0..n {
            assert_eq!(tape.value(out.out).row(i), v.as_slice());
        }
    }

    #[test]
    fn absolute_time_breaks_permutation_invariance() {
        // Swapping two identical-content tokens changes nothing for a content
        // head, but moves their distinct time rows and so changes the scores.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (3, 4);
        let mut tape = Tape::<f64>::new();
        let content = rand_tensor(&[1, d], &mut rng).into_values();
        let mut rows = Vec::new();
        for _ in 0..n {
            rows.extend_from_slice(&content);
        }
        let h = tape.constant(Tensor::new(vec![n, d], rows).unwrap());
        let time_rows: Vec<Vec<f64>> = (0..n).map(|_| rand_tensor(&[d], &mut rng).into_values()).collect();
        let e1 = tape.constant(Tensor::from_rows(&time_rows));
        let swapped = vec![time_rows[1].clone(), time_rows[0].clone(), time_rows[2].clone()];
        let e2 = tape.constant(Tensor::from_rows(&swapped));
        let proj = Projections {
            w_q: tape.constant(rand_tensor(&[d, 2], &mut rng)),
            w_k: tape.constant(rand_tensor(&[d, 2], &mut rng)),
            w_v: tape.constant(rand_tensor(&[d, 2], &mut rng)),
        };
        let mask = vec![true; n];
        let input = HeadInput { h, batch: 1, seq_len: n, key_mask: &mask };
        let a = absolute_head(&mut tape, &input, Some(e1), proj).unwrap();
        let b = absolute_head(&mut tape, &input, Some(e2), proj).unwrap();
        assert_ne!(weights(&tape, a.weights), weights(&tape, b.weights));
    }

    fn relative_setup(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        h: Tensor<f64>,
        table: Tensor<f64>,
        index: Arc<[u32]>,
        zero_bias: bool,
    ) -> (Var, Relative, Projections) {
        let d = h.last_dim();
        let dh = 2;
        let h = tape.constant(h);
        let bias = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| {
            if zero_bias {
                tape.constant(Tensor::zeros(&[dh]))
            } else {
                tape.constant(rand_tensor(&[dh], rng))
            }
        };
        let u = bias(tape, rng);
        let w = bias(tape, rng);
        let rel = Relative {
            table: tape.constant(table),
            w_r: tape.constant(rand_tensor(&[d, dh], rng)),
            u,
            w,
            index,
        };
        let proj = Projections {
            w_q: tape.constant(rand_tensor(&[d, dh], rng)),
            w_k: tape.constant(rand_tensor(&[d, dh], rng)),
            w_v: tape.constant(rand_tensor(&[d, dh], rng)),
        };
        (h, rel, proj)
    }

    #[test]
    fn zero_relative_terms_give_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (4, 4);
        let mut tape = Tape::<f64>::new();
        let h = rand_tensor(&[n, d], &mut rng);
        let index = ti_table_index(&[0, 2, 9, 30], 1, n, 8);
        let (h, rel, proj) = relative_setup(&mut tape, &mut rng, h, Tensor::zeros(&[9, d]), index, true);
        let mask = vec![true; n];
        let input = HeadInput { h, batch: 1, seq_len: n, key_mask: &mask };
        let a = relative_head(&mut tape, &input, &rel, proj).unwrap();
        let b = absolute_head(&mut tape, &input, None, proj).unwrap();
        for (x, y) in weights(&tape, a.weights).iter().zip(weights(&tape, b.weights)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_content_in_different_buckets_scores_differently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (3, 4);
        let row = rand_tensor(&[d], &mut rng).into_values();
        let h = Tensor::from_rows(&[row.clone(), row.clone(), row]);
        let mut tape = Tape::<f64>::new();
        // Query 0 sees key 1 at interval 1 and key 2 at interval 5.
        let index = ti_table_index(&[0, 1, 5], 1, n, 8);
        let table = rand_tensor(&[9, d], &mut rng);
        let (h, rel, proj) = relative_setup(&mut tape, &mut rng, h, table, index, false);
        let mask = vec![true; n];
        let input = HeadInput { h, batch: 1, seq_len: n, key_mask: &mask };
        let out = relative_head(&mut tape, &input, &rel, proj).unwrap();
        let w = weights(&tape, out.weights);
        assert!((w[1] - w[2]).abs() > 1e-6);
    }

    #[test]
    fn saturated_intervals_reduce_to_content_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, kt) = (4, 4, 8);
        let days = [0, 100, 250, 900];
        let index = ti_table_index(&days, 1, n, kt);
        // All pairs but the diagonal sit in the k_t bucket; make the diagonal
        // row equal the k_t row so every r_ij is the same vector.
        let mut table = rand_tensor(&[kt + 1, d], &mut rng);
        let last: Vec<f64> = table.row(kt).to_vec();
        table.values_mut()[..d].copy_from_slice(&last);
        let h = rand_tensor(&[n, d], &mut rng);
        let mut tape = Tape::<f64>::new();
        let (h, rel, proj) = relative_setup(&mut tape, &mut rng, h, table, index, false);
        let mask = vec![true; n];
        let input = HeadInput { h, batch: 1, seq_len: n, key_mask: &mask };
        let rel_out = relative_head(&mut tape, &input, &rel, proj).unwrap();
        // Content-only reference with the same u bias (uᵀk_j is part of the
        // content term).
        let qu_proj = {
            let q = tape.matmul(h, proj.w_q).unwrap();
            let qu = tape.add_bias(q, rel.u).unwrap();
            let k = tape.matmul(h, proj.w_k).unwrap();
            let s = tape.matmul_bt(qu, k).unwrap();
            let s = tape.scale(s, 1.0 / 2f64.sqrt());
            tape.softmax_masked(s, &mask).unwrap()
        };
        for (x, y) in weights(&tape, rel_out.weights).iter().zip(weights(&tape, qu_proj)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
