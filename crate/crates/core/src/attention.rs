//! Patch-causal self-attention and conditioning cross-attention.
//!
//! Tokens from all resolution steps are concatenated into one sequence.
//! Within a step every token sees every token of that step; across steps a
//! token sees only earlier (coarser) steps. That structure is a prefix per
//! query row, so instead of materializing `-inf` logits the kernels simply
//! never touch disallowed pairs — outputs for early steps are bitwise
//! independent of anything appended later.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention mask for a sequence laid out as consecutive same-step blocks.
///
/// Query token `i` in block `b` may attend to key token `j` iff `j` lies in
/// block `b` or earlier, i.e. `j < prefix_len(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCausalMask {
    block_sizes: Vec<usize>,
    prefix_lens: Arc<Vec<usize>>,
}

/// Builds the mask for the given tokens-per-block sizes.
pub fn build_patch_causal_mask(block_sizes: &[usize]) -> Result<PatchCausalMask> {
    if block_sizes.is_empty() {
        return Err(Error::Config("mask needs at least one block".into()));
    }
    if let Some(&z) = block_sizes.iter().find(|&&n| n == 0) {
        return Err(Error::Config(format!("empty attention block (size {z})")));
    }
    let mut prefix_lens = Vec::with_capacity(block_sizes.iter().sum());
    let mut seen = 0;
    for &n in block_sizes {
        seen += n;
        prefix_lens.extend(std::iter::repeat(seen).take(n));
    }
    Ok(PatchCausalMask {
        block_sizes: block_sizes.to_vec(),
        prefix_lens: Arc::new(prefix_lens),
    })
}

impl PatchCausalMask {
    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Tokens in the whole sequence.
    pub fn len(&self) -> usize {
        self.prefix_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty masks
    }

    /// Length of the allowed key prefix for query token `i`.
    pub fn prefix_len(&self, i: usize) -> usize {
        self.prefix_lens[i]
    }

    /// Shared per-row prefix lengths in the form the kernels consume.
    pub fn prefix_lens(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.prefix_lens)
    }

    /// Whether query `i` may attend to key `j`.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j < self.prefix_lens[i]
    }

    /// Number of allowed (query, key) pairs.
    pub fn pair_count(&self) -> usize {
        self.prefix_lens.iter().sum()
    }

    /// Mask restricted to the first `blocks` blocks, for truncated runs.
    pub fn truncate(&self, blocks: usize) -> Result<PatchCausalMask> {
        if blocks == 0 || blocks > self.block_sizes.len() {
            return Err(Error::Config(format!(
                "cannot truncate {}-block mask to {blocks} blocks",
                self.block_sizes.len()
            )));
        }
        build_patch_causal_mask(&self.block_sizes[..blocks])
    }
}

/// Projection weights of one attention layer. All four matrices are
/// `hidden x hidden`; heads split the hidden axis into equal slices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

fn check_attention<F: Scalar>(
    g: &Graph<F>,
    params: &AttentionParams,
    what: &'static str,
) -> Result<usize> {
    let s = g.shape(params.w_q).to_vec();
    for (name, v) in [
        ("w_q", params.w_q),
        ("w_k", params.w_k),
        ("w_v", params.w_v),
        ("w_o", params.w_o),
    ] {
        let sv = g.shape(v);
        if sv.len() != 2 || sv[0] != sv[1] || sv != s.as_slice() {
            return Err(Error::shape(
                what,
                format!("{name} must be square hidden x hidden, got {sv:?}"),
            ));
        }
    }
    let hidden = s[0];
    if params.heads == 0 || hidden % params.heads != 0 {
        return Err(Error::Config(format!(
            "{what}: {} heads must divide hidden size {hidden}",
            params.heads
        )));
    }
    Ok(hidden)
}

/// Shared core of self- and cross-attention: project, split into heads,
/// attend within each query row's key prefix, merge heads, project out.
fn attend<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    queries: Var,
    keys: Var,
    plens: Arc<Vec<usize>>,
) -> Result<Var> {
    let hidden = check_attention(g, params, "attention")?;
    for (name, v) in [("queries", queries), ("keys", keys)] {
        let sv = g.shape(v);
        if sv.len() != 2 || sv[1] != hidden {
            return Err(Error::shape(
                "attention",
                format!("{name} must be (tokens, {hidden}), got {sv:?}"),
            ));
        }
    }
    let tq = g.shape(queries)[0];
    let tk = g.shape(keys)[0];
    if plens.len() != tq || plens.iter().any(|&p| p == 0 || p > tk) {
        return Err(Error::shape(
            "attention",
            format!("need {tq} prefix lengths in 1..={tk}"),
        ));
    }

    let q = g.matmul(queries, params.w_q)?;
    let k = g.matmul(keys, params.w_k)?;
    let v = g.matmul(keys, params.w_v)?;
    let head_dim = hidden / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut merged = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (from, to) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.col_slice(q, from, to)?;
        let kh = g.col_slice(k, from, to)?;
        let vh = g.col_slice(v, from, to)?;
        let ph = g.attn_probs(qh, kh, scale, Arc::clone(&plens))?;
        merged.push(g.matmul_prefix(ph, vh, Arc::clone(&plens))?);
    }
    let cat = g.concat_cols(&merged)?;
    g.matmul(cat, params.w_o)
}

/// Masked multi-head self-attention over the full step-concatenated
/// sequence.
pub fn msa_masked<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    x: Var,
    mask: &PatchCausalMask,
) -> Result<Var> {
    if g.shape(x)[0] != mask.len() {
        return Err(Error::shape(
            "msa_masked",
            format!("{} tokens vs mask over {}", g.shape(x)[0], mask.len()),
        ));
    }
    attend(g, params, x, x, mask.prefix_lens())
}

/// Unmasked multi-head cross-attention: every query row attends to the
/// whole conditioning sequence.
pub fn mca_condition<F: Scalar>(
    g: &mut Graph<F>,
    params: &AttentionParams,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    let tq = g.shape(x)[0];
    let tk = g.shape(ctx)[0];
    attend(g, params, x, ctx, Arc::new(vec![tk; tq]))
}

/// Parameters of one transformer block: pre-norm masked self-attention and
/// pre-norm conditioning cross-attention, each with a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct DarBlockParams {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub msa: AttentionParams,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mca: AttentionParams,
}

/// One block: `x + MSA(LN(x))`, then `h + MCA(LN(h), ctx)`.
pub fn dar_block<F: Scalar>(
    g: &mut Graph<F>,
    params: &DarBlockParams,
    x: Var,
    ctx: Var,
    mask: &PatchCausalMask,
) -> Result<Var> {
    let n1 = g.layer_norm(x, params.ln1_gamma, params.ln1_beta, LAYER_NORM_EPS)?;
    let a = msa_masked(g, &params.msa, n1, mask)?;
    let h = g.add(x, a)?;
    let n2 = g.layer_norm(h, params.ln2_gamma, params.ln2_beta, LAYER_NORM_EPS)?;
    let c = mca_condition(g, &params.mca, n2, ctx)?;
    g.add(h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    fn make_params(
        g: &mut Graph<f64>,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        heads: usize,
    ) -> AttentionParams {
        AttentionParams {
            w_q: g.leaf(randn(rng, &[hidden, hidden])).unwrap(),
            w_k: g.leaf(randn(rng, &[hidden, hidden])).unwrap(),
            w_v: g.leaf(randn(rng, &[hidden, hidden])).unwrap(),
            w_o: g.leaf(randn(rng, &[hidden, hidden])).unwrap(),
            heads,
        }
    }

    #[test]
    fn mask_blocks_see_self_and_past() {
        let m = build_patch_causal_mask(&[1, 4]).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.allowed(0, 0));
        for j in 1..5 {
            assert!(!m.allowed(0, j), "token 0 must not see later block");
        }
        for i in 1..5 {
            for j in 0..5 {
                assert!(m.allowed(i, j), "block 2 sees everything");
            }
        }
        assert_eq!(m.prefix_len(0), 1);
        assert_eq!(m.prefix_len(4), 5);
    }

    #[test]
    fn mask_pair_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rand::Rng::random_range(&mut rng, 1..6);
            let sizes: Vec<usize> =
                (0..k).map(|_| rand::Rng::random_range(&mut rng, 1..9)).collect();
            let m = build_patch_causal_mask(&sizes).unwrap();
            let mut expect = 0;
            let mut seen = 0;
            for &n in &sizes {
                seen += n;
                expect += n * seen;
            }
            assert_eq!(m.pair_count(), expect, "sizes {sizes:?}");
            let brute = (0..m.len())
                .map(|i| (0..m.len()).filter(|&j| m.allowed(i, j)).count())
                .sum::<usize>();
            assert_eq!(m.pair_count(), brute);
        }
    }

    #[test]
    fn mask_rejects_degenerate_blocks() {
        assert!(build_patch_causal_mask(&[]).is_err());
        assert!(build_patch_causal_mask(&[2, 0, 1]).is_err());
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g: Graph<f64> = Graph::new();
        let p = make_params(&mut g, &mut rng, 8, 2);
        let x = g.leaf(randn(&mut rng, &[1, 8])).unwrap();
        let mask = build_patch_causal_mask(&[1]).unwrap();
        let out = msa_masked(&mut g, &p, x, &mask).unwrap();

        // With one token the attention weight is exactly 1, so the output
        // is x -> W_v -> W_o regardless of W_q and W_k.
        let v = g.matmul(x, p.w_v).unwrap();
        let expect = g.matmul(v, p.w_o).unwrap();
        assert_eq!(g.value(out).data(), g.value(expect).data());
    }

    #[test]
    fn zero_query_weights_average_allowed_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g: Graph<f64> = Graph::new();
        let hidden = 6;
        let p = AttentionParams {
            w_q: g.leaf(Tensor::zeros(&[hidden, hidden])).unwrap(),
            w_k: g.leaf(Tensor::zeros(&[hidden, hidden])).unwrap(),
            w_v: g.leaf(randn(&mut rng, &[hidden, hidden])).unwrap(),
            w_o: g.leaf(randn(&mut rng, &[hidden, hidden])).unwrap(),
            heads: 3,
        };
        let x = g.leaf(randn(&mut rng, &[4, hidden])).unwrap();
        let mask = build_patch_causal_mask(&[2, 2]).unwrap();
        let out = msa_masked(&mut g, &p, x, &mask).unwrap();

        // All logits are zero, so probabilities are uniform over each
        // query's prefix and each output row is the mean of allowed value
        // rows pushed through W_o.
        let v = g.matmul(x, p.w_v).unwrap();
        let vv = g.value(v).clone();
        let od = g.value(out).data().to_vec();
        for i in 0..4 {
            let plen = mask.prefix_len(i);
            let mut mean = vec![0.0; hidden];
            for j in 0..plen {
                for c in 0..hidden {
                    mean[c] += vv.data()[j * hidden + c] / plen as f64;
                }
            }
            let wo = g.value(p.w_o);
            for c in 0..hidden {
                let mut e = 0.0;
                for k in 0..hidden {
                    e += mean[k] * wo.data()[k * hidden + c];
                }
                assert!(
                    (od[i * hidden + c] - e).abs() < 1e-12,
                    "row {i} col {c}: {} vs {e}",
                    od[i * hidden + c]
                );
            }
        }
    }

    #[test]
    fn two_token_hand_computation() {
        // hidden=1, heads=1, weights = identity-ish scalars; everything is
        // small enough to follow by hand.
        let mut g: Graph<f64> = Graph::new();
        let one = |g: &mut Graph<f64>| g.leaf(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let p = AttentionParams {
            w_q: one(&mut g),
            w_k: one(&mut g),
            w_v: one(&mut g),
            w_o: one(&mut g),
            heads: 1,
        };
        let x = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let mask = build_patch_causal_mask(&[2]).unwrap();
        let out = msa_masked(&mut g, &p, x, &mask).unwrap();
        // scale = 1; logits row0 = [1*1, 1*2] = [1,2]; row1 = [2, 4].
        let p0 = {
            let (a, b) = ((1.0f64).exp(), (2.0f64).exp());
            b / (a + b)
        };
        let p1 = {
            let (a, b) = ((2.0f64).exp(), (4.0f64).exp());
            b / (a + b)
        };
        let want0 = (1.0 - p0) * 1.0 + p0 * 2.0;
        let want1 = (1.0 - p1) * 1.0 + p1 * 2.0;
        let od = g.value(out).data();
        assert!((od[0] - want0).abs() < 1e-12, "{} vs {want0}", od[0]);
        assert!((od[1] - want1).abs() < 1e-12, "{} vs {want1}", od[1]);
    }

    #[test]
    fn prefix_outputs_ignore_suffix_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hidden = 12;
        let (t1, t2) = (3usize, 5usize);
        let x_full = randn(&mut rng, &[t1 + t2, hidden]);
        let weights: Vec<Tensor<f64>> =
            (0..4).map(|_| randn(&mut rng, &[hidden, hidden])).collect();
        let mask = build_patch_causal_mask(&[t1, t2]).unwrap();

        let run = |x: &Tensor<f64>| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let p = AttentionParams {
                w_q: g.leaf(weights[0].clone()).unwrap(),
                w_k: g.leaf(weights[1].clone()).unwrap(),
                w_v: g.leaf(weights[2].clone()).unwrap(),
                w_o: g.leaf(weights[3].clone()).unwrap(),
                heads: 4,
            };
            let xv = g.leaf(x.clone()).unwrap();
            let out = msa_masked(&mut g, &p, xv, &mask).unwrap();
            g.value(out).data().to_vec()
        };

        let base = run(&x_full);
        let mut perturbed = x_full.clone();
        for t in t1..t1 + t2 {
            for c in 0..hidden {
                perturbed.data_mut()[t * hidden + c] += 3.0;
            }
        }
        let alt = run(&perturbed);
        // First-block rows must be bit-identical; later rows must move.
        assert_eq!(&base[..t1 * hidden], &alt[..t1 * hidden]);
        assert_ne!(&base[t1 * hidden..], &alt[t1 * hidden..]);
    }

    #[test]
    fn within_block_permutation_only_permutes_that_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hidden = 8;
        let mask = build_patch_causal_mask(&[4, 2]).unwrap();
        let x = randn(&mut rng, &[6, hidden]);
        let weights: Vec<Tensor<f64>> =
            (0..4).map(|_| randn(&mut rng, &[hidden, hidden])).collect();
        let run = |x: &Tensor<f64>| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let p = AttentionParams {
                w_q: g.leaf(weights[0].clone()).unwrap(),
                w_k: g.leaf(weights[1].clone()).unwrap(),
                w_v: g.leaf(weights[2].clone()).unwrap(),
                w_o: g.leaf(weights[3].clone()).unwrap(),
                heads: 2,
            };
            let xv = g.leaf(x.clone()).unwrap();
            let out = msa_masked(&mut g, &p, xv, &mask).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&x);
        // Permute rows 0..4 (first block) by a fixed permutation.
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..hidden {
                xp.data_mut()[dst * hidden + c] = x.data()[src * hidden + c];
            }
        }
        let out_p = run(&xp);
        // First-block outputs are permuted the same way...
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..hidden {
                let a = out_p[dst * hidden + c];
                let b = base[src * hidden + c];
                assert!((a - b).abs() < 1e-9, "row {dst}: {a} vs {b}");
            }
        }
        // ...and second-block outputs are unchanged up to summation order.
        for i in 4..6 {
            for c in 0..hidden {
                let a = out_p[i * hidden + c];
                let b = base[i * hidden + c];
                assert!((a - b).abs() < 1e-9, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(randn(&mut rng, &[5, 4])).unwrap();
        let k = g.leaf(randn(&mut rng, &[5, 4])).unwrap();
        let mask = build_patch_causal_mask(&[2, 3]).unwrap();
        let p = g.attn_probs(q, k, 0.5, mask.prefix_lens()).unwrap();
        let pv = g.value(p);
        for i in 0..5 {
            let row: f64 = pv.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-12, "row {i} sums to {row}");
            for j in mask.prefix_len(i)..5 {
                assert_eq!(pv.data()[i * 5 + j], 0.0, "masked slot ({i},{j})");
            }
        }
    }

    #[test]
    fn gradients_reach_all_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut g: Graph<f64> = Graph::new();
        let p = make_params(&mut g, &mut rng, 8, 2);
        let x = g.leaf(randn(&mut rng, &[4, 8])).unwrap();
        let mask = build_patch_causal_mask(&[2, 2]).unwrap();
        let out = msa_masked(&mut g, &p, x, &mask).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        for (name, v) in [("w_q", p.w_q), ("w_k", p.w_k), ("w_v", p.w_v), ("w_o", p.w_o)] {
            let grad = g.grad(v).expect("trainable leaf has grad");
            assert!(
                grad.data().iter().any(|&x| x != 0.0),
                "{name} received no gradient"
            );
        }
    }

    #[test]
    fn cross_attention_with_single_context_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut g: Graph<f64> = Graph::new();
        let p = make_params(&mut g, &mut rng, 6, 2);
        let x = g.leaf(randn(&mut rng, &[3, 6])).unwrap();
        let ctx = g.leaf(randn(&mut rng, &[1, 6])).unwrap();
        let out = mca_condition(&mut g, &p, x, ctx).unwrap();
        // Single context token: probabilities are 1 for every query, so all
        // rows equal ctx -> W_v -> W_o.
        let v = g.matmul(ctx, p.w_v).unwrap();
        let e = g.matmul(v, p.w_o).unwrap();
        let ev = g.value(e).data().to_vec();
        let ov = g.value(out).data();
        for i in 0..3 {
            for c in 0..6 {
                assert!((ov[i * 6 + c] - ev[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dar_block_runs_and_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let hidden = 8;
        let mask = build_patch_causal_mask(&[2, 3]).unwrap();
        let x = randn(&mut rng, &[5, hidden]);
        let ctx = randn(&mut rng, &[4, hidden]);
        let weights: Vec<Tensor<f64>> =
            (0..8).map(|_| randn(&mut rng, &[hidden, hidden])).collect();
        let run = |x: &Tensor<f64>| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let ones = g.leaf(Tensor::full(&[hidden], 1.0)).unwrap();
            let zeros = g.leaf(Tensor::zeros(&[hidden])).unwrap();
            let attn = |g: &mut Graph<f64>, i: usize| AttentionParams {
                w_q: g.leaf(weights[i].clone()).unwrap(),
                w_k: g.leaf(weights[i + 1].clone()).unwrap(),
                w_v: g.leaf(weights[i + 2].clone()).unwrap(),
                w_o: g.leaf(weights[i + 3].clone()).unwrap(),
                heads: 2,
            };
            let params = DarBlockParams {
                ln1_gamma: ones,
                ln1_beta: zeros,
                msa: attn(&mut g, 0),
                ln2_gamma: ones,
                ln2_beta: zeros,
                mca: attn(&mut g, 4),
            };
            let xv = g.leaf(x.clone()).unwrap();
            let cv = g.leaf(ctx.clone()).unwrap();
            let out = dar_block(&mut g, &params, xv, cv, &mask).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&x);
        let mut xp = x.clone();
        for t in 2..5 {
            for c in 0..hidden {
                xp.data_mut()[t * hidden + c] *= -1.5;
            }
        }
        let alt = run(&xp);
        assert_eq!(&base[..2 * hidden], &alt[..2 * hidden], "causality through block");
        assert_ne!(&base[2 * hidden..], &alt[2 * hidden..]);
    }

    #[test]
    fn attention_validates_shapes_and_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut g: Graph<f64> = Graph::new();
        let mut p = make_params(&mut g, &mut rng, 8, 3); // 3 does not divide 8
        let x = g.leaf(randn(&mut rng, &[2, 8])).unwrap();
        let mask = build_patch_causal_mask(&[2]).unwrap();
        assert!(msa_masked(&mut g, &p, x, &mask).is_err());
        p.heads = 2;
        let wrong = g.leaf(randn(&mut rng, &[2, 6])).unwrap();
        assert!(msa_masked(&mut g, &p, wrong, &mask).is_err());
        let short_mask = build_patch_causal_mask(&[1]).unwrap();
        assert!(msa_masked(&mut g, &p, x, &short_mask).is_err());
    }

    #[test]
    fn mask_truncation_matches_rebuild() {
        let m = build_patch_causal_mask(&[1, 4, 9]).unwrap();
        let t = m.truncate(2).unwrap();
        assert_eq!(t, build_patch_causal_mask(&[1, 4]).unwrap());
        assert!(m.truncate(0).is_err());
        assert!(m.truncate(4).is_err());
    }
}
