//! The depth model: encoder, autoregressive resolution loop, and per-step
//! bin refinement.
//!
//! Each step rebuilds the full token sequence seen so far, runs the block
//! stack under the patch-causal mask, and reads off the newest block's
//! features. Nothing is cached between steps; prior steps' outputs are
//! recomputed bitwise identically, which keeps truncated runs exactly
//! equal to prefixes of full runs.

use crate::attention::{build_patch_causal_mask, dar_block};
use crate::error::{Error, Result};
use crate::injection::{chw_to_tokens, conv_gru_step, project_bins, tokens_to_chw};
use crate::mtbin::{self, BinState, DepthMap};
use crate::numerics::{Graph, Scalar, Tensor, UpsampleMode, Var};

use super::config::ModelConfig;
use super::params::{bind, init_params, BoundModel, ParamStore};

/// Model = configuration + named parameters.
pub struct Dar<F: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<F>,
}

/// Tape handles and bin states produced by one forward pass.
pub struct Forward {
    pub bound: BoundModel,
    /// Per step: predicted depth at the step's native grid, `(1, h_k, w_k)`.
    pub step_native: Vec<Var>,
    /// Per step: the same depth bilinearly upsampled to the input
    /// resolution (still on tape), `(1, H, W)`.
    pub step_full: Vec<Var>,
    /// Per step: bin probabilities `(N, h_k, w_k)`.
    pub probs: Vec<Var>,
    /// Bin state consumed by each step (index k is the state at step k's
    /// resolution, before that step's refinement).
    pub bins: Vec<BinState>,
    /// Bin indices chosen between consecutive steps; entry k lives at step
    /// k+1's resolution.
    pub located: Vec<Vec<usize>>,
}

impl<F: Scalar> Dar<F> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Dar { cfg, params })
    }

    /// Wraps existing parameters (e.g. from a checkpoint) after verifying
    /// they carry exactly the names this configuration initializes.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let expect: ParamStore<F> = init_params(&cfg, 0)?;
        if expect.names() != params.names() {
            return Err(Error::Config(format!(
                "parameter set mismatch: expected {} tensors, got {}",
                expect.len(),
                params.len()
            )));
        }
        for ((name, a), (_, b)) in expect.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Dar { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Runs the first `steps` refinement steps (`steps == schedule length`
    /// for a full pass) over one `(1, H, W)` image.
    pub fn forward(&self, g: &mut Graph<F>, image: &Tensor<F>, steps: usize) -> Result<Forward> {
        let cfg = &self.cfg;
        if steps == 0 || steps > cfg.steps() {
            return Err(Error::Config(format!(
                "cannot run {steps} of {} scheduled steps",
                cfg.steps()
            )));
        }
        if image.shape() != [1, cfg.input_h, cfg.input_w] {
            return Err(Error::shape(
                "forward",
                format!(
                    "image shape {:?}, expected [1, {}, {}]",
                    image.shape(),
                    cfg.input_h,
                    cfg.input_w
                ),
            ));
        }
        let bound = bind(g, cfg, &self.params)?;
        let range = cfg.depth_range()?;
        let inv_width = 1.0 / range.width();

        // Conditioning tokens from the image encoder.
        let mut enc = g.constant(image.clone())?;
        for &(w, b) in &bound.encoder {
            let c = g.conv2d(enc, w, b, 2)?;
            enc = g.silu(c)?;
        }
        let enc_tokens = chw_to_tokens(g, enc)?;
        let ctx = g.add(enc_tokens, bound.img_pos)?;

        let dims = cfg.schedule.dims();
        let block_sizes = cfg.schedule.block_sizes();
        let (h0, w0) = dims[0];
        let mut bins = mtbin::init_bins(&range, h0, w0)?;

        let mut fwd = Forward {
            bound,
            step_native: Vec::with_capacity(steps),
            step_full: Vec::with_capacity(steps),
            probs: Vec::with_capacity(steps),
            bins: Vec::with_capacity(steps),
            located: Vec::with_capacity(steps.saturating_sub(1)),
        };
        let mut seq: Option<Var> = None;
        let mut prev_feats: Option<Var> = None;
        let mut tokens_before = 0usize;

        for k in 0..steps {
            let (hk, wk) = dims[k];
            let tk = hk * wk;

            // Feature map entering this step: the learned start vector at
            // step one, else the previous step's features carried up.
            let state = match prev_feats {
                None => {
                    let zero = g.constant(Tensor::zeros(&[tk, cfg.hidden]))?;
                    let st = g.add_row(zero, fwd.bound.start)?;
                    tokens_to_chw(g, st, hk, wk)?
                }
                Some(f) => {
                    let mut f = f;
                    for _ in 0..cfg.schedule.ratio_to_next(k - 1).trailing_zeros() {
                        f = g.upsample2x(f, cfg.feat_upsample)?;
                    }
                    f
                }
            };

            // Inject the current bin geometry.
            let centers = bins.centers_map();
            let centers_norm = centers.map(|c| (c - range.d_min) * inv_width).cast::<F>();
            let cn = g.constant(centers_norm)?;
            let f_bin = project_bins(g, &fwd.bound.inject, cn)?;
            let injected = conv_gru_step(g, &fwd.bound.gru, state, f_bin)?;

            // Extend the sequence and run the stack under the causal mask.
            let toks = chw_to_tokens(g, injected)?;
            let tok_k = g.add(toks, fwd.bound.pos[k])?;
            let new_seq = match seq {
                None => tok_k,
                Some(s) => g.concat0(s, tok_k)?,
            };
            seq = Some(new_seq);
            let mask = build_patch_causal_mask(&block_sizes[..=k])?;
            let mut x = new_seq;
            for l in 0..cfg.layers {
                let b = if cfg.shared_blocks {
                    l
                } else {
                    k * cfg.layers + l
                };
                x = dar_block(g, &fwd.bound.blocks[b], x, ctx, &mask)?;
            }
            let yk = g.row_slice(x, tokens_before, tokens_before + tk)?;
            let yk_map = tokens_to_chw(g, yk, hk, wk)?;
            prev_feats = Some(yk_map);
            tokens_before += tk;

            // Head: bin logits, probabilities, expected depth.
            let (head_w, head_b) = fwd.bound.heads[k];
            let logits = g.conv2d(yk_map, head_w, head_b, 1)?;
            let probs = g.softmax(logits, 0)?;
            let centers_const = g.constant(centers.cast::<F>())?;
            let weighted = g.mul(probs, centers_const)?;
            let flat = g.reshape(weighted, &[cfg.n_bins, tk])?;
            let cols = g.transpose2(flat)?;
            let per_px = g.row_sum(cols)?;
            let depth_native = g.reshape(per_px, &[1, hk, wk])?;

            let mut full = depth_native;
            for _ in 0..(cfg.input_h / hk).trailing_zeros() {
                full = g.upsample2x(full, UpsampleMode::Bilinear)?;
            }

            fwd.bins.push(bins.clone());
            fwd.probs.push(probs);
            fwd.step_native.push(depth_native);
            fwd.step_full.push(full);

            // Carry the bins to the next step: upsample state and depth to
            // the next grid, locate the chosen bin there, refine.
            if k + 1 < steps {
                let depth_vals: Vec<f64> =
                    g.value(depth_native).data().iter().map(|v| v.as_f64()).collect();
                let mut depth_map = DepthMap::full_valid(hk, wk, depth_vals)?;
                let mut carried = bins;
                for _ in 0..cfg.schedule.ratio_to_next(k).trailing_zeros() {
                    carried = carried.upsample2x()?;
                    depth_map = depth_map.upsample2x()?;
                }
                let t = mtbin::locate_bin(&carried, &depth_map)?;
                bins = mtbin::refine_bins(&carried, &t)?;
                fwd.located.push(t);
            }
        }
        Ok(fwd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::StepSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg =
            ModelConfig::test_preset(StepSchedule::square(&[2, 4]).unwrap(), 16, 16);
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.n_bins = 4;
        cfg
    }

    fn test_image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[1, cfg.input_h, cfg.input_w], 0.5, &mut rng).map(|v: f64| v.tanh())
    }

    #[test]
    fn forward_produces_consistent_shapes() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 11).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &test_image(&cfg, 0), 2).unwrap();
        assert_eq!(g.shape(fwd.step_native[0]), &[1, 2, 2]);
        assert_eq!(g.shape(fwd.step_native[1]), &[1, 4, 4]);
        assert_eq!(g.shape(fwd.step_full[0]), &[1, 16, 16]);
        assert_eq!(g.shape(fwd.step_full[1]), &[1, 16, 16]);
        assert_eq!(g.shape(fwd.probs[0]), &[4, 2, 2]);
        assert_eq!(fwd.bins[0].n_pixels(), 4);
        assert_eq!(fwd.bins[1].n_pixels(), 16);
        assert_eq!(fwd.located.len(), 1);
        assert_eq!(fwd.located[0].len(), 16, "located at next step's grid");
    }

    #[test]
    fn predictions_stay_inside_depth_range() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 13).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &test_image(&cfg, 1), 2).unwrap();
        for (k, &d) in fwd.step_native.iter().enumerate() {
            for &v in g.value(d).data() {
                assert!(
                    v >= cfg.d_min && v <= cfg.d_max,
                    "step {k} depth {v} outside [{}, {}]",
                    cfg.d_min,
                    cfg.d_max
                );
            }
        }
    }

    #[test]
    fn truncated_run_is_a_bitwise_prefix() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 17).unwrap();
        let image = test_image(&cfg, 2);
        let mut g_full = Graph::new();
        let full = model.forward(&mut g_full, &image, 2).unwrap();
        let mut g_cut = Graph::new();
        let cut = model.forward(&mut g_cut, &image, 1).unwrap();
        assert_eq!(
            g_full.value(full.step_native[0]).data(),
            g_cut.value(cut.step_native[0]).data(),
            "step 1 must not depend on whether step 2 runs"
        );
        assert_eq!(
            g_full.value(full.probs[0]).data(),
            g_cut.value(cut.probs[0]).data()
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 19).unwrap();
        let image = test_image(&cfg, 3);
        let run = || {
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &image, 2).unwrap();
            g.value(fwd.step_native[1]).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refined_bins_nest_inside_previous_ranges() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 23).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &test_image(&cfg, 4), 2).unwrap();
        let n = cfg.n_bins;
        for px in 0..fwd.bins[1].n_pixels() {
            let b = fwd.bins[1].bounds_at(px);
            assert!(b.windows(2).all(|w| w[0] < w[1]), "ascending at pixel {px}");
            assert!(b[0] >= cfg.d_min - 1e-12 && b[n] <= cfg.d_max + 1e-12);
            let width = b[n] - b[0];
            let init_width = cfg.d_max - cfg.d_min;
            assert!(
                width <= 3.0 * init_width / n as f64 * (1.0 + 1e-12),
                "pixel {px} did not contract: {width}"
            );
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 29).unwrap();
        let mut g = Graph::new();
        let bad = Tensor::zeros(&[1, 8, 8]);
        assert!(model.forward(&mut g, &bad, 2).is_err());
        let image = test_image(&cfg, 5);
        assert!(model.forward(&mut g, &image, 0).is_err());
        assert!(model.forward(&mut g, &image, 3).is_err());
    }

    #[test]
    fn from_parts_checks_names_and_shapes() {
        let cfg = tiny_cfg();
        let model: Dar<f64> = Dar::new(cfg.clone(), 31).unwrap();
        let store = model.params().clone();
        assert!(Dar::from_parts(cfg.clone(), store.clone()).is_ok());
        let mut wrong = ParamStore::new();
        for (name, t) in store.iter().skip(1) {
            wrong.insert(name, t.clone()).unwrap();
        }
        assert!(Dar::from_parts(cfg, wrong).is_err());
    }
}
