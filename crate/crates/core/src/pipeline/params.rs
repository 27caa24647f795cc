//! Named parameter storage, deterministic initialization, and binding of
//! parameters onto a tape for one forward/backward pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, DarBlockParams};
use crate::error::{Error, Result};
use crate::injection::{BinsProjectionParams, ConvGruParams};
use crate::numerics::{Graph, Scalar, Tensor, Var};

use super::config::{ModelConfig, ENCODER_STRIDE};

/// Standard deviation of every randomly initialized weight.
const INIT_STD: f64 = 0.02;

/// Ordered, name-addressable parameter tensors. Order is fixed by
/// construction and shared by checkpoints and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).copied().map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Element-wise precision conversion preserving names and order.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Fresh parameters for `cfg`, reproducible from `seed`. Weights draw from
/// a normal with standard deviation 0.02; biases and layer-norm shifts are
/// zero; layer-norm scales are one.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden;

    let mut weight = |store: &mut ParamStore<F>, name: String, shape: &[usize]| -> Result<()> {
        let t = Tensor::randn(shape, INIT_STD, &mut rng);
        store.insert(name, t)
    };
    fn zeros<F: Scalar>(store: &mut ParamStore<F>, name: String, shape: &[usize]) -> Result<()> {
        store.insert(name, Tensor::zeros(shape))
    }
    fn ones<F: Scalar>(store: &mut ParamStore<F>, name: String, shape: &[usize]) -> Result<()> {
        store.insert(name, Tensor::full(shape, F::one()))
    }

    // Image encoder: three stride-2 convolutions to 1/8 resolution.
    let widths = [h / 4, h / 2, h];
    let mut c_in = 1;
    for (i, &c_out) in widths.iter().enumerate() {
        weight(&mut store, format!("encoder.conv{}.w", i + 1), &[c_out, c_in, 3, 3])?;
        zeros(&mut store, format!("encoder.conv{}.b", i + 1), &[c_out])?;
        c_in = c_out;
    }
    let t_img = (cfg.input_h / ENCODER_STRIDE) * (cfg.input_w / ENCODER_STRIDE);
    weight(&mut store, "img_pos".into(), &[t_img, h])?;

    // Step-token machinery.
    weight(&mut store, "start".into(), &[h])?;
    for (k, &(gh, gw)) in cfg.schedule.dims().iter().enumerate() {
        weight(&mut store, format!("pos.{k}"), &[gh * gw, h])?;
    }

    // Transformer blocks.
    let n_blocks = if cfg.shared_blocks {
        cfg.layers
    } else {
        cfg.layers * cfg.steps()
    };
    for b in 0..n_blocks {
        ones(&mut store, format!("block.{b}.ln1.gamma"), &[h])?;
        zeros(&mut store, format!("block.{b}.ln1.beta"), &[h])?;
        for proj in ["wq", "wk", "wv", "wo"] {
            weight(&mut store, format!("block.{b}.msa.{proj}"), &[h, h])?;
        }
        ones(&mut store, format!("block.{b}.ln2.gamma"), &[h])?;
        zeros(&mut store, format!("block.{b}.ln2.beta"), &[h])?;
        for proj in ["wq", "wk", "wv", "wo"] {
            weight(&mut store, format!("block.{b}.mca.{proj}"), &[h, h])?;
        }
    }

    // Bin injection.
    weight(&mut store, "inject.conv1.w".into(), &[h, cfg.n_bins, 3, 3])?;
    zeros(&mut store, "inject.conv1.b".into(), &[h])?;
    weight(&mut store, "inject.conv2.w".into(), &[h, h, 3, 3])?;
    zeros(&mut store, "inject.conv2.b".into(), &[h])?;
    for gate in ["z", "r", "c"] {
        weight(&mut store, format!("gru.{gate}.w"), &[h, 2 * h, 3, 3])?;
        zeros(&mut store, format!("gru.{gate}.b"), &[h])?;
    }

    // Per-step prediction heads (1x1 convolutions to bin logits).
    for k in 0..cfg.steps() {
        weight(&mut store, format!("head.{k}.w"), &[cfg.n_bins, h, 1, 1])?;
        zeros(&mut store, format!("head.{k}.b"), &[cfg.n_bins])?;
    }

    Ok(store)
}

/// Parameters of one run bound onto a tape as trainable leaves, exposed
/// both in store order (for gradient reads) and as typed groups.
pub struct BoundModel {
    /// `(weight, bias)` per encoder convolution.
    pub encoder: Vec<(Var, Var)>,
    pub img_pos: Var,
    pub start: Var,
    pub pos: Vec<Var>,
    pub blocks: Vec<DarBlockParams>,
    pub inject: BinsProjectionParams,
    pub gru: ConvGruParams,
    /// `(weight, bias)` per step head.
    pub heads: Vec<(Var, Var)>,
    /// All leaves in [`ParamStore`] order.
    pub ordered: Vec<Var>,
}

/// Creates one trainable leaf per stored tensor and assembles the typed
/// views. The store must have been produced by [`init_params`] (or a
/// checkpoint of it) for the same configuration.
pub fn bind<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    store: &ParamStore<F>,
) -> Result<BoundModel> {
    let mut by_name: HashMap<&str, Var> = HashMap::with_capacity(store.len());
    let mut ordered = Vec::with_capacity(store.len());
    for (name, tensor) in store.iter() {
        let v = g.leaf(tensor.clone())?;
        by_name.insert(name, v);
        ordered.push(v);
    }
    let get = |name: &str| -> Result<Var> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} missing from store")))
    };

    let encoder = (1..=3)
        .map(|i| Ok((get(&format!("encoder.conv{i}.w"))?, get(&format!("encoder.conv{i}.b"))?)))
        .collect::<Result<Vec<_>>>()?;
    let pos = (0..cfg.steps())
        .map(|k| get(&format!("pos.{k}")))
        .collect::<Result<Vec<_>>>()?;
    let n_blocks = if cfg.shared_blocks {
        cfg.layers
    } else {
        cfg.layers * cfg.steps()
    };
    let attn = |b: usize, kind: &str| -> Result<AttentionParams> {
        Ok(AttentionParams {
            w_q: get(&format!("block.{b}.{kind}.wq"))?,
            w_k: get(&format!("block.{b}.{kind}.wk"))?,
            w_v: get(&format!("block.{b}.{kind}.wv"))?,
            w_o: get(&format!("block.{b}.{kind}.wo"))?,
            heads: cfg.heads,
        })
    };
    let blocks = (0..n_blocks)
        .map(|b| {
            Ok(DarBlockParams {
                ln1_gamma: get(&format!("block.{b}.ln1.gamma"))?,
                ln1_beta: get(&format!("block.{b}.ln1.beta"))?,
                msa: attn(b, "msa")?,
                ln2_gamma: get(&format!("block.{b}.ln2.gamma"))?,
                ln2_beta: get(&format!("block.{b}.ln2.beta"))?,
                mca: attn(b, "mca")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let inject = BinsProjectionParams {
        conv1_w: get("inject.conv1.w")?,
        conv1_b: get("inject.conv1.b")?,
        conv2_w: get("inject.conv2.w")?,
        conv2_b: get("inject.conv2.b")?,
    };
    let gru = ConvGruParams {
        wz_w: get("gru.z.w")?,
        wz_b: get("gru.z.b")?,
        wr_w: get("gru.r.w")?,
        wr_b: get("gru.r.b")?,
        wc_w: get("gru.c.w")?,
        wc_b: get("gru.c.b")?,
    };
    let heads = (0..cfg.steps())
        .map(|k| Ok((get(&format!("head.{k}.w"))?, get(&format!("head.{k}.b"))?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(BoundModel {
        encoder,
        img_pos: get("img_pos")?,
        start: get("start")?,
        pos,
        blocks,
        inject,
        gru,
        heads,
        ordered,
    })
}
