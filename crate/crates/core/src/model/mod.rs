//! Structure-reinforced graph transformer with a recurrent residual update.
//!
//! One time step maps `H_{t-1}` to `H_t = Ĥ + H_{t-1}`, where `Ĥ` is a stack
//! of attention layers whose raw scores are modulated per node pair,
//! `â = λ·a + σ`, by projections of structural features of `Ĝ_t`.
//!
//! The scale is parametrized as `λ = 1 + W_λ·r` so that zero structural
//! input (or zero `W_λ`) is exactly plain attention.

mod encoding;

pub use encoding::{positional_encoding, StepStructure, DUR_PAD, TYPE_PAD};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_graph::EdgeType;
use crate::snapshot::{Edge, NodeId};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: usize },
    #[error("state has {got} rows, model has {expected} nodes")]
    NodeCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How modulated scores are turned into attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    #[default]
    Softmax,
    /// Divide each row by its sum; undefined for rows summing to zero.
    RowSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgtConfig {
    pub d: usize,
    /// Structural embedding width.
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_spd: usize,
    pub k_max: u32,
    pub pe_base: f64,
    pub conv_width: usize,
    pub use_edge_types: bool,
    pub use_edge_weights: bool,
    pub use_topo_attr: bool,
    pub use_path_attr: bool,
    pub normalization: Normalization,
    /// Share structural encoders and λ/σ projections across layers.
    pub tie_structure: bool,
    /// Residual position-wise feed-forward block after each attention layer.
    pub ffn: bool,
    pub freeze_x: bool,
    pub x_init_std: f64,
    pub modulation_init_std: f64,
    /// Multiplier on the Xavier init of each layer's output projection.
    pub out_init_gain: f64,
    /// Layer-normalize `H_{t-1}` before the layer stack; the residual still
    /// adds the raw `H_{t-1}`.
    pub input_norm: bool,
    pub ln_eps: f64,
}

impl Default for SgtConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_e: 32,
            n_layers: 4,
            n_heads: 4,
            max_spd: 5,
            k_max: 64,
            pe_base: 10000.0,
            conv_width: 3,
            use_edge_types: true,
            use_edge_weights: true,
            use_topo_attr: true,
            use_path_attr: true,
            normalization: Normalization::Softmax,
            tie_structure: false,
            ffn: false,
            freeze_x: false,
            x_init_std: 1.0,
            modulation_init_std: 0.01,
            out_init_gain: 1.0,
            input_norm: true,
            ln_eps: 1e-5,
        }
    }
}

impl SgtConfig {
    pub fn structure_active(&self) -> bool {
        self.use_topo_attr || self.use_path_attr
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.d_e == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("d, d_e, n_layers and n_heads must be positive");
        }
        if self.d % self.n_heads != 0 {
            return bad("d must be divisible by n_heads");
        }
        if self.max_spd == 0 || self.k_max == 0 {
            return bad("max_spd and k_max must be positive");
        }
        if self.conv_width == 0 || self.conv_width > self.max_spd {
            return bad("conv_width must be in 1..=max_spd");
        }
        if !(self.pe_base > 0.0) || !(self.ln_eps > 0.0) {
            return bad("pe_base and ln_eps must be positive");
        }
        Ok(())
    }
}

/// Node states `H_t`, `[node_count, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    h: Tensor,
}

impl HiddenState {
    pub fn new(h: Tensor) -> Self {
        Self { h }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.h
    }

    pub fn into_tensor(self) -> Tensor {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.h.rows()
    }

    pub fn row(&self, i: NodeId) -> &[f64] {
        self.h.row(i)
    }
}

/// Per-layer attention parameters.
#[derive(Clone, Debug)]
struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    ffn: Option<[ParamId; 4]>,
}

/// Structural encoder and modulation parameters, per layer or shared.
#[derive(Clone, Debug)]
struct StructIds {
    w_s: ParamId,
    b_s: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    type_table: ParamId,
    dur_table: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    unreachable: ParamId,
    w_lambda: ParamId,
    w_sigma: ParamId,
}

/// Pairwise λ and σ, `[n², n_heads]` each, rows in row-major pair order.
pub struct Modulation {
    pub lambda: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: SgtConfig,
    node_count: usize,
    store: ParamStore,
    x: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    layers: Vec<LayerIds>,
    structs: Vec<StructIds>,
    input_ln: Option<(ParamId, ParamId)>,
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("xavier bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("xavier shape")
}

fn normal<R: Rng>(rng: &mut R, std: f64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("normal std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("normal shape")
}

impl Model {
    pub fn new<R: Rng>(cfg: SgtConfig, node_count: usize, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (d, de, h) = (cfg.d, cfg.d_e, cfg.n_heads);
        let mut store = ParamStore::new();
        let x = store.insert("X", normal(rng, cfg.x_init_std, &[node_count, d]));
        if cfg.freeze_x {
            store.set_trainable(x, false);
        }

        let input_ln = cfg.input_norm.then(|| {
            (
                store.insert("input_ln.gamma", Tensor::full(&[d], 1.0)),
                store.insert("input_ln.beta", Tensor::zeros(&[d])),
            )
        });
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut structs = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("layer{l}");
            let w_q = store.insert(format!("{p}.w_q"), xavier(rng, d, d, &[d, d]));
            let w_k = store.insert(format!("{p}.w_k"), xavier(rng, d, d, &[d, d]));
            let w_v = store.insert(format!("{p}.w_v"), xavier(rng, d, d, &[d, d]));
            let mut w_out_init = xavier(rng, d, d, &[d, d]);
            w_out_init.data_mut().iter_mut().for_each(|w| *w *= cfg.out_init_gain);
            let w_out = store.insert(format!("{p}.w_out"), w_out_init);
            let b_out = store.insert(format!("{p}.b_out"), Tensor::zeros(&[d]));
            let ffn = cfg.ffn.then(|| {
                [
                    store.insert(format!("{p}.ffn.w1"), xavier(rng, d, d, &[d, d])),
                    store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[d])),
                    store.insert(format!("{p}.ffn.w2"), xavier(rng, d, d, &[d, d])),
                    store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d])),
                ]
            });
            layers.push(LayerIds {
                w_q,
                w_k,
                w_v,
                w_out,
                b_out,
                ffn,
            });

            if cfg.tie_structure && l > 0 {
                continue;
            }
            let sp = if cfg.tie_structure { "struct".to_string() } else { p };
            let k_rows = cfg.k_max as usize + 1;
            structs.push(StructIds {
                w_s: store.insert(format!("{sp}.topo.w_s"), xavier(rng, 3, de, &[3, de])),
                b_s: store.insert(format!("{sp}.topo.b_s"), Tensor::zeros(&[de])),
                ln_gamma: store.insert(format!("{sp}.topo.ln_gamma"), Tensor::full(&[de], 1.0)),
                ln_beta: store.insert(format!("{sp}.topo.ln_beta"), Tensor::zeros(&[de])),
                type_table: store.insert(
                    format!("{sp}.path.type_table"),
                    normal(rng, 1.0, &[EdgeType::COUNT + 1, de]),
                ),
                dur_table: store.insert(format!("{sp}.path.dur_table"), normal(rng, 1.0, &[k_rows, de])),
                conv_kernel: store.insert(
                    format!("{sp}.path.conv_kernel"),
                    xavier(rng, cfg.conv_width * de, de, &[cfg.conv_width, de, de]),
                ),
                conv_bias: store.insert(format!("{sp}.path.conv_bias"), Tensor::zeros(&[de])),
                unreachable: store.insert(format!("{sp}.path.unreachable"), normal(rng, 1.0, &[1, de])),
                w_lambda: store.insert(
                    format!("{sp}.w_lambda"),
                    normal(rng, cfg.modulation_init_std, &[2 * de, h]),
                ),
                w_sigma: store.insert(
                    format!("{sp}.w_sigma"),
                    normal(rng, cfg.modulation_init_std, &[2 * de, h]),
                ),
            });
        }

        let w_o = store.insert("head.w_o", xavier(rng, d, 1, &[d, 1]));
        let b_o = store.insert("head.b_o", Tensor::zeros(&[1]));

        Ok(Self {
            cfg,
            node_count,
            store,
            x,
            w_o,
            b_o,
            layers,
            structs,
            input_ln,
        })
    }

    pub fn config(&self) -> &SgtConfig {
        &self.cfg
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `H⁰ = X`.
    pub fn initial_state(&self) -> HiddenState {
        HiddenState::new(self.store.get(self.x).value().clone())
    }

    /// Records `X` on `tape` (a constant when frozen).
    pub fn x_var(&self, tape: &Tape) -> Var {
        tape.param(&self.store, self.x)
    }

    fn p(&self, tape: &Tape, id: ParamId) -> Var {
        tape.param(&self.store, id)
    }

    fn structs_for(&self, layer: usize) -> &StructIds {
        if self.cfg.tie_structure {
            &self.structs[0]
        } else {
            &self.structs[layer]
        }
    }

    /// Per-head raw scores `QₕKₕᵀ/√(d/n_heads)` (each `[n, n]`) and the
    /// value matrix `H W_V` (`[n, d]`).
    pub fn semantic_attention(&self, tape: &Tape, h: Var, layer: usize) -> Result<(Vec<Var>, Var), ModelError> {
        let ids = &self.layers[layer];
        let q = tape.matmul(h, self.p(tape, ids.w_q))?;
        let k = tape.matmul(h, self.p(tape, ids.w_k))?;
        let v = tape.matmul(h, self.p(tape, ids.w_v))?;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut scores = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dk, (hd + 1) * dk)?;
            let kh = tape.slice_cols(k, hd * dk, (hd + 1) * dk)?;
            let a = tape.matmul(qh, tape.transpose(kh)?)?;
            scores.push(tape.scale(a, scale));
        }
        Ok((scores, v))
    }

    /// `LayerNorm(attr·W_s + b_s)` for `attrs` rows `[sd_out, td_in, spd]`.
    pub fn encode_topo(&self, tape: &Tape, attrs: Var, layer: usize) -> Result<Var, ModelError> {
        let s = self.structs_for(layer);
        let z = tape.add_row(tape.matmul(attrs, self.p(tape, s.w_s))?, self.p(tape, s.b_s))?;
        Ok(tape.layer_norm(z, self.p(tape, s.ln_gamma), self.p(tape, s.ln_beta), self.cfg.ln_eps)?)
    }

    /// Path features for every distinct path signature of `st` followed by
    /// the unreachable row, `[U_p + 1, d_e]`.
    pub fn encode_path(&self, tape: &Tape, st: &StepStructure, layer: usize) -> Result<Var, ModelError> {
        let s = self.structs_for(layer);
        let (u, len, de) = (st.unique_paths(), st.path_len, self.cfg.d_e);
        let re = tape.embedding_lookup(self.p(tape, s.type_table), &st.path_type_ids)?;
        let rw = tape.embedding_lookup(self.p(tape, s.dur_table), &st.path_dur_ids)?;
        let rp = tape.mul(re, rw)?;
        let pe = positional_encoding(len, de, self.cfg.pe_base);
        let tiled: Vec<f64> = (0..u).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = tape.constant(Tensor::new(vec![u * len, de], tiled)?);
        let x = tape.reshape(tape.add(rp, pe)?, &[u, len, de])?;
        let pooled = tape.conv1d_collapse_batch(
            x,
            self.p(tape, s.conv_kernel),
            self.p(tape, s.conv_bias),
            &st.path_mask,
        )?;
        Ok(tape.concat_rows(&[pooled, self.p(tape, s.unreachable)])?)
    }

    /// Pairwise `λ = 1 + W_λ·r` and `σ = W_σ·r` with `r = r_s ⊕ r_p`.
    /// `None` when no structural input is enabled.
    pub fn modulation(&self, tape: &Tape, st: &StepStructure, layer: usize) -> Result<Option<Modulation>, ModelError> {
        if !self.cfg.structure_active() {
            return Ok(None);
        }
        let s = self.structs_for(layer);
        let de = self.cfg.d_e;
        let w_lam = self.p(tape, s.w_lambda);
        let w_sig = self.p(tape, s.w_sigma);
        let mut lam: Option<Var> = None;
        let mut sig: Option<Var> = None;
        let mut accumulate = |lam_part: Var, sig_part: Var| -> Result<(), TensorError> {
            lam = Some(match lam {
                Some(v) => tape.add(v, lam_part)?,
                None => lam_part,
            });
            sig = Some(match sig {
                Some(v) => tape.add(v, sig_part)?,
                None => sig_part,
            });
            Ok(())
        };
        if self.cfg.use_topo_attr {
            let r_s = self.encode_topo(tape, tape.constant(st.topo_attrs.clone()), layer)?;
            let l = tape.matmul(r_s, tape.slice_rows(w_lam, 0, de)?)?;
            let g = tape.matmul(r_s, tape.slice_rows(w_sig, 0, de)?)?;
            accumulate(
                tape.embedding_lookup(l, &st.topo_idx)?,
                tape.embedding_lookup(g, &st.topo_idx)?,
            )?;
        }
        if self.cfg.use_path_attr {
            let r_p = self.encode_path(tape, st, layer)?;
            let l = tape.matmul(r_p, tape.slice_rows(w_lam, de, 2 * de)?)?;
            let g = tape.matmul(r_p, tape.slice_rows(w_sig, de, 2 * de)?)?;
            accumulate(
                tape.embedding_lookup(l, &st.path_idx)?,
                tape.embedding_lookup(g, &st.path_idx)?,
            )?;
        }
        Ok(Some(Modulation {
            lambda: tape.add_scalar(lam.expect("structure active"), 1.0),
            sigma: sig.expect("structure active"),
        }))
    }

    /// One attention layer over all nodes.
    pub fn sgt_layer(&self, tape: &Tape, h: Var, st: &StepStructure, layer: usize) -> Result<Var, ModelError> {
        let n = self.node_count;
        let (scores, v) = self.semantic_attention(tape, h, layer)?;
        let modulation = self.modulation(tape, st, layer)?;
        let dk = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(scores.len());
        for (hd, a) in scores.into_iter().enumerate() {
            let a = match &modulation {
                Some(m) => {
                    let lam = tape.reshape(tape.slice_cols(m.lambda, hd, hd + 1)?, &[n, n])?;
                    let sig = tape.reshape(tape.slice_cols(m.sigma, hd, hd + 1)?, &[n, n])?;
                    structural_modulation(tape, a, lam, sig)?
                }
                None => a,
            };
            let w = match self.cfg.normalization {
                Normalization::Softmax => tape.softmax_rows(a),
                Normalization::RowSum => tape.row_sum_normalize(a),
            };
            let vh = tape.slice_cols(v, hd * dk, (hd + 1) * dk)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let ids = &self.layers[layer];
        let cat = tape.concat_cols(&heads)?;
        let mut out = tape.add_row(tape.matmul(cat, self.p(tape, ids.w_out))?, self.p(tape, ids.b_out))?;
        if let Some([w1, b1, w2, b2]) = ids.ffn {
            let hidden = tape.relu(tape.add_row(tape.matmul(out, self.p(tape, w1))?, self.p(tape, b1))?);
            let f = tape.add_row(tape.matmul(hidden, self.p(tape, w2))?, self.p(tape, b2))?;
            out = tape.add(out, f)?;
        }
        Ok(out)
    }

    /// `H_t = Ĥ + H_{t-1}` on `tape`, with `Ĥ` the layer stack applied to
    /// `H_{t-1}` (layer-normalized first when `input_norm` is set).
    pub fn forward_step_var(&self, tape: &Tape, h_prev: Var, st: &StepStructure) -> Result<Var, ModelError> {
        let shape = tape.shape(h_prev);
        if shape.first() != Some(&self.node_count) || st.node_count != self.node_count {
            return Err(ModelError::NodeCount {
                expected: self.node_count,
                got: if st.node_count != self.node_count { st.node_count } else { shape[0] },
            });
        }
        let mut h = match self.input_ln {
            Some((g, b)) => tape.layer_norm(h_prev, self.p(tape, g), self.p(tape, b), self.cfg.ln_eps)?,
            None => h_prev,
        };
        for l in 0..self.cfg.n_layers {
            h = self.sgt_layer(tape, h, st, l)?;
            if !tape.is_finite(h) {
                return Err(ModelError::NonFinite { layer: l });
            }
        }
        Ok(tape.add(h, h_prev)?)
    }

    /// Forward-only step.
    pub fn forward_step(&self, h_prev: &HiddenState, st: &StepStructure) -> Result<HiddenState, ModelError> {
        let tape = Tape::new();
        let h = tape.constant(h_prev.tensor().clone());
        let out = self.forward_step_var(&tape, h, st)?;
        Ok(HiddenState::new(tape.value(out)))
    }

    /// `|h_i − h_j|` rows for `pairs`, `[m, d]`.
    pub fn edge_features_var(&self, tape: &Tape, h: Var, pairs: &[Edge]) -> Result<Var, ModelError> {
        let src: Vec<usize> = pairs.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = pairs.iter().map(|e| e.1).collect();
        let hi = tape.embedding_lookup(h, &src)?;
        let hj = tape.embedding_lookup(h, &dst)?;
        Ok(tape.abs(tape.sub(hi, hj)?))
    }

    /// `sigmoid(W_o·|h_i − h_j| + b_o)` for `pairs`, `[m, 1]`.
    pub fn link_scores_var(&self, tape: &Tape, h: Var, pairs: &[Edge]) -> Result<Var, ModelError> {
        let f = self.edge_features_var(tape, h, pairs)?;
        let logits = tape.add_row(tape.matmul(f, self.p(tape, self.w_o))?, self.p(tape, self.b_o))?;
        Ok(tape.sigmoid(logits))
    }

    pub fn link_score(&self, h: &HiddenState, i: NodeId, j: NodeId) -> f64 {
        let w = self.store.get(self.w_o).value().data();
        let b = self.store.get(self.b_o).value().data()[0];
        let z: f64 = h
            .row(i)
            .iter()
            .zip(h.row(j))
            .zip(w)
            .map(|((a, c), w)| w * (a - c).abs())
            .sum::<f64>()
            + b;
        crate::tensor::sigmoid_scalar(z)
    }
}

/// `â = λ ⊙ a + σ`.
pub fn structural_modulation(tape: &Tape, a: Var, lambda: Var, sigma: Var) -> Result<Var, ModelError> {
    Ok(tape.add(tape.mul(lambda, a)?, sigma)?)
}

/// `|h_i − h_j|` rows as plain vectors.
pub fn edge_features(h: &HiddenState, pairs: &[Edge]) -> Vec<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| h.row(i).iter().zip(h.row(j)).map(|(a, b)| (a - b).abs()).collect())
        .collect()
}
