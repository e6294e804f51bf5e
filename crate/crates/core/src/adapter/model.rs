//! Parameter registry and forward passes for the toy biased transducer.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{biasing_attention, fuse, AttentionScores};
use super::catalog::encode_catalog;
use super::lstm::{lstm_run, LstmWeights};
use crate::bias_list::BiasList;
use crate::params::ParamStore;
use crate::tensor::{Tape, TensorError, TensorId};

/// Static model sizes. `classes` counts the blank, so it is vocabulary
/// size + 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub joint_hidden: usize,
    pub classes: usize,
    pub n_heads: usize,
    pub catalog_hidden: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            enc_hidden: 96,
            embed_dim: 64,
            joint_hidden: 64,
            classes: 51,
            n_heads: 4,
            catalog_hidden: 32,
            max_symbols_per_frame: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim % self.n_heads != 0 {
            return Err(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.classes < 2 {
            return Err(format!("need at least blank plus one token, got {}", self.classes));
        }
        Ok(())
    }
}

/// Which parameters participate in the gradient on a given tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Inference: nothing requires gradients.
    Frozen,
    /// Pretraining: every parameter is trainable.
    All,
    /// Adapter training: only `adapter.*` parameters receive gradients.
    AdaptersOnly,
}

/// Per-tape leaf handles for every registered parameter.
pub struct Bound {
    ids: HashMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Iterates bound (name, id) pairs for gradient collection.
    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &i)| (n.as_str(), i))
    }
}

/// Everything the biased forward pass produces for one utterance.
pub struct BiasedForward {
    /// Joint log-probabilities, `[(T * (U+1)) x V]` in grid row order.
    pub log_probs: TensorId,
    /// Audio-adapter scores over encoder frames, `[T x (S+1)]` average.
    pub a_enc: AttentionScores,
    /// Text-adapter scores over all predictor states, `[(U+1) x (S+1)]`.
    pub a_dec: AttentionScores,
}

/// Model = sizes + named parameters. Forward passes borrow a [`Bound`] so a
/// whole batch can share one tape.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with seed-deterministic initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model configuration");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_base(&cfg, &mut store, &mut rng);
        register_adapters(&cfg, &mut store, &mut rng);
        Self { cfg, store }
    }

    /// Wraps a store loaded from a checkpoint. Panics if any expected
    /// parameter is missing or misshapen.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Self {
        cfg.validate().expect("invalid model configuration");
        let reference = Model::new(cfg, 0);
        for name in reference.store.names() {
            let want = reference.store.get(name).unwrap();
            let got = store
                .get(name)
                .unwrap_or_else(|| panic!("checkpoint is missing parameter {name}"));
            assert!(
                got.rows == want.rows && got.cols == want.cols,
                "parameter {name} has shape {}x{}, expected {}x{}",
                got.rows,
                got.cols,
                want.rows,
                want.cols
            );
        }
        Self { cfg, store }
    }

    pub fn bind(&self, tape: &mut Tape, scope: TrainScope) -> Bound {
        let mut ids = HashMap::new();
        for name in self.store.names() {
            let rg = match scope {
                TrainScope::Frozen => false,
                TrainScope::All => true,
                TrainScope::AdaptersOnly => name.starts_with("adapter."),
            };
            let id = self
                .store
                .bind(tape, name, rg)
                .expect("registered parameters always bind");
            ids.insert(name.to_string(), id);
        }
        Bound { ids }
    }

    /// Per-frame feedforward encoder: two tanh layers, no subsampling.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[f64],
        t_len: usize,
    ) -> Result<TensorId, TensorError> {
        let x = tape.leaf(features.to_vec(), t_len, self.cfg.feature_dim, false)?;
        let z1 = tape.matmul(x, bound.id("base.enc.w1"))?;
        let b1 = tape.repeat_rows(bound.id("base.enc.b1"), t_len)?;
        let z1 = tape.add(z1, b1)?;
        let h1 = tape.tanh(z1);
        let z2 = tape.matmul(h1, bound.id("base.enc.w2"))?;
        let b2 = tape.repeat_rows(bound.id("base.enc.b2"), t_len)?;
        let z2 = tape.add(z2, b2)?;
        Ok(tape.tanh(z2))
    }

    /// Prediction network over start-of-sequence plus `prev_tokens`,
    /// emitting one state per consumed symbol (`U + 1` rows). The blank
    /// embedding row doubles as the start symbol.
    pub fn predictor_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prev_tokens: &[usize],
    ) -> Result<TensorId, TensorError> {
        let embed = bound.id("base.pred.embed");
        let mut inputs = Vec::with_capacity(prev_tokens.len() + 1);
        inputs.push(tape.row(embed, 0)?);
        for &tok in prev_tokens {
            inputs.push(tape.row(embed, tok)?);
        }
        let w = self.predictor_weights(bound);
        let states = lstm_run(tape, &w, &inputs)?;
        tape.stack_rows(&states)
    }

    pub(super) fn predictor_weights(&self, bound: &Bound) -> LstmWeights {
        LstmWeights {
            wx: bound.id("base.pred.wx"),
            wh: bound.id("base.pred.wh"),
            b: bound.id("base.pred.b"),
            hidden: self.cfg.embed_dim,
        }
    }

    /// Joint over every (frame, predictor-state) pair: project both sides to
    /// the joint width, add pairwise, tanh, then log-softmax over classes.
    /// Row `t * (U+1) + u` of the result is grid node `(t, u)`.
    pub fn joint_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: TensorId,
        dec: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (dec_rows, _) = tape.shape(dec);
        let e = tape.matmul(enc, bound.id("base.joint.we"))?;
        let d = tape.matmul(dec, bound.id("base.joint.wd"))?;
        let db = tape.repeat_rows(bound.id("base.joint.b"), dec_rows)?;
        let d = tape.add(d, db)?;
        let grid = tape.outer_row_sum(e, d)?;
        let z = tape.tanh(grid);
        let logits = tape.matmul(z, bound.id("base.joint.wo"))?;
        let (rows, _) = tape.shape(logits);
        let bo = tape.repeat_rows(bound.id("base.joint.bo"), rows)?;
        let logits = tape.add(logits, bo)?;
        tape.log_softmax_rows(logits)
    }

    /// Auxiliary CTC head over encoder states, for forced alignment.
    pub fn ctc_log_probs(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (rows, _) = tape.shape(enc);
        let z = tape.matmul(enc, bound.id("base.ctc.w"))?;
        let b = tape.repeat_rows(bound.id("base.ctc.b"), rows)?;
        let z = tape.add(z, b)?;
        tape.log_softmax_rows(z)
    }

    /// Unbiased lattice for pretraining and the vanilla system.
    pub fn plain_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[f64],
        t_len: usize,
        tokens: &[usize],
    ) -> Result<TensorId, TensorError> {
        let enc = self.encoder_forward(tape, bound, features, t_len)?;
        let dec = self.predictor_forward(tape, bound, tokens)?;
        self.joint_forward(tape, bound, enc, dec)
    }

    /// Biased lattice: both streams are fused with their adapter's biasing
    /// vectors against the shared phrase embeddings `p`.
    pub fn biased_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[f64],
        t_len: usize,
        tokens: &[usize],
        p: TensorId,
    ) -> Result<BiasedForward, TensorError> {
        let enc = self.encoder_forward(tape, bound, features, t_len)?;
        let dec = self.predictor_forward(tape, bound, tokens)?;
        let (a_enc, b_enc) =
            biasing_attention(tape, &self.cfg, bound, "adapter.audio", enc, p)?;
        let (a_dec, b_dec) =
            biasing_attention(tape, &self.cfg, bound, "adapter.text", dec, p)?;
        let enc = fuse(tape, enc, b_enc)?;
        let dec = fuse(tape, dec, b_dec)?;
        let log_probs = self.joint_forward(tape, bound, enc, dec)?;
        Ok(BiasedForward {
            log_probs,
            a_enc,
            a_dec,
        })
    }

    /// Encodes a bias list with the shared catalog encoder.
    pub fn catalog(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        bias: &BiasList,
    ) -> Result<TensorId, TensorError> {
        encode_catalog(tape, &self.cfg, bound, bias)
    }
}

fn register_base(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (f, h, e) = (cfg.feature_dim, cfg.enc_hidden, cfg.embed_dim);
    let (j, v) = (cfg.joint_hidden, cfg.classes);
    store.register("base.enc.w1", f, h, f, rng);
    store.register("base.enc.b1", 1, h, f, rng);
    store.register("base.enc.w2", h, e, h, rng);
    store.register("base.enc.b2", 1, e, h, rng);
    store.register("base.pred.embed", v, e, e, rng);
    store.register("base.pred.wx", e, 4 * e, e, rng);
    store.register("base.pred.wh", e, 4 * e, e, rng);
    store.register("base.pred.b", 1, 4 * e, e, rng);
    store.register("base.joint.we", e, j, e, rng);
    store.register("base.joint.wd", e, j, e, rng);
    store.register("base.joint.b", 1, j, e, rng);
    store.register("base.joint.wo", j, v, j, rng);
    store.register("base.joint.bo", 1, v, j, rng);
    store.register("base.ctc.w", e, v, e, rng);
    store.register("base.ctc.b", 1, v, e, rng);
}

fn register_adapters(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let (e, v, ch) = (cfg.embed_dim, cfg.classes, cfg.catalog_hidden);
    store.register("adapter.catalog.embed", v, e, e, rng);
    for dir in ["fwd", "bwd"] {
        store.register(&format!("adapter.catalog.{dir}.wx"), e, 4 * ch, e, rng);
        store.register(&format!("adapter.catalog.{dir}.wh"), ch, 4 * ch, ch, rng);
        store.register(&format!("adapter.catalog.{dir}.b"), 1, 4 * ch, e, rng);
    }
    store.register("adapter.catalog.proj", 2 * ch, e, 2 * ch, rng);
    store.register("adapter.catalog.proj_b", 1, e, 2 * ch, rng);
    store.register("adapter.catalog.no_bias", 1, e, e, rng);
    for stream in ["audio", "text"] {
        store.register(&format!("adapter.{stream}.w_in"), e, e, e, rng);
        for head in 0..cfg.n_heads {
            store.register(&format!("adapter.{stream}.h{head}.wq"), e, e, e, rng);
            store.register(&format!("adapter.{stream}.h{head}.wk"), e, e, e, rng);
            store.register(&format!("adapter.{stream}.h{head}.wv"), e, e, e, rng);
        }
        // Zero output projection: the freshly adapted model computes exactly
        // the base forward pass until training moves it.
        store.register(
            &format!("adapter.{stream}.w_out"),
            cfg.n_heads * e,
            e,
            cfg.n_heads * e,
            rng,
        );
        store
            .get_mut(&format!("adapter.{stream}.w_out"))
            .unwrap()
            .data
            .fill(0.0);
    }
}
