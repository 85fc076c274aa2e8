//! Encoder–decoder set-prediction transformer executed along multiple
//! decoding paths.
//!
//! One decoder is shared by every path and stage; a path only owns its
//! per-stage learnable queries and readout heads. Stage j of path k
//! feeds the previous stage's output embeddings (zeros for stage 1)
//! plus the stage query back through the shared decoder, and reads out
//! the triplet elements assigned to that stage. Path 1 decodes all
//! three elements in a single stage and is the inference path, so a
//! model trained with four paths runs inference with exactly the ops
//! and parameters of a single-path model.
//!
//! Parameters live in a name-keyed store; sharing is literal: every
//! path resolves the same decoder parameter names to the same store
//! entries, and during one forward pass each name is tracked onto the
//! tape at most once, so shared-parameter gradients accumulate in one
//! buffer.

use crate::data::FeatureGrid;
use crate::losses::{sigmoid_values, softmax_values};
use crate::matching::QueryValues;
use crate::rng::{fnv1a, SplitMix64};
use crate::tape::Tape;
use crate::tensor::{NodeId, Tensor, TensorError};
use std::collections::BTreeMap;
use thiserror::Error;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: shape {found:?} does not match expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("feature grid has {found} channels, model expects {expected}")]
    ChannelMismatch { found: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_queries: usize,
    pub n_obj_categories: usize,
    pub n_actions: usize,
    pub grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_queries: 8,
            n_obj_categories: 5,
            n_actions: 6,
            grid: 8,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_queries: 4,
            n_obj_categories: 5,
            n_actions: 6,
            grid: 4,
        }
    }

    pub fn n_channels(&self) -> usize {
        1 + self.n_obj_categories
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let positive = [
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.n_queries,
            self.n_obj_categories,
            self.n_actions,
            self.grid,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One element of the <human, object, interaction> triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Element {
    Human,
    Object,
    Interaction,
}

pub const ALL_ELEMENTS: [Element; 3] = [Element::Human, Element::Object, Element::Interaction];

/// One decoding path: ordered stages, each reading out a disjoint
/// subset of the triplet elements; the subsets union to all three.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSpec {
    pub path_id: u8,
    pub stages: Vec<Vec<Element>>,
}

impl PathSpec {
    /// The four canonical paths:
    /// 1: x → HOI, 2: x → HO → I, 3: x → HI → O, 4: x → OI → H.
    pub fn canonical(path_id: u8) -> Result<Self> {
        use Element::*;
        let stages = match path_id {
            1 => vec![vec![Human, Object, Interaction]],
            2 => vec![vec![Human, Object], vec![Interaction]],
            3 => vec![vec![Human, Interaction], vec![Object]],
            4 => vec![vec![Object, Interaction], vec![Human]],
            other => {
                return Err(ModelError::Config(format!(
                    "unknown path id {other}; paths are 1..=4"
                )))
            }
        };
        Ok(Self { path_id, stages })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > 2 {
            return Err(ModelError::Config(format!(
                "path {} must have 1 or 2 stages",
                self.path_id
            )));
        }
        let mut seen = Vec::new();
        for stage in &self.stages {
            for e in stage {
                if seen.contains(e) {
                    return Err(ModelError::Config(format!(
                        "path {}: element {e:?} appears in two stages",
                        self.path_id
                    )));
                }
                seen.push(*e);
            }
        }
        if seen.len() != ALL_ELEMENTS.len() {
            return Err(ModelError::Config(format!(
                "path {}: stages must cover H, O and I",
                self.path_id
            )));
        }
        Ok(())
    }

    /// Which stage (1-based) reads out `element`.
    pub fn stage_of(&self, element: Element) -> usize {
        self.stages
            .iter()
            .position(|s| s.contains(&element))
            .expect("validated path covers all elements")
            + 1
    }
}

/// 1-based stage that produced each triplet element of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOrigin {
    pub human: usize,
    pub object: usize,
    pub interaction: usize,
}

/// Assembled per-query triplet predictions of one path.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// [N × 4] boxes, post-sigmoid (cx, cy, w, h) in [0, 1].
    b_h: Tensor,
    b_o: Tensor,
    /// [N × (categories + 1)] object-category logits; the final column
    /// is the no-object slot.
    obj_logits: Tensor,
    /// [N × actions] per-action logits (sigmoid-typed).
    act_logits: Tensor,
    pub stage_of: StageOrigin,
}

impl PredictionSet {
    pub fn new(
        b_h: Tensor,
        b_o: Tensor,
        obj_logits: Tensor,
        act_logits: Tensor,
        stage_of: StageOrigin,
    ) -> Result<Self> {
        let n = b_h.shape()[0];
        for (name, t, cols) in [
            ("b_h", &b_h, 4usize),
            ("b_o", &b_o, 4),
        ] {
            if t.ndim() != 2 || t.shape()[0] != n || t.shape()[1] != cols {
                return Err(ModelError::ParamShape {
                    name: name.into(),
                    found: t.shape().to_vec(),
                    expected: vec![n, cols],
                });
            }
            if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(ModelError::Config(format!(
                    "{name} holds out-of-range box coordinates"
                )));
            }
        }
        for (name, t) in [("obj_logits", &obj_logits), ("act_logits", &act_logits)] {
            if t.ndim() != 2 || t.shape()[0] != n {
                return Err(ModelError::ParamShape {
                    name: name.into(),
                    found: t.shape().to_vec(),
                    expected: vec![n, 0],
                });
            }
        }
        Ok(Self {
            b_h,
            b_o,
            obj_logits,
            act_logits,
            stage_of,
        })
    }

    pub fn b_h(&self) -> &Tensor {
        &self.b_h
    }

    pub fn b_o(&self) -> &Tensor {
        &self.b_o
    }

    pub fn obj_logits(&self) -> &Tensor {
        &self.obj_logits
    }

    pub fn act_logits(&self) -> &Tensor {
        &self.act_logits
    }

    pub fn n_queries(&self) -> usize {
        self.b_h.shape()[0]
    }

    pub fn n_categories_with_noobj(&self) -> usize {
        self.obj_logits.shape()[1]
    }

    pub fn n_actions(&self) -> usize {
        self.act_logits.shape()[1]
    }

    /// Plain per-query values (softmaxed categories, sigmoided
    /// actions) for matching and evaluation.
    pub fn values(&self) -> Vec<QueryValues> {
        use crate::data::Box2;
        (0..self.n_queries())
            .map(|i| {
                let bh = self.b_h.row_slice(i);
                let bo = self.b_o.row_slice(i);
                QueryValues {
                    b_h: Box2::new(bh[0], bh[1], bh[2], bh[3]),
                    b_o: Box2::new(bo[0], bo[1], bo[2], bo[3]),
                    obj_probs: softmax_values(self.obj_logits.row_slice(i)),
                    act_probs: sigmoid_values(self.act_logits.row_slice(i)),
                }
            })
            .collect()
    }
}

// ---- parameter store --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform(−1/√fan_in, 1/√fan_in).
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Named parameter tensors with deterministic per-name initialization.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// Replace a parameter's value; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let current = self.get(name)?;
        if current.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                found: value.shape().to_vec(),
                expected: current.shape().to_vec(),
            });
        }
        self.params.insert(name.to_string(), value.detached());
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_tensors(&self) -> usize {
        self.params.len()
    }

    /// Total trainable scalar count.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn insert_init(&mut self, name: String, shape: Vec<usize>, init: Init, seed: u64) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { fan_in } => {
                // Values depend only on (seed, name), never on which
                // other parameters exist.
                let mut rng = SplitMix64::new(seed ^ fnv1a(name.as_bytes()));
                let s = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.next_range(-s, s)).collect()
            }
        };
        let tensor = Tensor::new(shape, data).expect("init tensor");
        self.params.insert(name, tensor);
    }
}

// ---- binding ------------------------------------------------------------

/// Per-forward-pass bridge between the parameter store and a tape.
/// Each parameter is tracked as a leaf at most once, so every use of a
/// shared parameter aliases one tape node.
pub struct Binding<'s> {
    store: &'s ParamStore,
    tracked: BTreeMap<String, Tensor>,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            tracked: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Tensor> {
        if let Some(t) = self.tracked.get(name) {
            return Ok(t.clone());
        }
        let value = self.store.get(name)?;
        let tracked = tape.leaf(value);
        self.tracked.insert(name.to_string(), tracked.clone());
        Ok(tracked)
    }

    /// Names touched so far this pass, sorted.
    pub fn touched(&self) -> Vec<String> {
        self.tracked.keys().cloned().collect()
    }

    /// Tape node backing a touched parameter.
    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.tracked.get(name).and_then(Tensor::node)
    }
}

// ---- model ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    paths: Vec<PathSpec>,
    share_decoder: bool,
    pos_encoding: Tensor,
}

impl Model {
    /// Build a model with the given active paths (must contain path 1)
    /// and deterministic, per-name seeded initialization.
    pub fn new(cfg: ModelConfig, path_ids: &[u8], share_decoder: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if path_ids.is_empty() || !path_ids.contains(&1) {
            return Err(ModelError::Config(
                "active paths must be non-empty and contain path 1".into(),
            ));
        }
        let mut ids: Vec<u8> = path_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let paths = ids
            .iter()
            .map(|&k| {
                let p = PathSpec::canonical(k)?;
                p.validate()?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut store = ParamStore::default();
        for (name, shape, init) in param_specs(&cfg, &paths, share_decoder) {
            store.insert_init(name, shape, init, seed);
        }
        let pos_encoding = sinusoidal_grid_encoding(cfg.grid, cfg.d_model);
        Ok(Self {
            cfg,
            store,
            paths,
            share_decoder,
            pos_encoding,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn share_decoder(&self) -> bool {
        self.share_decoder
    }

    pub fn path_ids(&self) -> Vec<u8> {
        self.paths.iter().map(|p| p.path_id).collect()
    }

    pub fn path_spec(&self, k: u8) -> Result<&PathSpec> {
        self.paths
            .iter()
            .find(|p| p.path_id == k)
            .ok_or_else(|| ModelError::Config(format!("path {k} is not active")))
    }

    fn decoder_prefix(&self, k: u8) -> String {
        if self.share_decoder {
            "dec".to_string()
        } else {
            format!("dec.p{k}")
        }
    }

    // ---- building blocks ----

    fn linear(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        x: &Tensor,
    ) -> Result<Tensor> {
        let w = bind.param(tape, &format!("{prefix}.w"))?;
        let b = bind.param(tape, &format!("{prefix}.b"))?;
        let xw = tape.matmul(x, &w)?;
        Ok(tape.add(&xw, &b)?)
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        x: &Tensor,
    ) -> Result<Tensor> {
        let g = bind.param(tape, &format!("{prefix}.g"))?;
        let b = bind.param(tape, &format!("{prefix}.b"))?;
        Ok(tape.layernorm(x, &g, &b, LN_EPS)?)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        q_in: &Tensor,
        kv_in: &Tensor,
    ) -> Result<Tensor> {
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let q = self.linear(tape, bind, &format!("{prefix}.q"), q_in)?;
        let k = self.linear(tape, bind, &format!("{prefix}.k"), kv_in)?;
        let v = self.linear(tape, bind, &format!("{prefix}.v"), kv_in)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(&q, lo, hi)?;
            let kh = tape.slice_cols(&k, lo, hi)?;
            let vh = tape.slice_cols(&v, lo, hi)?;
            let kt = tape.transpose(&kh)?;
            let scores = tape.matmul(&qh, &kt)?;
            let scaled = tape.mul_scalar(&scores, scale)?;
            let attn = tape.softmax(&scaled, 1)?;
            outs.push(tape.matmul(&attn, &vh)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let cat = tape.concat_cols(&refs)?;
        self.linear(tape, bind, &format!("{prefix}.o"), &cat)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        x: &Tensor,
    ) -> Result<Tensor> {
        let h = self.linear(tape, bind, &format!("{prefix}.1"), x)?;
        let a = tape.relu(&h)?;
        self.linear(tape, bind, &format!("{prefix}.2"), &a)
    }

    /// 2-layer readout MLP with ReLU, hidden width d_model.
    fn readout(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        prefix: &str,
        e: &Tensor,
    ) -> Result<Tensor> {
        let h = self.linear(tape, bind, &format!("{prefix}.1"), e)?;
        let a = tape.relu(&h)?;
        self.linear(tape, bind, &format!("{prefix}.2"), &a)
    }

    // ---- forward passes ----

    /// Linear patch projection of the rasterized grid plus additive 2-D
    /// sinusoidal position encoding. Bias-free, so an all-zero grid
    /// embeds to the position encodings alone.
    pub fn embed_features(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        grid: &FeatureGrid,
    ) -> Result<Tensor> {
        if grid.channels != self.cfg.n_channels() || grid.grid != self.cfg.grid {
            return Err(ModelError::ChannelMismatch {
                found: grid.channels,
                expected: self.cfg.n_channels(),
            });
        }
        let tokens = Tensor::new(
            vec![self.cfg.n_tokens(), self.cfg.n_channels()],
            grid.tokens(),
        )
        .map_err(ModelError::Tensor)?;
        let w = bind.param(tape, "embed.w")?;
        let projected = tape.matmul(&tokens, &w)?;
        Ok(tape.add(&projected, &self.pos_encoding)?)
    }

    /// Pre-norm encoder stack; shape preserved.
    pub fn encode(&self, tape: &mut Tape, bind: &mut Binding, features: &Tensor) -> Result<Tensor> {
        let mut x = features.clone();
        for l in 0..self.cfg.n_enc_layers {
            let p = format!("enc.{l}");
            let a_in = self.layer_norm(tape, bind, &format!("{p}.ln1"), &x)?;
            let attn = self.attention(tape, bind, &format!("{p}.attn"), &a_in, &a_in)?;
            x = tape.add(&x, &attn)?;
            let f_in = self.layer_norm(tape, bind, &format!("{p}.ln2"), &x)?;
            let ff = self.feed_forward(tape, bind, &format!("{p}.ffn"), &f_in)?;
            x = tape.add(&x, &ff)?;
        }
        self.layer_norm(tape, bind, "enc.ln_f", &x)
    }

    /// One pass through the shared decoder: query self-attention,
    /// cross-attention to the encoded features, feed-forward, all
    /// pre-norm. `e_prev` is zeros for stage 1.
    pub fn decode_stage(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        path_id: u8,
        e_prev: &Tensor,
        stage_query: &Tensor,
        x: &Tensor,
    ) -> Result<Tensor> {
        let dec = self.decoder_prefix(path_id);
        let mut h = tape.add(e_prev, stage_query)?;
        for l in 0..self.cfg.n_dec_layers {
            let p = format!("{dec}.{l}");
            let a_in = self.layer_norm(tape, bind, &format!("{p}.ln1"), &h)?;
            let sa = self.attention(tape, bind, &format!("{p}.self_attn"), &a_in, &a_in)?;
            h = tape.add(&h, &sa)?;
            let c_in = self.layer_norm(tape, bind, &format!("{p}.ln2"), &h)?;
            let ca = self.attention(tape, bind, &format!("{p}.cross_attn"), &c_in, x)?;
            h = tape.add(&h, &ca)?;
            let f_in = self.layer_norm(tape, bind, &format!("{p}.ln3"), &h)?;
            let ff = self.feed_forward(tape, bind, &format!("{p}.ffn"), &f_in)?;
            h = tape.add(&h, &ff)?;
        }
        self.layer_norm(tape, bind, &format!("{dec}.ln_f"), &h)
    }

    /// Execute path `k` on encoded features, applying each stage's
    /// readout heads as the stage completes.
    pub fn run_path(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        k: u8,
        x: &Tensor,
    ) -> Result<PredictionSet> {
        let spec = self.path_spec(k)?.clone();
        let n = self.cfg.n_queries;
        let mut e = Tensor::zeros(&[n, self.cfg.d_model]);
        let mut b_h = None;
        let mut b_o = None;
        let mut obj_logits = None;
        let mut act_logits = None;
        let mut origin = StageOrigin { human: 0, object: 0, interaction: 0 };
        for (idx, stage) in spec.stages.iter().enumerate() {
            let stage_no = idx + 1;
            let q = bind.param(tape, &format!("path{k}.s{stage_no}.query"))?;
            e = self.decode_stage(tape, bind, k, &e, &q, x)?;
            for element in stage {
                match element {
                    Element::Human => {
                        let out = self.readout(
                            tape,
                            bind,
                            &format!("path{k}.s{stage_no}.head_hbox"),
                            &e,
                        )?;
                        b_h = Some(tape.sigmoid(&out)?);
                        origin.human = stage_no;
                    }
                    Element::Object => {
                        let out = self.readout(
                            tape,
                            bind,
                            &format!("path{k}.s{stage_no}.head_obox"),
                            &e,
                        )?;
                        b_o = Some(tape.sigmoid(&out)?);
                        obj_logits = Some(self.readout(
                            tape,
                            bind,
                            &format!("path{k}.s{stage_no}.head_ocat"),
                            &e,
                        )?);
                        origin.object = stage_no;
                    }
                    Element::Interaction => {
                        act_logits = Some(self.readout(
                            tape,
                            bind,
                            &format!("path{k}.s{stage_no}.head_act"),
                            &e,
                        )?);
                        origin.interaction = stage_no;
                    }
                }
            }
        }
        PredictionSet::new(
            b_h.expect("validated path covers H"),
            b_o.expect("validated path covers O"),
            obj_logits.expect("validated path covers O"),
            act_logits.expect("validated path covers I"),
            origin,
        )
    }

    /// Run every active path on one encoded feature map.
    pub fn run_all_paths(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        x: &Tensor,
    ) -> Result<BTreeMap<u8, PredictionSet>> {
        let mut out = BTreeMap::new();
        for spec in &self.paths {
            let preds = self.run_path(tape, bind, spec.path_id, x)?;
            out.insert(spec.path_id, preds);
        }
        Ok(out)
    }

    /// Inference: embed → encode → path 1 only. Returns the prediction
    /// set together with the tape that recorded the executed ops.
    pub fn infer_p1(&self, grid: &FeatureGrid) -> Result<(PredictionSet, Tape)> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.store);
        let f = self.embed_features(&mut tape, &mut bind, grid)?;
        let x = self.encode(&mut tape, &mut bind, &f)?;
        let preds = self.run_path(&mut tape, &mut bind, 1, &x)?;
        Ok((preds, tape))
    }
}

/// 2-D sinusoidal position encoding over grid cells: the first half of
/// the embedding encodes the column, the second half the row.
fn sinusoidal_grid_encoding(grid: usize, d_model: usize) -> Tensor {
    let half = d_model / 2;
    let mut data = vec![0.0; grid * grid * d_model];
    let fill = |data: &mut [f64], token: usize, offset: usize, pos: f64, width: usize| {
        let mut i = 0;
        while 2 * i < width {
            let omega = 10000f64.powf(-((2 * i) as f64) / width as f64);
            data[token * d_model + offset + 2 * i] = (pos * omega).sin();
            if 2 * i + 1 < width {
                data[token * d_model + offset + 2 * i + 1] = (pos * omega).cos();
            }
            i += 1;
        }
    };
    for row in 0..grid {
        for col in 0..grid {
            let token = row * grid + col;
            fill(&mut data, token, 0, col as f64, half);
            fill(&mut data, token, half, row as f64, d_model - half);
        }
    }
    Tensor::new(vec![grid * grid, d_model], data).expect("position encoding")
}

/// Enumerate every parameter of a model layout.
fn param_specs(
    cfg: &ModelConfig,
    paths: &[PathSpec],
    share_decoder: bool,
) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let hidden = 2 * d;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();

    let layer_norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.g"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.b"), vec![d], Init::Zeros));
    };
    let attention = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        for proj in ["q", "k", "v", "o"] {
            specs.push((
                format!("{prefix}.{proj}.w"),
                vec![d, d],
                Init::Uniform { fan_in: d },
            ));
            specs.push((format!("{prefix}.{proj}.b"), vec![d], Init::Zeros));
        }
    };
    let ffn = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((
            format!("{prefix}.1.w"),
            vec![d, hidden],
            Init::Uniform { fan_in: d },
        ));
        specs.push((format!("{prefix}.1.b"), vec![hidden], Init::Zeros));
        specs.push((
            format!("{prefix}.2.w"),
            vec![hidden, d],
            Init::Uniform { fan_in: hidden },
        ));
        specs.push((format!("{prefix}.2.b"), vec![d], Init::Zeros));
    };
    let readout = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d_out: usize| {
        specs.push((
            format!("{prefix}.1.w"),
            vec![d, d],
            Init::Uniform { fan_in: d },
        ));
        specs.push((format!("{prefix}.1.b"), vec![d], Init::Zeros));
        specs.push((
            format!("{prefix}.2.w"),
            vec![d, d_out],
            Init::Uniform { fan_in: d },
        ));
        specs.push((format!("{prefix}.2.b"), vec![d_out], Init::Zeros));
    };

    // Patch embedding (bias-free).
    specs.push((
        "embed.w".to_string(),
        vec![cfg.n_channels(), d],
        Init::Uniform {
            fan_in: cfg.n_channels(),
        },
    ));

    // Encoder.
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        layer_norm(&mut specs, &format!("{p}.ln1"));
        attention(&mut specs, &format!("{p}.attn"));
        layer_norm(&mut specs, &format!("{p}.ln2"));
        ffn(&mut specs, &format!("{p}.ffn"));
    }
    layer_norm(&mut specs, "enc.ln_f");

    // Decoder(s).
    let dec_prefixes: Vec<String> = if share_decoder {
        vec!["dec".to_string()]
    } else {
        paths.iter().map(|p| format!("dec.p{}", p.path_id)).collect()
    };
    for dec in &dec_prefixes {
        for l in 0..cfg.n_dec_layers {
            let p = format!("{dec}.{l}");
            layer_norm(&mut specs, &format!("{p}.ln1"));
            attention(&mut specs, &format!("{p}.self_attn"));
            layer_norm(&mut specs, &format!("{p}.ln2"));
            attention(&mut specs, &format!("{p}.cross_attn"));
            layer_norm(&mut specs, &format!("{p}.ln3"));
            ffn(&mut specs, &format!("{p}.ffn"));
        }
        layer_norm(&mut specs, &format!("{dec}.ln_f"));
    }

    // Per-path stage queries and readout heads.
    for path in paths {
        let k = path.path_id;
        for (idx, stage) in path.stages.iter().enumerate() {
            let s = idx + 1;
            specs.push((
                format!("path{k}.s{s}.query"),
                vec![cfg.n_queries, d],
                Init::Uniform { fan_in: d },
            ));
            for element in stage {
                match element {
                    Element::Human => {
                        readout(&mut specs, &format!("path{k}.s{s}.head_hbox"), 4);
                    }
                    Element::Object => {
                        readout(&mut specs, &format!("path{k}.s{s}.head_obox"), 4);
                        readout(
                            &mut specs,
                            &format!("path{k}.s{s}.head_ocat"),
                            cfg.n_obj_categories + 1,
                        );
                    }
                    Element::Interaction => {
                        readout(&mut specs, &format!("path{k}.s{s}.head_act"), cfg.n_actions);
                    }
                }
            }
        }
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, render_features};

    fn default_model(paths: &[u8]) -> Model {
        Model::new(ModelConfig::default(), paths, true, 7).unwrap()
    }

    #[test]
    fn canonical_paths_have_expected_stages() {
        use Element::*;
        let p1 = PathSpec::canonical(1).unwrap();
        assert_eq!(p1.stages, vec![vec![Human, Object, Interaction]]);
        let p3 = PathSpec::canonical(3).unwrap();
        assert_eq!(p3.stages, vec![vec![Human, Interaction], vec![Object]]);
        assert_eq!(p3.stage_of(Object), 2);
        assert_eq!(p3.stage_of(Interaction), 1);
        for k in 1..=4 {
            PathSpec::canonical(k).unwrap().validate().unwrap();
        }
        assert!(PathSpec::canonical(5).is_err());
    }

    #[test]
    fn embed_shape_and_zero_grid() {
        let model = default_model(&[1]);
        let scene = generate_dataset(1, 1).unwrap().remove(0);
        let grid = render_features(&scene, 8);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let f = model.embed_features(&mut tape, &mut bind, &grid).unwrap();
        assert_eq!(f.shape(), &[64, 32]);

        // All-zero grid embeds to the position encodings alone.
        let zero = FeatureGrid {
            grid: 8,
            channels: 6,
            values: vec![0.0; 6 * 64],
        };
        let fz = model.embed_features(&mut tape, &mut bind, &zero).unwrap();
        assert_eq!(fz.data(), model.pos_encoding.data());
    }

    #[test]
    fn distinct_scenes_embed_distinctly() {
        let model = default_model(&[1]);
        let scenes = generate_dataset(200, 5).unwrap();
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let mut seen: Vec<(Vec<u8>, Vec<f64>)> = Vec::new();
        for pair in scenes.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let ga = render_features(&pair[0], 8);
            let gb = render_features(&pair[1], 8);
            if ga == gb {
                continue;
            }
            let fa = model.embed_features(&mut tape, &mut bind, &ga).unwrap();
            let fb = model.embed_features(&mut tape, &mut bind, &gb).unwrap();
            assert_ne!(fa.data(), fb.data(), "distinct grids must embed distinctly");
        }
        let _ = &mut seen;
    }

    #[test]
    fn encode_preserves_shape_and_is_permutation_equivariant() {
        let model = default_model(&[1]);
        let mut rng = crate::rng::SplitMix64::new(3);
        let x = Tensor::new(vec![64, 32], (0..64 * 32).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let enc = model.encode(&mut tape, &mut bind, &x).unwrap();
        assert_eq!(enc.shape(), &[64, 32]);

        // Permute token rows; the encoded rows permute identically.
        let mut perm: Vec<usize> = (0..64).collect();
        rng.shuffle(&mut perm);
        let mut permuted = vec![0.0; 64 * 32];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 32..(dst + 1) * 32].copy_from_slice(x.row_slice(src));
        }
        let xp = Tensor::new(vec![64, 32], permuted).unwrap();
        let mut tape2 = Tape::new();
        let mut bind2 = Binding::new(&model.store);
        let enc_p = model.encode(&mut tape2, &mut bind2, &xp).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..32 {
                let diff = (enc_p.at2(dst, c) - enc.at2(src, c)).abs();
                assert!(diff < 1e-9, "row {dst} col {c} differs by {diff}");
            }
        }
    }

    #[test]
    fn decode_stage_is_shared_across_paths() {
        // Identical (e_prev, q, X) through the shared decoder yields
        // identical outputs regardless of the calling path.
        let model = default_model(&[1, 2, 3, 4]);
        let mut rng = crate::rng::SplitMix64::new(11);
        let x = Tensor::new(vec![64, 32], (0..64 * 32).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let q = Tensor::new(vec![8, 32], (0..8 * 32).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let zeros = Tensor::zeros(&[8, 32]);

        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let out1 = model.decode_stage(&mut tape, &mut bind, 1, &zeros, &q, &x).unwrap();
        let out3 = model.decode_stage(&mut tape, &mut bind, 3, &zeros, &q, &x).unwrap();
        assert_eq!(out1.data(), out3.data());
        assert_eq!(out1.shape(), &[8, 32]);
    }

    #[test]
    fn run_path_assembles_stage_provenance() {
        let model = default_model(&[1, 2, 3, 4]);
        let scene = generate_dataset(1, 2).unwrap().remove(0);
        let grid = render_features(&scene, 8);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let f = model.embed_features(&mut tape, &mut bind, &grid).unwrap();
        let x = model.encode(&mut tape, &mut bind, &f).unwrap();

        let p1 = model.run_path(&mut tape, &mut bind, 1, &x).unwrap();
        assert_eq!(p1.stage_of, StageOrigin { human: 1, object: 1, interaction: 1 });

        let p3 = model.run_path(&mut tape, &mut bind, 3, &x).unwrap();
        assert_eq!(p3.stage_of, StageOrigin { human: 1, object: 2, interaction: 1 });

        let p4 = model.run_path(&mut tape, &mut bind, 4, &x).unwrap();
        assert_eq!(p4.stage_of, StageOrigin { human: 2, object: 1, interaction: 1 });

        // Same shape contract across paths.
        let p2 = model.run_path(&mut tape, &mut bind, 2, &x).unwrap();
        assert_eq!(p2.b_h().shape(), p1.b_h().shape());
        assert_eq!(p2.obj_logits().shape(), p1.obj_logits().shape());

        // Boxes are post-sigmoid.
        assert!(p1.b_h().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn infer_p1_ignores_other_paths_parameters() {
        let full = default_model(&[1, 2, 3, 4]);
        let solo = default_model(&[1]);
        let scene = generate_dataset(1, 9).unwrap().remove(0);
        let grid = render_features(&scene, 8);

        let (pf, tape_f) = full.infer_p1(&grid).unwrap();
        let (ps, tape_s) = solo.infer_p1(&grid).unwrap();
        assert_eq!(pf.b_h().data(), ps.b_h().data());
        assert_eq!(pf.act_logits().data(), ps.act_logits().data());
        assert_eq!(tape_f.trace(), tape_s.trace());

        // Physically deleting path 2–4 parameters leaves inference intact.
        let mut stripped = full.clone();
        let names: Vec<String> = stripped
            .store
            .names()
            .filter(|n| n.starts_with("path2") || n.starts_with("path3") || n.starts_with("path4"))
            .map(str::to_string)
            .collect();
        assert!(!names.is_empty());
        for n in &names {
            stripped.store.remove(n);
        }
        let (pd, _) = stripped.infer_p1(&grid).unwrap();
        assert_eq!(pd.b_h().data(), pf.b_h().data());
    }

    #[test]
    fn shared_decoder_is_one_set_of_tensors() {
        let shared = default_model(&[1, 2, 3, 4]);
        let unshared = Model::new(ModelConfig::default(), &[1, 2, 3, 4], false, 7).unwrap();
        let dec_shared = shared.store.names().filter(|n| n.starts_with("dec.")).count();
        let dec_unshared = unshared.store.names().filter(|n| n.starts_with("dec.")).count();
        assert_eq!(dec_unshared, 4 * dec_shared);
        assert!(unshared.store.n_scalars() > shared.store.n_scalars());

        // During a joint forward pass all four paths resolve decoder
        // parameters to the same tape nodes.
        let scene = generate_dataset(1, 4).unwrap().remove(0);
        let grid = render_features(&scene, 8);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&shared.store);
        let f = shared.embed_features(&mut tape, &mut bind, &grid).unwrap();
        let x = shared.encode(&mut tape, &mut bind, &f).unwrap();
        let before = bind.node_of("dec.0.self_attn.q.w");
        assert!(before.is_none());
        let _ = shared.run_all_paths(&mut tape, &mut bind, &x).unwrap();
        let node = bind.node_of("dec.0.self_attn.q.w").unwrap();
        // Re-requesting through another path reuses the identical node.
        let again = bind.param(&mut tape, "dec.0.self_attn.q.w").unwrap();
        assert_eq!(again.node(), Some(node));
    }

    #[test]
    fn missing_path1_is_rejected() {
        assert!(Model::new(ModelConfig::default(), &[2, 3], true, 1).is_err());
        assert!(Model::new(ModelConfig::default(), &[], true, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let model = default_model(&[1]);
        let bad = FeatureGrid {
            grid: 8,
            channels: 3,
            values: vec![0.0; 3 * 64],
        };
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        assert!(matches!(
            model.embed_features(&mut tape, &mut bind, &bad),
            Err(ModelError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn encoder_gradient_reaches_input() {
        let model = Model::new(ModelConfig::tiny(), &[1], true, 3).unwrap();
        let d = model.cfg().d_model;
        let tokens = model.cfg().n_tokens();
        let mut rng = crate::rng::SplitMix64::new(15);
        let x = Tensor::new(
            vec![tokens, d],
            (0..tokens * d).map(|_| rng.next_range(-0.5, 0.5)).collect(),
        )
        .unwrap();
        let err = crate::gradcheck::check_fn(&[x], &|tape, v| {
            let mut bind = Binding::new(&model.store);
            let enc = model
                .encode(tape, &mut bind, &v[0])
                .map_err(|_| TensorError::NonFinite { op: "encode" })?;
            let sq = tape.mul(&enc, &enc)?;
            tape.sum(&sq, None)
        })
        .unwrap();
        assert!(err < 1e-4, "encoder fd err {err}");
    }
}
