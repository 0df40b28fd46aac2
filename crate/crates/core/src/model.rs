//! Toy multimodal generative model.
//!
//! Three parameter sets make up the model:
//!
//! * the feature **encoder** (`enc.*`), an MLP turning a feature vector into
//!   `m` soft tokens in the backbone's embedding space;
//! * the frozen causal language **backbone** (`x.*`): token and absolute
//!   position embeddings, single-head attention blocks with a GELU MLP, and
//!   an output projection;
//! * low-rank **adapters** (`t.*`) on the query, value and first MLP
//!   projection of every block. The adapted weight is `W + A·B`.
//!
//! Sequences are laid out as `[soft tokens ‖ instruction ‖ answer]` and the
//! answer is teacher-forced. A batch is packed row-wise into one matrix;
//! attention is causal inside each example's segment.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{AnswerMask, Graph, Segment, Var};
use crate::rng::{stream_rng, streams};
use crate::tensor::{l2, Tensor};

/// One of the three parameter partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// Feature encoder `S`.
    Encoder,
    /// Low-rank adapters `T`.
    Adapter,
    /// Frozen backbone `X`.
    Backbone,
}

impl Component {
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "enc.",
            Component::Adapter => "t.",
            Component::Backbone => "x.",
        }
    }

    pub const TRAINABLE: [Component; 2] = [Component::Encoder, Component::Adapter];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub vocab: usize,
    pub dim: usize,
    pub blocks: usize,
    pub soft_tokens: usize,
    pub feature_dim: usize,
    pub rank: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    pub encoder_hidden: usize,
    /// Std of the adapter `A` factors; `B` always starts at zero.
    pub adapter_init_std: f64,
    /// Std scale of the encoder output layer.
    pub encoder_out_std: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 32,
            blocks: 2,
            soft_tokens: 4,
            feature_dim: 16,
            rank: 4,
            max_seq: 24,
            mlp_hidden: 64,
            encoder_hidden: 32,
            adapter_init_std: 0.1,
            encoder_out_std: 0.05,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("soft_tokens", self.soft_tokens),
            ("feature_dim", self.feature_dim),
            ("rank", self.rank),
            ("max_seq", self.max_seq),
            ("mlp_hidden", self.mlp_hidden),
            ("encoder_hidden", self.encoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be >= 1")));
            }
        }
        if self.max_seq <= self.soft_tokens {
            return Err(Error::config("model.max_seq must exceed soft_tokens"));
        }
        if !(self.adapter_init_std >= 0.0 && self.encoder_out_std >= 0.0) {
            return Err(Error::config("init std must be non-negative"));
        }
        Ok(())
    }
}

/// Ordered name → tensor map. Also used for gradients and update directions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// All values concatenated in name order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.params.values().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_like(other, "dot")?;
        Ok(self
            .params
            .values()
            .zip(other.params.values())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn check_like(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::contract(format!(
                "{op}: parameter sets differ ({} vs {} entries)",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((ka, a), (kb, b)) in self.params.iter().zip(other.params.iter()) {
            if ka != kb {
                return Err(Error::contract(format!("{op}: parameter `{ka}` vs `{kb}`")));
            }
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_like(other, "add_scaled")?;
        for (a, b) in self.params.values_mut().zip(other.params.values()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> ParamSet {
        let mut out = self.clone();
        for t in out.params.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.params {
            h.update(k.as_bytes());
            t.feed(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// One instruction-tuning example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub feature: Vec<f64>,
    pub instruction: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    /// Rows occupied in the packed batch: every answer token except the last
    /// is an input.
    pub fn seq_len(&self, soft_tokens: usize) -> usize {
        soft_tokens + self.instruction.len() + self.answer.len() - 1
    }
}

/// Teacher-forced next-token distributions at answer positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationDistribution {
    /// One row per answer position, `Σ K_i × V`.
    pub probs: Tensor,
    pub mask: AnswerMask,
}

impl GenerationDistribution {
    pub fn rows(&self) -> usize {
        self.probs.rows()
    }
}

/// What the prefix slots hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftSource {
    Encoder,
    /// All-zero soft tokens; the text-only pretraining layout.
    Zeros,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub use_adapter: bool,
    pub soft: SoftSource,
    /// Components whose parameters are graph leaves requiring gradients.
    pub track: &'a [Component],
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            use_adapter: true,
            soft: SoftSource::Encoder,
            track: &[],
        }
    }
}

/// A recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    pub params: BTreeMap<String, Var>,
    pub logits: Var,
    pub probs: Var,
    pub soft: Option<Var>,
    pub targets: Vec<usize>,
    pub mask: AnswerMask,
}

impl Forward {
    pub fn distributions(&self) -> GenerationDistribution {
        GenerationDistribution {
            probs: self.graph.value(self.probs).clone(),
            mask: self.mask.clone(),
        }
    }

    pub fn loss(&mut self) -> Result<Var> {
        self.graph.cross_entropy(self.logits, &self.targets, &self.mask)
    }

    /// Gradient of `scalar` for every tracked parameter of `component`.
    pub fn grads_for(&self, model: &Model, component: Component, scalar: Var) -> Result<ParamSet> {
        Ok(self.grads(model, &[component], scalar)?.remove(0))
    }

    /// Gradients for several components from a single backward pass.
    pub fn grads(&self, model: &Model, components: &[Component], scalar: Var) -> Result<Vec<ParamSet>> {
        let g = self.graph.backward(scalar)?;
        model.counters.backwards.set(model.counters.backwards.get() + 1);
        components
            .iter()
            .map(|&c| {
                let mut out = model.params(c).zeros_like();
                for (name, t) in out.iter_mut() {
                    let var =
                        self.params.get(name).ok_or_else(|| Error::contract(format!("`{name}` not in graph")))?;
                    if let Some(gv) = g.get(*var) {
                        t.data_mut().copy_from_slice(gv);
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Forward/backward counts, for cost contracts.
#[derive(Clone, Debug, Default)]
pub struct Counters {
    pub forwards: Cell<u64>,
    pub backwards: Cell<u64>,
}

impl Counters {
    pub fn snapshot(&self) -> (u64, u64) {
        (self.forwards.get(), self.backwards.get())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub shape: ModelShape,
    encoder: ParamSet,
    adapter: ParamSet,
    backbone: ParamSet,
    pub counters: Counters,
}

fn block_names(b: usize) -> [String; 6] {
    ["wq", "wk", "wv", "wo", "w1", "w2"].map(|w| format!("x.b{b}.{w}"))
}

/// Adapted projections per block: (short name, backbone weight, output width selector).
const ADAPTED: [&str; 3] = ["q", "v", "w1"];

impl Model {
    /// Seeded initialization of all three parameter sets.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let (v, d, h) = (shape.vocab, shape.dim, shape.mlp_hidden);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();

        let mut rng = stream_rng(seed, streams::BACKBONE_INIT);
        let mut backbone = ParamSet::new();
        backbone.insert("x.tok", Tensor::randn(&[v, d], 1.0, &mut rng));
        backbone.insert("x.pos", Tensor::randn(&[shape.max_seq, d], 0.3, &mut rng));
        for b in 0..shape.blocks {
            let [wq, wk, wv, wo, w1, w2] = block_names(b);
            backbone.insert(wq, Tensor::randn(&[d, d], inv(d), &mut rng));
            backbone.insert(wk, Tensor::randn(&[d, d], inv(d), &mut rng));
            backbone.insert(wv, Tensor::randn(&[d, d], inv(d), &mut rng));
            backbone.insert(wo, Tensor::randn(&[d, d], 0.5 * inv(d), &mut rng));
            backbone.insert(w1, Tensor::randn(&[d, h], inv(d), &mut rng));
            backbone.insert(w2, Tensor::randn(&[h, d], 0.5 * inv(h), &mut rng));
        }
        backbone.insert("x.out", Tensor::randn(&[d, v], inv(d), &mut rng));

        let mut rng = stream_rng(seed, streams::ENCODER_INIT);
        let mut encoder = ParamSet::new();
        encoder.insert(
            "enc.w1",
            Tensor::randn(&[shape.feature_dim, shape.encoder_hidden], inv(shape.feature_dim), &mut rng),
        );
        encoder.insert(
            "enc.w2",
            Tensor::randn(
                &[shape.encoder_hidden, shape.soft_tokens * d],
                shape.encoder_out_std,
                &mut rng,
            ),
        );

        let mut rng = stream_rng(seed, streams::ADAPTER_INIT);
        let mut adapter = ParamSet::new();
        for b in 0..shape.blocks {
            for name in ADAPTED {
                let cols = if name == "w1" { h } else { d };
                adapter.insert(
                    format!("t.b{b}.{name}.a"),
                    Tensor::randn(&[d, shape.rank], shape.adapter_init_std, &mut rng),
                );
                adapter.insert(format!("t.b{b}.{name}.b"), Tensor::zeros(&[shape.rank, cols]));
            }
        }

        Ok(Self {
            shape: shape.clone(),
            encoder,
            adapter,
            backbone,
            counters: Counters::default(),
        })
    }

    pub fn params(&self, c: Component) -> &ParamSet {
        match c {
            Component::Encoder => &self.encoder,
            Component::Adapter => &self.adapter,
            Component::Backbone => &self.backbone,
        }
    }

    fn params_mut(&mut self, c: Component) -> &mut ParamSet {
        match c {
            Component::Encoder => &mut self.encoder,
            Component::Adapter => &mut self.adapter,
            Component::Backbone => &mut self.backbone,
        }
    }

    /// Replaces a whole parameter set, checking names and shapes.
    pub fn set_params(&mut self, c: Component, p: ParamSet) -> Result<()> {
        self.params(c).check_like(&p, "set_params")?;
        *self.params_mut(c) = p;
        Ok(())
    }

    /// Mutable access to trainable parameters only.
    pub fn trainable_mut(&mut self, c: Component) -> Result<&mut ParamSet> {
        if c == Component::Backbone {
            return Err(Error::contract("the backbone is frozen"));
        }
        Ok(self.params_mut(c))
    }

    /// Pretraining is the one place the backbone is written.
    pub(crate) fn backbone_mut(&mut self) -> &mut ParamSet {
        &mut self.backbone
    }

    pub fn backbone_checksum(&self) -> String {
        self.backbone.checksum()
    }

    /// `θ_c ← θ_c + scale · delta` on a trainable component.
    pub fn apply_delta(&mut self, c: Component, delta: &ParamSet, scale: f64) -> Result<()> {
        if c == Component::Backbone {
            return Err(Error::contract("apply_delta may not target the backbone"));
        }
        if scale == 0.0 {
            self.params(c).check_like(delta, "apply_delta")?;
            return Ok(());
        }
        self.params_mut(c).add_scaled(delta, scale)
    }

    /// Every parameter, tagged by partition, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        [&self.encoder, &self.adapter, &self.backbone]
            .into_iter()
            .flat_map(|p| p.iter().map(|(k, v)| (k.clone(), v)))
            .collect()
    }

    /// Loads parameters by name prefix; every expected name must be present.
    pub fn load_tensors(&mut self, entries: Vec<(String, Tensor)>, only: &[Component]) -> Result<()> {
        let mut by_name: BTreeMap<String, Tensor> = entries.into_iter().collect();
        for &c in only {
            let mut next = self.params(c).clone();
            for (name, t) in next.iter_mut() {
                let src = by_name
                    .remove(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Shape {
                        op: "load_tensors",
                        lhs: t.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                *t = src;
            }
            *self.params_mut(c) = next;
        }
        Ok(())
    }

    /// Soft tokens for one feature vector, `m × D`.
    pub fn encode_features(&self, feature: &[f64]) -> Result<Tensor> {
        if feature.len() != self.shape.feature_dim {
            return Err(Error::Shape {
                op: "encode_features",
                lhs: vec![self.shape.feature_dim],
                rhs: vec![feature.len()],
            });
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, feature.len(), feature.to_vec())?)?;
        let soft = self.encoder_graph(&mut g, f, &[])?.1;
        Ok(g.value(soft).clone())
    }

    fn leaf(&self, g: &mut Graph, vars: &mut BTreeMap<String, Var>, name: &str, track: &[Component]) -> Result<Var> {
        if let Some(v) = vars.get(name) {
            return Ok(*v);
        }
        let (set, comp) = if name.starts_with("enc.") {
            (&self.encoder, Component::Encoder)
        } else if name.starts_with("t.") {
            (&self.adapter, Component::Adapter)
        } else {
            (&self.backbone, Component::Backbone)
        };
        let t = set.get(name).ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = g.leaf(t.clone(), track.contains(&comp))?;
        vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Encoder on a `N × F` feature matrix; returns (param vars, `N·m × D` soft tokens).
    fn encoder_graph(&self, g: &mut Graph, features: Var, track: &[Component]) -> Result<(BTreeMap<String, Var>, Var)> {
        let mut vars = BTreeMap::new();
        let w1 = self.leaf(g, &mut vars, "enc.w1", track)?;
        let w2 = self.leaf(g, &mut vars, "enc.w2", track)?;
        let h = g.matmul(features, w1)?;
        let h = g.gelu(h)?;
        let out = g.matmul(h, w2)?;
        let n = g.value(features).rows();
        let soft = g.reshape(out, n * self.shape.soft_tokens, self.shape.dim)?;
        Ok((vars, soft))
    }

    /// `x·W (+ (x·A)·B)`.
    fn projection(
        &self,
        g: &mut Graph,
        vars: &mut BTreeMap<String, Var>,
        x: Var,
        weight: &str,
        adapter: Option<&str>,
        track: &[Component],
    ) -> Result<Var> {
        let w = self.leaf(g, vars, weight, track)?;
        let y = g.matmul(x, w)?;
        match adapter {
            Some(base) => {
                let a = self.leaf(g, vars, &format!("{base}.a"), track)?;
                let b = self.leaf(g, vars, &format!("{base}.b"), track)?;
                let low = g.matmul(x, a)?;
                let low = g.matmul(low, b)?;
                g.add(y, low)
            }
            None => Ok(y),
        }
    }

    /// Records a teacher-forced forward pass over `batch`.
    pub fn forward(&self, batch: &[Example], opts: ForwardOptions<'_>) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        let s = &self.shape;
        let m = s.soft_tokens;
        for ex in batch {
            if ex.answer.is_empty() {
                return Err(Error::contract("example with empty answer"));
            }
            let len = ex.seq_len(m);
            if len > s.max_seq {
                return Err(Error::Length { len, max: s.max_seq });
            }
            if opts.soft == SoftSource::Encoder && ex.feature.len() != s.feature_dim {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![s.feature_dim],
                    rhs: vec![ex.feature.len()],
                });
            }
        }
        self.counters.forwards.set(self.counters.forwards.get() + 1);

        let mut g = Graph::new();
        let n = batch.len();

        let (mut vars, soft) = match opts.soft {
            SoftSource::Encoder => {
                let feats: Vec<f64> = batch.iter().flat_map(|e| e.feature.iter().copied()).collect();
                let f = g.constant(Tensor::matrix(n, s.feature_dim, feats)?)?;
                let (vars, soft) = self.encoder_graph(&mut g, f, opts.track)?;
                (vars, soft)
            }
            SoftSource::Zeros => {
                let z = g.constant(Tensor::zeros(&[n * m, s.dim]))?;
                (BTreeMap::new(), z)
            }
        };

        // token embeddings for every text input row of the batch
        let mut text_ids = Vec::new();
        let mut text_offsets = Vec::with_capacity(n);
        for ex in batch {
            text_offsets.push(text_ids.len());
            text_ids.extend_from_slice(&ex.instruction);
            text_ids.extend_from_slice(&ex.answer[..ex.answer.len() - 1]);
        }
        let tok = self.leaf(&mut g, &mut vars, "x.tok", opts.track)?;
        let text = g.embedding(tok, &text_ids)?;

        let mut parts = Vec::with_capacity(2 * n);
        let mut segments = Vec::with_capacity(n);
        let mut positions = Vec::new();
        let mut start = 0;
        for (i, ex) in batch.iter().enumerate() {
            let text_len = ex.seq_len(m) - m;
            parts.push(g.slice_rows(soft, i * m, m)?);
            parts.push(g.slice_rows(text, text_offsets[i], text_len)?);
            let len = m + text_len;
            segments.push(Segment { start, len });
            positions.extend(0..len);
            start += len;
        }
        let x = g.concat_rows(&parts)?;
        let pos_table = self.leaf(&mut g, &mut vars, "x.pos", opts.track)?;
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;

        for b in 0..s.blocks {
            let ad = |name: &str| opts.use_adapter.then(|| format!("t.b{b}.{name}"));
            let q = self.projection(&mut g, &mut vars, x, &format!("x.b{b}.wq"), ad("q").as_deref(), opts.track)?;
            let k = self.projection(&mut g, &mut vars, x, &format!("x.b{b}.wk"), None, opts.track)?;
            let v = self.projection(&mut g, &mut vars, x, &format!("x.b{b}.wv"), ad("v").as_deref(), opts.track)?;
            let att = g.causal_attention(q, k, v, &segments)?;
            let o = self.projection(&mut g, &mut vars, att, &format!("x.b{b}.wo"), None, opts.track)?;
            x = g.add(x, o)?;
            let h = self.projection(&mut g, &mut vars, x, &format!("x.b{b}.w1"), ad("w1").as_deref(), opts.track)?;
            let h = g.gelu(h)?;
            let h = self.projection(&mut g, &mut vars, h, &format!("x.b{b}.w2"), None, opts.track)?;
            x = g.add(x, h)?;
        }

        // rows whose next-token prediction is an answer token
        let mut answer_rows = Vec::with_capacity(n);
        let mut targets = Vec::new();
        let mut mask_rows = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            let first = segments[i].start + m + ex.instruction.len() - 1;
            answer_rows.push(g.slice_rows(x, first, ex.answer.len())?);
            targets.extend_from_slice(&ex.answer);
            mask_rows.extend(std::iter::repeat_n(Some(i), ex.answer.len()));
        }
        let h = g.concat_rows(&answer_rows)?;
        let logits = self.projection(&mut g, &mut vars, h, "x.out", None, opts.track)?;
        let probs = g.softmax_rows(logits)?;

        Ok(Forward {
            graph: g,
            params: vars,
            logits,
            probs,
            soft: (opts.soft == SoftSource::Encoder).then_some(soft),
            targets,
            mask: AnswerMask::new(mask_rows),
        })
    }

    pub fn forward_distributions(&self, batch: &[Example], use_adapter: bool) -> Result<GenerationDistribution> {
        let f = self.forward(
            batch,
            ForwardOptions {
                use_adapter,
                ..Default::default()
            },
        )?;
        Ok(f.distributions())
    }

    /// Mean over examples of the mean answer-token cross-entropy.
    pub fn batch_loss(&self, batch: &[Example]) -> Result<f64> {
        let mut f = self.forward(batch, ForwardOptions::default())?;
        let l = f.loss()?;
        Ok(f.graph.value(l).data()[0])
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy_decode(
        &self,
        feature: &[f64],
        instruction: &[usize],
        max_len: usize,
        end_token: Option<usize>,
    ) -> Result<Vec<usize>> {
        let out = self.greedy_decode_batch(&[(feature, instruction)], max_len, end_token)?;
        Ok(out.into_iter().next().unwrap_or_default())
    }

    /// Batched greedy decoding; each sequence stops at `end_token` (kept) or
    /// after `max_len` tokens.
    pub fn greedy_decode_batch(
        &self,
        prompts: &[(&[f64], &[usize])],
        max_len: usize,
        end_token: Option<usize>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
        let mut done = vec![false; prompts.len()];
        for _ in 0..max_len {
            let active: Vec<usize> = (0..prompts.len()).filter(|i| !done[*i]).collect();
            if active.is_empty() {
                break;
            }
            // the trailing placeholder is never an input; its row predicts the next token
            let batch: Vec<Example> = active
                .iter()
                .map(|&i| {
                    let mut answer = generated[i].clone();
                    answer.push(0);
                    Example {
                        feature: prompts[i].0.to_vec(),
                        instruction: prompts[i].1.to_vec(),
                        answer,
                    }
                })
                .collect();
            let dist = self.forward_distributions(&batch, true)?;
            let mut row = 0;
            for (j, &i) in active.iter().enumerate() {
                row += batch[j].answer.len();
                let p = dist.probs.row(row - 1);
                let mut best = 0;
                for (t, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = t;
                    }
                }
                generated[i].push(best);
                if Some(best) == end_token {
                    done[i] = true;
                }
            }
        }
        Ok(generated)
    }
}

/// Batch statistics entering the individual-step normalizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNorms {
    /// Mean Frobenius norm of instruction token-embedding matrices.
    pub instruction: f64,
    /// Mean Frobenius norm of soft-token matrices.
    pub soft_tokens: f64,
    /// Mean ℓ2 norm of raw feature vectors.
    pub features: f64,
}

impl Model {
    pub fn input_norms(&self, batch: &[Example]) -> Result<InputNorms> {
        if batch.is_empty() {
            return Err(Error::contract("input norms of an empty batch"));
        }
        let tok = &self.backbone.get("x.tok").expect("backbone has x.tok");
        let n = batch.len() as f64;
        let mut instr = 0.0;
        let mut soft = 0.0;
        let mut feat = 0.0;
        for ex in batch {
            let sq: f64 = ex
                .instruction
                .iter()
                .map(|&id| tok.row(id).iter().map(|x| x * x).sum::<f64>())
                .sum();
            instr += sq.sqrt();
            soft += self.encode_features(&ex.feature)?.norm();
            feat += l2(&ex.feature);
        }
        Ok(InputNorms {
            instruction: instr / n,
            soft_tokens: soft / n,
            features: feat / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelShape {
        ModelShape {
            vocab: 12,
            dim: 8,
            blocks: 1,
            soft_tokens: 2,
            feature_dim: 5,
            rank: 2,
            max_seq: 12,
            mlp_hidden: 10,
            encoder_hidden: 6,
            ..ModelShape::default()
        }
    }

    fn batch() -> Vec<Example> {
        vec![
            Example {
                feature: vec![0.5, -0.1, 0.0, 1.0, 0.3],
                instruction: vec![1, 2],
                answer: vec![5, 6, 7],
            },
            Example {
                feature: vec![-0.2, 0.4, 0.9, 0.0, 0.1],
                instruction: vec![3],
                answer: vec![8],
            },
        ]
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let m = Model::init(&ModelShape::default(), 0).unwrap();
        let total = m.named_tensors().len();
        let mut seen = std::collections::BTreeSet::new();
        for c in [Component::Encoder, Component::Adapter, Component::Backbone] {
            for name in m.params(c).names() {
                assert!(name.starts_with(c.prefix()));
                assert!(seen.insert(name.clone()), "{name} in two partitions");
            }
        }
        assert_eq!(seen.len(), total);
    }

    #[test]
    fn rows_are_distributions() {
        let m = Model::init(&tiny(), 3).unwrap();
        let d = m.forward_distributions(&batch(), true).unwrap();
        assert_eq!(d.rows(), 4);
        for r in 0..d.rows() {
            assert!((d.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adapter_matches_frozen_backbone() {
        let m = Model::init(&tiny(), 4).unwrap();
        let on = m.forward_distributions(&batch(), true).unwrap();
        let off = m.forward_distributions(&batch(), false).unwrap();
        assert_eq!(on.probs.data(), off.probs.data());
    }

    #[test]
    fn later_tokens_do_not_leak_backwards() {
        let m = Model::init(&tiny(), 5).unwrap();
        let mut b = batch();
        let before = m.forward_distributions(&b, true).unwrap();
        // the second answer token is an input to the third position only
        b[0].answer[1] = 11;
        let after = m.forward_distributions(&b, true).unwrap();
        assert_eq!(before.probs.row(0), after.probs.row(0));
        assert_eq!(before.probs.row(1), after.probs.row(1));
        assert_ne!(before.probs.row(2), after.probs.row(2));
        assert_eq!(before.probs.row(3), after.probs.row(3));
    }

    #[test]
    fn overflow_is_a_length_error() {
        let m = Model::init(&tiny(), 0).unwrap();
        let mut b = batch();
        b[0].answer = vec![1; 20];
        assert!(matches!(m.forward_distributions(&b, true), Err(Error::Length { .. })));
        assert!(m.forward_distributions(&[], true).is_err());
    }

    #[test]
    fn encoder_checks_feature_dim() {
        let m = Model::init(&tiny(), 0).unwrap();
        assert!(m.encode_features(&[0.0; 3]).is_err());
        let a = m.encode_features(&[0.1; 5]).unwrap();
        let b = m.encode_features(&[0.1; 5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 8]);
    }

    #[test]
    fn apply_delta_contracts() {
        let mut m = Model::init(&tiny(), 0).unwrap();
        let before = m.params(Component::Encoder).checksum();
        let delta = m.params(Component::Encoder).scaled(0.5);
        m.apply_delta(Component::Encoder, &delta, 0.0).unwrap();
        assert_eq!(m.params(Component::Encoder).checksum(), before);
        let bb = m.params(Component::Backbone).zeros_like();
        assert!(matches!(
            m.apply_delta(Component::Backbone, &bb, 1.0),
            Err(Error::Contract(_))
        ));
        let wrong = m.params(Component::Adapter).clone();
        assert!(m.apply_delta(Component::Encoder, &wrong, 1.0).is_err());
    }

    #[test]
    fn apply_then_negate_returns_to_start() {
        let mut m = Model::init(&tiny(), 1).unwrap();
        let orig = m.params(Component::Adapter).clone();
        let delta = m.params(Component::Adapter).scaled(0.3);
        m.apply_delta(Component::Adapter, &delta, 1e-3).unwrap();
        m.apply_delta(Component::Adapter, &delta, -1e-3).unwrap();
        for ((_, a), (_, b)) in m.params(Component::Adapter).iter().zip(orig.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_stops_at_end() {
        let m = Model::init(&tiny(), 2).unwrap();
        let f = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = m.greedy_decode(&f, &[1, 2], 5, None).unwrap();
        let b = m.greedy_decode(&f, &[1, 2], 5, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let first = a[0];
        let stopped = m.greedy_decode(&f, &[1, 2], 5, Some(first)).unwrap();
        assert_eq!(stopped, vec![first]);
    }
}
