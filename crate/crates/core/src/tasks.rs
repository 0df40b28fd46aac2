//! Synthetic multimodal tasks and text-only backbone pretraining.
//!
//! Each example is an object with three attributes (color, shape, count).
//! Its feature vector is the concatenation of the attribute one-hots, padded
//! to the feature width, plus Gaussian noise. Two task kinds exist:
//!
//! * `qa`: the instruction asks for one or two attributes and the answer
//!   names them (1–2 tokens);
//! * `caption`: the instruction asks for a description of `k` tokens and the
//!   answer reads the attributes out cyclically, separated by `SEP` and
//!   terminated by `END` (4–10 tokens).
//!
//! Answers are a deterministic function of the noiseless attributes and the
//! instruction, so every label is recoverable from a clean feature.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Component, Example, ForwardOptions, Model, ModelShape, SoftSource};
use crate::optimizer::AdamState;
use crate::rng::{step_rng, stream_rng, streams};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Qa,
    Caption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub colors: usize,
    pub shapes: usize,
    pub counts: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub noise_std: f64,
    /// Inclusive answer-length range in tokens.
    pub answer_len: [usize; 2],
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Short-answer question answering.
    pub fn toy_qa(seed: u64) -> Self {
        Self {
            kind: TaskKind::Qa,
            colors: 4,
            shapes: 4,
            counts: 4,
            feature_dim: 16,
            vocab: 64,
            noise_std: 0.1,
            answer_len: [1, 2],
            train_size: 512,
            eval_size: 64,
            seed,
        }
    }

    /// Long-answer captioning.
    pub fn toy_caption(seed: u64) -> Self {
        Self {
            kind: TaskKind::Caption,
            answer_len: [4, 10],
            ..Self::toy_qa(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy-qa" => Ok(Self::toy_qa(seed)),
            "toy-caption" => Ok(Self::toy_caption(seed)),
            other => Err(Error::config(format!("unknown task preset `{other}`"))),
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(self)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.answer_len;
        if self.colors == 0 || self.shapes == 0 || self.counts == 0 {
            return Err(Error::config("attribute spaces must be non-empty"));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::config("train and eval sizes must be >= 1"));
        }
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid answer length range [{lo}, {hi}]")));
        }
        match self.kind {
            TaskKind::Qa if hi > 2 => {
                return Err(Error::config("qa answers name at most two attributes"));
            }
            TaskKind::Caption if lo < 2 => {
                return Err(Error::config("captions need room for content and END"));
            }
            _ => {}
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        if self.feature_dim < self.colors + self.shapes + self.counts {
            return Err(Error::config("feature_dim cannot hold the attribute one-hots"));
        }
        let needed = self.layout().size();
        if needed > self.vocab {
            return Err(Error::config(format!(
                "vocabulary of {} cannot hold the {needed} tokens this spec needs",
                self.vocab
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            vocab: self.vocab,
            feature_dim: self.feature_dim,
            ..ModelShape::default()
        }
    }
}

/// QA question types: which attributes are asked for.
const QUESTIONS: [&[usize]; 6] = [&[0], &[1], &[2], &[0, 1], &[1, 2], &[0, 2]];

/// Token id assignment. Template tokens come first, answer tokens last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pub end: usize,
    pub sep: usize,
    pub what: usize,
    pub qmark: usize,
    /// One per entry of the question table.
    pub questions: usize,
    pub describe: usize,
    /// `LEN_k` for `k` in the caption length range.
    pub len_base: usize,
    len_count: usize,
    len_min: usize,
    /// First answer token; colors, then shapes, then counts.
    pub answer_base: usize,
    attr_sizes: [usize; 3],
}

impl VocabLayout {
    fn new(spec: &TaskSpec) -> Self {
        let [lo, hi] = spec.answer_len;
        let len_count = match spec.kind {
            TaskKind::Caption => hi.saturating_sub(lo) + 1,
            TaskKind::Qa => 0,
        };
        let len_base = 11;
        Self {
            end: 0,
            sep: 1,
            what: 2,
            qmark: 3,
            questions: 4,
            describe: 10,
            len_base,
            len_count,
            len_min: lo,
            answer_base: len_base + len_count,
            attr_sizes: [spec.colors, spec.shapes, spec.counts],
        }
    }

    pub fn size(&self) -> usize {
        self.answer_base + self.attr_sizes.iter().sum::<usize>()
    }

    /// Token naming value `value` of attribute `attr` (0 color, 1 shape, 2 count).
    pub fn attribute_token(&self, attr: usize, value: usize) -> usize {
        self.answer_base + self.attr_sizes[..attr].iter().sum::<usize>() + value
    }

    pub fn is_answer_token(&self, id: usize) -> bool {
        id >= self.answer_base && id < self.size()
    }

    pub fn token_name(&self, id: usize) -> String {
        match id {
            0 => "END".into(),
            1 => "SEP".into(),
            2 => "WHAT".into(),
            3 => "?".into(),
            4..=9 => {
                let names = ["color", "shape", "count"];
                let q: Vec<&str> = QUESTIONS[id - 4].iter().map(|a| names[*a]).collect();
                format!("Q[{}]", q.join("+"))
            }
            10 => "DESCRIBE".into(),
            _ if id >= self.len_base && id < self.answer_base => {
                format!("LEN{}", id - self.len_base + self.len_min)
            }
            _ if self.is_answer_token(id) => {
                let mut v = id - self.answer_base;
                for (attr, size) in ["color", "shape", "count"].iter().zip(self.attr_sizes) {
                    if v < size {
                        return format!("{attr}{v}");
                    }
                    v -= size;
                }
                unreachable!()
            }
            _ => format!("<{id}>"),
        }
    }
}

/// Noiseless attributes of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
}

impl Attributes {
    pub fn get(&self, attr: usize) -> usize {
        [self.color, self.shape, self.count][attr]
    }
}

/// The answer an instruction demands for given attributes.
pub fn answer_for(spec: &TaskSpec, attrs: &Attributes, instruction: &[usize]) -> Result<Vec<usize>> {
    let layout = spec.layout();
    let bad = || Error::contract(format!("instruction {instruction:?} is not a template of this task"));
    match spec.kind {
        TaskKind::Qa => {
            let q = *instruction.get(1).ok_or_else(bad)?;
            let idx = q.checked_sub(layout.questions).filter(|i| *i < QUESTIONS.len()).ok_or_else(bad)?;
            Ok(QUESTIONS[idx].iter().map(|&a| layout.attribute_token(a, attrs.get(a))).collect())
        }
        TaskKind::Caption => {
            let lt = *instruction.get(1).ok_or_else(bad)?;
            if lt < layout.len_base || lt >= layout.answer_base {
                return Err(bad());
            }
            let k = lt - layout.len_base + layout.len_min;
            let cycle = [
                layout.attribute_token(0, attrs.color),
                layout.attribute_token(1, attrs.shape),
                layout.attribute_token(2, attrs.count),
                layout.sep,
            ];
            let mut out: Vec<usize> = cycle.iter().cycle().take(k - 1).copied().collect();
            out.push(layout.end);
            Ok(out)
        }
    }
}

/// Noiseless feature vector of `attrs`.
pub fn prototype(spec: &TaskSpec, attrs: &Attributes) -> Vec<f64> {
    let mut f = vec![0.0; spec.feature_dim];
    f[attrs.color] = 1.0;
    f[spec.colors + attrs.shape] = 1.0;
    f[spec.colors + spec.shapes + attrs.count] = 1.0;
    f
}

fn generate_example(spec: &TaskSpec, index: usize) -> Result<(Example, Attributes)> {
    let layout = spec.layout();
    let mut rng = stream_rng(spec.seed, streams::EXAMPLE_BASE + index as u64);
    let attrs = Attributes {
        color: rng.random_range(0..spec.colors),
        shape: rng.random_range(0..spec.shapes),
        count: rng.random_range(0..spec.counts),
    };
    let mut feature = prototype(spec, &attrs);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for x in feature.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let [lo, hi] = spec.answer_len;
    let instruction = match spec.kind {
        TaskKind::Qa => {
            let allowed: Vec<usize> = (0..QUESTIONS.len())
                .filter(|i| (lo..=hi).contains(&QUESTIONS[*i].len()))
                .collect();
            let q = allowed[rng.random_range(0..allowed.len())];
            vec![layout.what, layout.questions + q, layout.qmark]
        }
        TaskKind::Caption => {
            let k = rng.random_range(lo..=hi);
            vec![layout.describe, layout.len_base + k - lo, layout.qmark]
        }
    };
    let answer = answer_for(spec, &attrs, &instruction)?;
    Ok((
        Example {
            feature,
            instruction,
            answer,
        },
        attrs,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub spec: TaskSpec,
    pub spec_hash: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub train_attributes: Vec<Attributes>,
    pub eval_attributes: Vec<Attributes>,
}

pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.train_size);
    let mut train_attributes = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let (e, a) = generate_example(spec, i)?;
        train.push(e);
        train_attributes.push(a);
    }
    let mut eval = Vec::with_capacity(spec.eval_size);
    let mut eval_attributes = Vec::with_capacity(spec.eval_size);
    for i in 0..spec.eval_size {
        let (e, a) = generate_example(spec, spec.train_size + i)?;
        eval.push(e);
        eval_attributes.push(a);
    }
    Ok(Dataset {
        version: DATASET_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        train,
        eval,
        train_attributes,
        eval_attributes,
    })
}

impl Dataset {
    /// SHA-256 over the examples' exact bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in self.train.iter().chain(&self.eval) {
            for v in &e.feature {
                h.update(v.to_le_bytes());
            }
            for t in e.instruction.iter().chain(&e.answer) {
                h.update((*t as u64).to_le_bytes());
            }
            h.update([0xff]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads a dataset file, rejecting it unless it was generated from `expected`.
    pub fn load(path: &Path, expected: Option<&TaskSpec>) -> Result<Self> {
        let ds: Dataset = serde_json::from_slice(&std::fs::read(path)?)?;
        if ds.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", ds.version)));
        }
        if ds.spec_hash != ds.spec.hash() {
            return Err(Error::Format("dataset spec hash does not match its spec".into()));
        }
        if let Some(spec) = expected {
            if spec.hash() != ds.spec_hash {
                return Err(Error::config(format!(
                    "dataset was generated for spec {} but {} was requested",
                    &ds.spec_hash[..12],
                    &spec.hash()[..12]
                )));
            }
        }
        Ok(ds)
    }

    /// Human-readable listing.
    pub fn text_dump(&self) -> String {
        let layout = self.spec.layout();
        let names = |ids: &[usize]| ids.iter().map(|t| layout.token_name(*t)).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# dataset v{} kind={:?} seed={} spec={} content={}",
            self.version,
            self.spec.kind,
            self.spec.seed,
            self.spec_hash,
            self.content_hash()
        );
        for (split, exs) in [("train", &self.train), ("eval", &self.eval)] {
            for (i, e) in exs.iter().enumerate() {
                let feat: Vec<String> = e.feature.iter().map(|x| format!("{x:.3}")).collect();
                let _ = writeln!(
                    out,
                    "{split}[{i}] feature=[{}] | {} => {}",
                    feat.join(","),
                    names(&e.instruction),
                    names(&e.answer)
                );
            }
        }
        out
    }
}

/// Result of text-only backbone pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    pub losses: Vec<f64>,
}

impl Pretrained {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the step-0 loss")
    }
}

/// Trains the backbone alone on the instruction/answer token streams of the
/// training split, with the soft-token slots zeroed, then freezes it.
///
/// `losses[i]` is the batch loss before update `i`; `losses[steps]` is the
/// loss after the last update. With `steps == 0` the model is exactly the
/// seeded initialization.
pub fn pretrain_backbone(
    dataset: &Dataset,
    shape: &ModelShape,
    seed: u64,
    steps: usize,
    lr: f64,
    batch_size: usize,
) -> Result<Pretrained> {
    let mut model = Model::init(shape, seed)?;
    let mut adam = AdamState::new(model.params(Component::Backbone), 0.999, lr)?;
    let n = dataset.train.len();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut rng = step_rng(seed, streams::PRETRAIN_BATCH, step as u64);
        let batch: Vec<Example> = (0..batch_size.min(n).max(1))
            .map(|_| dataset.train[rng.random_range(0..n)].clone())
            .collect();
        let mut fwd = model.forward(
            &batch,
            ForwardOptions {
                use_adapter: false,
                soft: SoftSource::Zeros,
                track: &[Component::Backbone],
            },
        )?;
        let loss = fwd.loss()?;
        losses.push(fwd.graph.value(loss).data()[0]);
        if step == steps {
            break;
        }
        let grads = fwd.grads_for(&model, Component::Backbone, loss)?;
        adam.step(model.backbone_mut(), &grads)?;
    }
    model.counters = Default::default();
    Ok(Pretrained { model, losses })
}
