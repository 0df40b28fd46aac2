#![allow(dead_code)]

use cotune::graph::{AnswerMask, Segment};
use cotune::metrics::DistanceKind;
use cotune::model::{ForwardOptions, SoftSource};
use cotune::rng::stream_rng;
use cotune::{finite_diff_grad, Component, Example, Graph, Model, ModelShape, Result, Tensor, Var};
use rand::Rng;

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&d) / n(a).max(n(b)).max(floor)
}

type Build = fn(&mut Graph, &[Var], &OpCtx) -> Result<Var>;

/// Non-tensor inputs drawn per instance.
pub struct OpCtx {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: AnswerMask,
    pub dist: Tensor,
    pub weights: Vec<f64>,
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<[usize; 2]>,
    pub build: Build,
}

pub fn op_cases() -> Vec<OpCase> {
    let c = |name, shapes: &[[usize; 2]], build| OpCase {
        name,
        shapes: shapes.to_vec(),
        build,
    };
    vec![
        c("matmul", &[[3, 4], [4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        c("add", &[[3, 4], [3, 4]], |g, v, _| g.add(v[0], v[1])),
        c("mul", &[[3, 4], [3, 4]], |g, v, _| g.mul(v[0], v[1])),
        c("scale", &[[3, 4]], |g, v, _| g.scale(v[0], -1.7)),
        c("gelu", &[[3, 4]], |g, v, _| g.gelu(v[0])),
        c("embedding", &[[6, 3]], |g, v, x| g.embedding(v[0], &x.ids)),
        c("concat_rows", &[[2, 3], [3, 3]], |g, v, _| g.concat_rows(&[v[0], v[1], v[0]])),
        c("slice_rows", &[[5, 3]], |g, v, _| g.slice_rows(v[0], 1, 3)),
        c("reshape", &[[4, 3]], |g, v, _| g.reshape(v[0], 2, 6)),
        c("softmax_rows", &[[3, 5]], |g, v, _| g.softmax_rows(v[0])),
        c("causal_attention", &[[5, 3], [5, 3], [5, 3]], |g, v, _| {
            let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
            g.causal_attention(v[0], v[1], v[2], &segs)
        }),
        c("cross_entropy", &[[4, 5]], |g, v, x| g.cross_entropy(v[0], &x.targets, &x.mask)),
        c("row_distance/tv", &[[4, 5]], |g, v, x| {
            let p = g.softmax_rows(v[0])?;
            g.row_distance(p, &x.dist, DistanceKind::TotalVariation)
        }),
        c("row_distance/sqrt-js", &[[4, 5]], |g, v, x| {
            let p = g.softmax_rows(v[0])?;
            g.row_distance(p, &x.dist, DistanceKind::SqrtJensenShannon)
        }),
        c("weighted_sum", &[[3, 4]], |g, v, x| g.weighted_sum(v[0], &x.weights)),
        c("sum", &[[3, 4]], |g, v, _| g.sum(v[0])),
    ]
}

fn random_dist<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut d = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let r: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = r.iter().sum();
        d.extend(r.iter().map(|x| x / s));
    }
    Tensor::matrix(rows, cols, d).unwrap()
}

/// Worst relative error between backward and central differences over
/// every input of one op instance. The op output is contracted with fixed
/// random weights so every output element contributes.
pub fn check_op(case: &OpCase, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0xF00D);
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| Tensor::randn(&[s[0], s[1]], 1.0, &mut rng))
        .collect();
    let ctx = OpCtx {
        ids: (0..4).map(|_| rng.random_range(0..6)).collect(),
        targets: (0..4).map(|_| rng.random_range(0..5)).collect(),
        mask: AnswerMask::new(vec![Some(0), Some(0), None, Some(1)]),
        dist: random_dist(4, 5, &mut rng),
        weights: (0..12).map(|_| rng.random::<f64>() - 0.5).collect(),
    };
    let build = case.build;
    let eval = |vals: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), want_grad)).collect::<Result<_>>()?;
        let out = build(&mut g, &vars, &ctx)?;
        let n = g.value(out).len();
        let mut wr = stream_rng(seed, 0xBEEF);
        let w: Vec<f64> = (0..n).map(|_| wr.random::<f64>() - 0.5).collect();
        let s = g.weighted_sum(out, &w)?;
        let val = g.value(s).data()[0];
        if !want_grad {
            return Ok((val, vec![]));
        }
        let grads = g.backward(s)?;
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.len()], |x| x.to_vec()))
            .collect();
        Ok((val, gs))
    };
    let (_, analytic) = eval(&inputs, true)?;
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let fd = finite_diff_grad(
            |t| {
                let mut vals = inputs.clone();
                vals[i] = t.clone();
                Ok(eval(&vals, false)?.0)
            },
            &inputs[i],
            eps,
        )?;
        worst = worst.max(rel_err(&analytic[i], fd.data(), 1e-8));
    }
    Ok(worst)
}

/// A model small enough for full finite differences.
pub fn tiny_shape() -> ModelShape {
    ModelShape {
        vocab: 12,
        dim: 4,
        blocks: 1,
        soft_tokens: 2,
        feature_dim: 3,
        rank: 2,
        max_seq: 10,
        mlp_hidden: 6,
        encoder_hidden: 5,
        adapter_init_std: 0.3,
        encoder_out_std: 0.3,
    }
}

/// Seeded batch of random examples for `shape`.
pub fn random_batch(shape: &ModelShape, seed: u64, n: usize) -> Vec<Example> {
    let mut rng = stream_rng(seed, 0xBA7C);
    let budget = shape.max_seq - shape.soft_tokens;
    (0..n)
        .map(|_| {
            let il = rng.random_range(1..=budget.min(4));
            let al = rng.random_range(1..=(budget + 1 - il).min(3));
            Example {
                feature: (0..shape.feature_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                instruction: (0..il).map(|_| rng.random_range(0..shape.vocab)).collect(),
                answer: (0..al).map(|_| rng.random_range(0..shape.vocab)).collect(),
            }
        })
        .collect()
}

/// Fills every adapter B with noise so all adapter gradients are nonzero.
pub fn perturb_adapter(model: &mut Model, seed: u64, std: f64) {
    let mut rng = stream_rng(seed, 0xADA9);
    for (name, t) in model.trainable_mut(Component::Adapter).unwrap().iter_mut() {
        if name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), std, &mut rng);
        }
    }
}

/// Worst relative error of the end-to-end loss gradient over every
/// parameter of every partition (the backbone is tracked only here).
pub fn check_model(model: &Model, batch: &[Example], eps: f64) -> Result<f64> {
    let all = [Component::Encoder, Component::Adapter, Component::Backbone];
    let opts = ForwardOptions {
        use_adapter: true,
        soft: SoftSource::Encoder,
        track: &all,
    };
    let mut f = model.forward(batch, opts)?;
    let l = f.loss()?;
    let grads = f.grads(model, &all, l)?;
    let mut worst: f64 = 0.0;
    for (ci, &c) in all.iter().enumerate() {
        for (name, t) in model.params(c).iter() {
            let fd = finite_diff_grad(
                |probe| {
                    let mut m = model.clone();
                    let mut tensors: Vec<(String, Tensor)> =
                        m.named_tensors().into_iter().map(|(k, v)| (k, v.clone())).collect();
                    for (k, v) in tensors.iter_mut() {
                        if k == name {
                            *v = probe.clone();
                        }
                    }
                    m.load_tensors(tensors, &all)?;
                    m.batch_loss(batch)
                },
                t,
                eps,
            )?;
            let g = grads[ci].get(name).unwrap();
            worst = worst.max(rel_err(g.data(), fd.data(), 1e-6));
        }
    }
    Ok(worst)
}

/// Random categorical vector; some draws put exact zeros in the support.
pub fn random_categorical<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let sparse = rng.random_bool(0.3);
    let mut v: Vec<f64> = (0..k)
        .map(|_| if sparse && rng.random_bool(0.4) { 0.0 } else { -rng.random::<f64>().max(1e-300).ln() })
        .collect();
    if v.iter().all(|x| *x == 0.0) {
        v[rng.random_range(0..k)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Largest violation of the four metric axioms over `n` random triples.
pub fn metric_axiom_violation(kind: DistanceKind, seed: u64, n: usize) -> f64 {
    use cotune::metrics::distribution_distance as d;
    let mut rng = stream_rng(seed, 0x3E7);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let k = rng.random_range(2..12);
        let p = random_categorical(&mut rng, k);
        let q = random_categorical(&mut rng, k);
        let r = random_categorical(&mut rng, k);
        let pq = d(&p, &q, kind).unwrap();
        let qp = d(&q, &p, kind).unwrap();
        let pr = d(&p, &r, kind).unwrap();
        let rq = d(&r, &q, kind).unwrap();
        let pp = d(&p, &p, kind).unwrap();
        worst = worst
            .max(-pq)
            .max((pq - qp).abs())
            .max(pp.abs())
            .max(pq - (pr + rq));
        if p != q && pq <= 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// Bound evaluated in log space, term by term, as an arithmetic oracle.
pub fn bound_oracle(b: &cotune::theory::BoundInputs) -> f64 {
    let k = b.k as f64;
    let n = b.n.unwrap_or(b.k) as f64;
    let lb = b.beta2.ln();
    let first = (2.0 * b.r / b.alpha) * (b.f0 - b.f_star) / ((1.0 + b.lambda) * k);
    let c1 = 2.0 * b.alpha * b.r * (1.0 - b.beta2).powf(-0.5);
    let c2 = 0.5 * b.alpha * b.alpha * b.l / (1.0 - b.beta2);
    let log_arg = (-(n * lb).exp_m1()).ln() + 2.0 * b.r.ln() - (1.0 - b.beta2).ln() - b.eps.ln();
    first + c1 * (log_arg / k - lb) + c2 * (log_arg / k - lb)
}

/// Toy-QA batch of `n` training examples.
pub fn qa_batch(seed: u64, n: usize) -> (cotune::tasks::TaskSpec, Vec<Example>) {
    let mut spec = cotune::tasks::TaskSpec::toy_qa(seed);
    spec.train_size = n.max(1);
    spec.eval_size = 1;
    let ds = cotune::tasks::generate_dataset(&spec).unwrap();
    (spec, ds.train)
}

/// Weighted per-row distance written as an explicit loop over examples.
pub fn loop_distance(a: &Tensor, b: &Tensor, rows: &[Option<usize>], kind: DistanceKind) -> f64 {
    let n = rows.iter().flatten().max().map_or(0, |m| m + 1);
    let mut per_example = vec![(0.0, 0usize); n];
    for (i, r) in rows.iter().enumerate() {
        if let Some(e) = r {
            let (p, q) = (a.row(i), b.row(i));
            let d = match kind {
                DistanceKind::TotalVariation => 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>(),
                DistanceKind::SqrtJensenShannon => {
                    let mut js = 0.0;
                    for (x, y) in p.iter().zip(q) {
                        let m = 0.5 * (x + y);
                        if *x > 0.0 {
                            js += 0.5 * x * (x / m).log2();
                        }
                        if *y > 0.0 {
                            js += 0.5 * y * (y / m).log2();
                        }
                    }
                    js.max(0.0).sqrt()
                }
            };
            per_example[*e].0 += d;
            per_example[*e].1 += 1;
        }
    }
    per_example.iter().map(|(s, c)| s / *c as f64).sum::<f64>() / n as f64
}

/// κ by brute force: clone the model, take each one-component gradient
/// step by hand, rerun the forward, measure with the loop distance.
pub fn kappa_oracle(model: &Model, batch: &[Example], lr_s: f64, lr_t: f64, kind: DistanceKind) -> (f64, f64, f64) {
    let comps = [Component::Encoder, Component::Adapter];
    let mut f = model
        .forward(batch, ForwardOptions { track: &comps, ..Default::default() })
        .unwrap();
    let l = f.loss().unwrap();
    let grads = f.grads(model, &comps, l).unwrap();
    let base = model.forward_distributions(batch, true).unwrap();
    let mut d = [0.0; 2];
    for (i, (&c, lr)) in comps.iter().zip([lr_s, lr_t]).enumerate() {
        let mut m = model.clone();
        for (name, t) in m.trainable_mut(c).unwrap().iter_mut() {
            let g = grads[i].get(name).unwrap();
            for (x, gx) in t.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * gx;
            }
        }
        let moved = m.forward_distributions(batch, true).unwrap();
        d[i] = loop_distance(&moved.probs, &base.probs, base.mask.rows(), kind);
    }
    let kappa = (d[1] / d[0].max(1e-12)).clamp(1e-3, 1e3);
    (kappa, d[0], d[1])
}

/// Model on the toy-QA shape with a non-zero adapter.
pub fn qa_model(seed: u64) -> (Model, Vec<Example>) {
    let (spec, batch) = qa_batch(seed, 8);
    let mut m = Model::init(&spec.model_shape(), seed).unwrap();
    perturb_adapter(&mut m, seed, 0.05);
    (m, batch)
}

/// κ through the optimizer step versus the clone-model oracle, over
/// seeded (model, batch, lr) triples. Returns the worst absolute gap.
pub fn kappa_agreement(seeds: std::ops::Range<u64>) -> f64 {
    use cotune::optimizer::{CommitOptimizer, StepConfig};
    use cotune::schedulers::Rates;
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let (mut model, batch) = qa_model(seed);
        let mut rng = stream_rng(seed, 0x1A);
        let rates = Rates {
            lr_s: 10f64.powf(rng.random_range(-4.0..-1.0)),
            lr_t: 10f64.powf(rng.random_range(-4.0..-1.0)),
        };
        let want = kappa_oracle(&model, &batch, rates.lr_s, rates.lr_t, DistanceKind::TotalVariation);
        let mut opt = CommitOptimizer::new(&model, StepConfig::default()).unwrap();
        let r = opt.step(&mut model, &batch, rates, 0, false).unwrap();
        worst = worst
            .max((r.record.kappa - want.0).abs())
            .max((r.record.d_s - want.1).abs())
            .max((r.record.d_t - want.2).abs());
    }
    worst
}

/// Runs the coordinated step (sgd, no regularizer, constant rates) and the
/// plain trainer side by side; returns the first step where parameters or
/// losses differ in any bit, or `None`.
pub fn reduction_mismatch(seed: u64, steps: u64) -> Option<u64> {
    use cotune::harness::{load_dataset, prepare_model, sample_batch, ExperimentConfig};
    use cotune::optimizer::{plain_sgd_step, Backend, CommitOptimizer, StepConfig};
    use cotune::schedulers::Rates;
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.steps = 20;
    let ds = load_dataset(&cfg).unwrap();
    let (mut a, _) = prepare_model(&cfg, &ds, seed).unwrap();
    let mut b = a.clone();
    let rates = Rates { lr_s: 1e-2, lr_t: 1e-2 };
    let step_cfg = StepConfig {
        backend: Backend::Sgd,
        ..StepConfig::default()
    };
    assert!(!step_cfg.reg.enabled);
    let mut opt = CommitOptimizer::new(&a, step_cfg).unwrap();
    for step in 0..steps {
        let batch = sample_batch(&ds, seed, step, cfg.batch_size);
        let la = opt.step(&mut a, &batch, rates, step, true).unwrap().record.loss;
        let lb = plain_sgd_step(&mut b, &batch, rates).unwrap();
        let same = la.to_bits() == lb.to_bits()
            && [Component::Encoder, Component::Adapter, Component::Backbone]
                .iter()
                .all(|c| a.params(*c) == b.params(*c) && a.params(*c).checksum() == b.params(*c).checksum());
        if !same {
            return Some(step);
        }
    }
    None
}

/// Columns of a metrics CSV, parsed by splitting lines.
pub fn raw_column(path: &std::path::Path, name: &str) -> Vec<(u64, Option<f64>)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[col].parse().ok())
        })
        .collect()
}

/// Two-pass population std of κ over an inclusive step window.
pub fn external_kappa_std(path: &std::path::Path, window: [u64; 2]) -> f64 {
    let ks: Vec<f64> = raw_column(path, "kappa")
        .into_iter()
        .filter(|(s, _)| *s >= window[0] && *s <= window[1])
        .map(|(_, k)| k.unwrap())
        .collect();
    let n = ks.len() as f64;
    let mean = ks.iter().sum::<f64>() / n;
    (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// First step at which the trailing mean of the loss over `w` rows is at or
/// below `threshold`.
pub fn external_steps_to_threshold(path: &std::path::Path, threshold: f64, w: usize) -> Option<u64> {
    let rows = raw_column(path, "loss");
    for i in 0..rows.len() {
        let lo = (i + 1).saturating_sub(w);
        let m = rows[lo..=i].iter().map(|(_, l)| l.unwrap()).sum::<f64>() / (i + 1 - lo) as f64;
        if m <= threshold {
            return Some(rows[i].0);
        }
    }
    None
}
