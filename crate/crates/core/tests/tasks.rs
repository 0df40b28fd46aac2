use cotune::tasks::{generate_dataset, pretrain_backbone, prototype, Attributes, Dataset, TaskSpec};
use cotune::Error;

fn nearest(spec: &TaskSpec, f: &[f64]) -> Attributes {
    let mut best = (f64::INFINITY, Attributes { color: 0, shape: 0, count: 0 });
    for color in 0..spec.colors {
        for shape in 0..spec.shapes {
            for count in 0..spec.counts {
                let a = Attributes { color, shape, count };
                let d: f64 = prototype(spec, &a).iter().zip(f).map(|(p, x)| (p - x) * (p - x)).sum();
                if d < best.0 {
                    best = (d, a);
                }
            }
        }
    }
    best.1
}

#[test]
fn features_identify_their_attributes() {
    for spec in [TaskSpec::toy_qa(0), TaskSpec::toy_caption(1)] {
        let ds = generate_dataset(&spec).unwrap();
        let hits = ds
            .train
            .iter()
            .zip(&ds.train_attributes)
            .filter(|(e, a)| nearest(&spec, &e.feature) == **a)
            .count();
        assert!(hits as f64 >= 0.99 * ds.train.len() as f64, "{hits}/{}", ds.train.len());
    }
}

#[test]
fn dataset_file_round_trips_and_checks_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec::toy_caption(4);
    let ds = generate_dataset(&spec).unwrap();
    let p = dir.path().join("ds.json");
    ds.save(&p).unwrap();
    let back = Dataset::load(&p, Some(&spec)).unwrap();
    assert_eq!(back.content_hash(), ds.content_hash());
    let other = TaskSpec::toy_caption(5);
    assert!(matches!(Dataset::load(&p, Some(&other)), Err(Error::Config(_))));
}

#[test]
fn pretraining_lowers_the_text_loss() {
    let spec = TaskSpec::toy_qa(0);
    let ds = generate_dataset(&spec).unwrap();
    for seed in 0..5 {
        let p = pretrain_backbone(&ds, &spec.model_shape(), seed, 200, 1e-3, 16).unwrap();
        assert_eq!(p.losses.len(), 201);
        let head: f64 = p.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = p.losses[191..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn caption_answers_end_with_end_token() {
    let spec = TaskSpec::toy_caption(2);
    let ds = generate_dataset(&spec).unwrap();
    let layout = spec.layout();
    for e in &ds.train {
        assert_eq!(*e.answer.last().unwrap(), layout.end);
        assert!((spec.answer_len[0]..=spec.answer_len[1]).contains(&e.answer.len()));
    }
}
