mod common;

use common::{check_model, check_op, op_cases, perturb_adapter, random_batch, tiny_shape};
use cotune::tasks::{generate_dataset, TaskSpec};
use cotune::Model;

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        for seed in 0..20 {
            let err = check_op(&case, seed, 1e-5).unwrap();
            assert!(err <= 1e-4, "{} seed {seed}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn tiny_model_loss_matches_finite_differences() {
    let shape = tiny_shape();
    for seed in 0..20 {
        let mut model = Model::init(&shape, seed).unwrap();
        perturb_adapter(&mut model, seed, 0.3);
        let batch = random_batch(&shape, seed, 3);
        let err = check_model(&model, &batch, 1e-4).unwrap();
        assert!(err <= 1e-3, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn default_model_on_toy_qa_matches_finite_differences() {
    let mut spec = TaskSpec::toy_qa(3);
    spec.train_size = 8;
    spec.eval_size = 1;
    let ds = generate_dataset(&spec).unwrap();
    let mut shape = spec.model_shape();
    shape.dim = 8;
    shape.mlp_hidden = 8;
    shape.encoder_hidden = 6;
    shape.feature_dim = spec.feature_dim;
    let mut model = Model::init(&shape, 3).unwrap();
    perturb_adapter(&mut model, 3, 0.1);
    let err = check_model(&model, &ds.train[..3], 1e-4).unwrap();
    assert!(err <= 1e-3, "rel err {err:e}");
}
