//! Serialization round trips: bit-exact matrices, forward-identical blocks,
//! and hard failures on malformed or mismatched files.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weightsmith::cot::{build_filtering_transformer, CotPrompt, FilterConfig, MlpTask};
use weightsmith::encodings::assemble_cot_input;
use weightsmith::functions::{FunctionTable, SigmoidAtom};
use weightsmith::numerics::{LeakyAlpha, Matrix};
use weightsmith::transformer::block_forward;
use weightsmith_cli::schema::{
    block_from_json, block_to_json, matrix_from_json, matrix_to_json, prompt_from_json,
    prompt_to_json, table_from_json, table_to_json, SchemaError,
};

#[test]
fn matrix_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let m = Matrix::new(
        3,
        3,
        (0..9)
            .map(|_| rng.gen_range(-1.0f64..1.0) * 10f64.powi(rng.gen_range(-10..5)))
            .collect(),
    )
    .unwrap();
    let back = matrix_from_json(&matrix_to_json(&m)).unwrap();
    assert_eq!(m, back);
    for (a, b) in m.data().iter().zip(back.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn filtering_block_round_trip_preserves_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let task = MlpTask::random(&[3, 3, 3], LeakyAlpha::new(0.5).unwrap(), &mut rng).unwrap();
    let prompt = CotPrompt::generate(&task, 3, 64, &mut rng).unwrap();
    let layout = prompt.layout(1).unwrap();
    let block = build_filtering_transformer(&layout, &FilterConfig::default()).unwrap();
    assert_eq!(block.layers.len(), 7);
    let x = assemble_cot_input(&prompt, 1).unwrap();
    let before = block_forward(&block, &x).unwrap();
    let restored = block_from_json(&block_to_json(&block)).unwrap();
    let after = block_forward(&restored, &x).unwrap();
    assert_eq!(before, after);
    for (a, b) in before.data().iter().zip(after.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn truncated_file_yields_error_without_partial_value() {
    let m = Matrix::identity(3);
    let text = matrix_to_json(&m);
    let truncated = &text[..text.len() / 2];
    assert!(matrix_from_json(truncated).is_err());
}

#[test]
fn wrong_schema_version_is_reported() {
    let m = Matrix::identity(2);
    let text = matrix_to_json(&m).replace("weightsmith/v1", "weightsmith/v0");
    let err = matrix_from_json(&text).unwrap_err();
    let schema_err = err.downcast_ref::<SchemaError>().expect("schema error");
    assert_eq!(schema_err.expected, "weightsmith/v1");
    assert_eq!(schema_err.found, "weightsmith/v0");
}

#[test]
fn kind_mismatch_is_reported() {
    let m = Matrix::identity(2);
    let text = matrix_to_json(&m).replace("\"kind\": \"matrix\"", "\"kind\": \"block\"");
    assert!(matrix_from_json(&text).is_err());
}

#[test]
fn prompt_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let task = MlpTask::random(&[2, 2], LeakyAlpha::new(0.5).unwrap(), &mut rng).unwrap();
    let mut prompt = CotPrompt::generate(&task, 2, 64, &mut rng).unwrap();
    let truth = task.forward_chain(prompt.test_input()).unwrap();
    prompt.push_prediction(truth[1].clone()).unwrap();
    let restored = prompt_from_json(&prompt_to_json(&prompt)).unwrap();
    assert_eq!(prompt.chains(), restored.chains());
    assert_eq!(prompt.test_input(), restored.test_input());
    assert_eq!(prompt.predictions(), restored.predictions());
    assert_eq!(prompt.n_max(), restored.n_max());
}

#[test]
fn task_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let task = MlpTask::random(&[3, 2, 2], LeakyAlpha::new(0.25).unwrap(), &mut rng).unwrap();
    let restored =
        weightsmith_cli::schema::task_from_json(&weightsmith_cli::schema::task_to_json(&task))
            .unwrap();
    assert_eq!(task.dims(), restored.dims());
    assert_eq!(task.alpha(), restored.alpha());
    for l in 0..task.depth() {
        assert_eq!(task.weight(l), restored.weight(l));
    }
}

#[test]
fn table_round_trip() {
    let atom = SigmoidAtom::new(1.25, vec![0.3, -0.2], 0.4, 2.5, 1.0, 1.0).unwrap();
    let atom2 = SigmoidAtom::new(-0.75, vec![0.1, 0.6], -0.2, 1.5, 1.0, 1.0).unwrap();
    let table = FunctionTable::from_atoms(&[vec![atom, atom2]], 2, 1.0, 1.0).unwrap();
    let restored = table_from_json(&table_to_json(&table)).unwrap();
    assert_eq!(table, restored);
}
