//! Forward-pass benchmarks for the main weight programs.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weightsmith::cot::{build_filtering_transformer, CotPrompt, FilterConfig, MlpTask};
use weightsmith::encodings::assemble_cot_input;
use weightsmith::linalg::{
    build_matmul_block, build_transpose_block, matmul_input, transpose_input, LinearizationConfig,
    MatmulLayout, TransposeConfig, TransposeLayout,
};
use weightsmith::numerics::{LeakyAlpha, Matrix};
use weightsmith::primitives::{build_copy_block, copy_input, lambda_for, CopyLayout, RegionSpec};
use weightsmith::transformer::block_forward;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_copy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layout = CopyLayout::new(8, 16);
    let src = RegionSpec::new(0, 4, 8, 4);
    let dst = RegionSpec::new(4, 4, 0, 4);
    let lambda = lambda_for(1e-8, 1.0, 2.0, layout.total_cols()).unwrap();
    let block = build_copy_block(&layout, &src, &dst, lambda).unwrap();
    let data = random_matrix(&mut rng, 8, 16);
    let x = copy_input(&layout, &data, &src, &dst).unwrap();
    c.bench_function("copy 8x16", |b| {
        b.iter(|| block_forward(&block, &x).unwrap())
    });
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LinearizationConfig::default();
    let layout = MatmulLayout::new(4, 4, 4, cfg.denom_block);
    let block = build_matmul_block(&layout, &cfg, 8).unwrap();
    let a = random_matrix(&mut rng, 4, 4);
    let b_mat = random_matrix(&mut rng, 4, 4);
    let x = matmul_input(&layout, &a, &b_mat).unwrap();
    c.bench_function("matmul 4x4", |b| {
        b.iter(|| block_forward(&block, &x).unwrap())
    });
}

fn bench_transpose(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = TransposeLayout::new(4);
    let block = build_transpose_block(&layout, &TransposeConfig::default()).unwrap();
    let a = random_matrix(&mut rng, 4, 4);
    let x = transpose_input(&layout, &a).unwrap();
    c.bench_function("transpose 4x4", |b| {
        b.iter(|| block_forward(&block, &x).unwrap())
    });
}

fn bench_filter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let task = MlpTask::random(&[4, 4, 4], LeakyAlpha::new(0.5).unwrap(), &mut rng).unwrap();
    let prompt = CotPrompt::generate(&task, 4, 64, &mut rng).unwrap();
    let layout = prompt.layout(1).unwrap();
    let block = build_filtering_transformer(&layout, &FilterConfig::default()).unwrap();
    let x = assemble_cot_input(&prompt, 1).unwrap();
    c.bench_function("cot filter L=2 n=4", |b| {
        b.iter(|| block_forward(&block, &x).unwrap())
    });
}

criterion_group!(
    benches,
    bench_copy,
    bench_matmul,
    bench_transpose,
    bench_filter
);
criterion_main!(benches);
