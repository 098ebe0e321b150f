//! Hat-projected assembly and a symbol product, sequential against parallel.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hindex::groupoid::{FiberKernel, KernelSymbol};
use hindex::heisenberg::HeisenbergDim;
use hindex::lattice::Grid;
use hindex::morphisms::{t_heisenberg_with, MorphismOptions, TScale};
use hindex::par::Execution;
use std::hint::black_box;
use std::sync::Arc;

fn assembly(c: &mut Criterion) {
    let d = HeisenbergDim::new(1).unwrap();
    let g = Grid::new(d, 9, 3.0).unwrap();
    let a: Arc<dyn FiberKernel> = Arc::new(KernelSymbol::parse("exp(-sqnorm(x)/16)*exp(-sqnorm)", d, 6.0).unwrap());
    let t = TScale::new(2.0).unwrap();
    let mut group = c.benchmark_group("hat_assembly_n9");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = MorphismOptions { exec, ..MorphismOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, o| {
            b.iter(|| black_box(t_heisenberg_with(a.clone(), t, &g, o).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, assembly);
criterion_main!(benches);
