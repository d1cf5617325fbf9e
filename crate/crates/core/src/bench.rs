//! Wall-clock comparison of dense and sparse node updates.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{self, ThetaPolicy};
use crate::tensor::Tensor;

pub const DEFAULT_KS: &[usize] = &[2, 4, 8, 16];
pub const DEFAULT_DS: &[usize] = &[2, 8, 32];
pub const DEFAULT_CS: &[f64] = &[2.0, 1.0, 0.5, 0.25, 0.125];
pub const MIN_REPS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub k: usize,
    pub d: usize,
    pub c: f64,
    pub kept_edges: usize,
    pub dense_ms: f64,
    pub dense_std_ms: f64,
    pub sparse_ms: f64,
    pub sparse_std_ms: f64,
    pub max_abs_diff: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn time_ms(f: impl FnOnce() -> Result<Tensor>) -> Result<(f64, Tensor)> {
    let start = Instant::now();
    let out = f()?;
    Ok((start.elapsed().as_secs_f64() * 1e3, out))
}

/// Times `reps` dense and sparse node updates of a softmax relation over
/// random `K×D` nodes sparsified at `θ = c·mean`.
pub fn bench_point(k: usize, d: usize, c: f64, reps: usize, seed: u64) -> Result<BenchPoint> {
    if reps < MIN_REPS {
        return Err(Error::invalid(
            "bench",
            format!("{reps} repetitions, at least {MIN_REPS} required"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = Tensor::randn([k, d], 1.0, &mut rng);
    let rel = graph::relation_softmax(&nodes)?;
    let theta = graph::make_theta(rel.values(), ThetaPolicy::MultipleOfMean(c));
    let rel = graph::sparsify(&rel, theta);
    let mut dense = Vec::with_capacity(reps);
    let mut sparse = Vec::with_capacity(reps);
    let mut max_abs_diff: f64 = 0.0;
    for _ in 0..reps {
        let (td, yd) = time_ms(|| graph::node_update_dense(&rel, &nodes))?;
        let (ts, ys) = time_ms(|| graph::node_update(&rel, &nodes))?;
        dense.push(td);
        sparse.push(ts);
        max_abs_diff = max_abs_diff.max(yd.max_abs_diff(&ys));
    }
    let (dense_ms, dense_std_ms) = mean_std(&dense);
    let (sparse_ms, sparse_std_ms) = mean_std(&sparse);
    Ok(BenchPoint {
        k,
        d,
        c,
        kept_edges: rel.kept_edges(),
        dense_ms,
        dense_std_ms,
        sparse_ms,
        sparse_std_ms,
        max_abs_diff,
    })
}

pub fn run_bench(
    ks: &[usize],
    ds: &[usize],
    cs: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchPoint>> {
    let mut out = Vec::with_capacity(ks.len() * ds.len() * cs.len());
    for &k in ks {
        for &d in ds {
            for &c in cs {
                out.push(bench_point(k, d, c, reps, seed)?);
            }
        }
    }
    Ok(out)
}

/// Header `K,D,c,dense_ms,sparse_ms,max_abs_diff`; times are means.
pub fn bench_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from("K,D,c,dense_ms,sparse_ms,max_abs_diff\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.k, p.d, p.c, p.dense_ms, p.sparse_ms, p.max_abs_diff
        )
        .unwrap();
    }
    out
}

/// Companion table with standard deviations and kept-edge counts.
pub fn bench_stddev_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from("K,D,c,dense_std_ms,sparse_std_ms,kept_edges\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.k, p.d, p.c, p.dense_std_ms, p.sparse_std_ms, p.kept_edges
        )
        .unwrap();
    }
    out
}
