//! Kernel-map construction and convolution throughput across occupancy
//! levels, checked against the dense oracle on every row.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsedet3d::sparse::{build_kernel_map, sparse_conv_forward, ConvWeights, Coord3, SparseTensor};
use sparsedet3d::Matrix;

use crate::reference::{dense_conv, rel_err};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub grid: usize,
    pub occupancies: Vec<f64>,
    pub kernels: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            occupancies: vec![0.05, 0.3, 1.0],
            kernels: vec![1, 3, 5],
            c_in: 16,
            c_out: 16,
            reps: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub occupancy: f64,
    pub kernel: usize,
    pub sites: usize,
    pub pairs: usize,
    /// Best-of-`reps` wall times in milliseconds.
    pub kmap_ms: f64,
    pub conv_ms: f64,
    pub gflops: f64,
    pub dense_rel_err: f64,
}

/// One row per `(occupancy, kernel)` pair, occupancy-major.
pub fn run_bench(cfg: &BenchConfig) -> sparsedet3d::Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let n = cfg.grid;
    for &occ in &cfg.occupancies {
        let mut coords = Vec::new();
        for x in 0..n as i32 {
            for y in 0..n as i32 {
                for z in 0..n as i32 {
                    if occ >= 1.0 || rng.random_bool(occ) {
                        coords.push(Coord3::new(x, y, z));
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push(Coord3::ORIGIN);
        }
        let feats: Vec<Vec<f64>> =
            coords.iter().map(|_| (0..cfg.c_in).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = SparseTensor::new(
            coords.clone(),
            Matrix::from_fn(coords.len(), cfg.c_in, |r, c| feats[r][c]),
            1,
            [0.02; 3],
        )?;
        for &k in &cfg.kernels {
            let kernel: Vec<Vec<Vec<f64>>> = (0..k.pow(3))
                .map(|_| (0..cfg.c_in).map(|_| (0..cfg.c_out).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let w = ConvWeights::new(
                k,
                Matrix::from_fn(k.pow(3) * cfg.c_in, cfg.c_out, |r, c| kernel[r / cfg.c_in][r % cfg.c_in][c]),
                None,
            )?;
            let (mut kmap_ms, mut conv_ms) = (f64::INFINITY, f64::INFINITY);
            let mut pairs = 0;
            let mut out = None;
            for _ in 0..cfg.reps.max(1) {
                let t0 = Instant::now();
                let km = build_kernel_map(&coords, &coords, k, 1)?;
                kmap_ms = kmap_ms.min(t0.elapsed().as_secs_f64() * 1e3);
                pairs = km.len();
                let t0 = Instant::now();
                let y = sparse_conv_forward(&x, &w, &coords, 1, false)?;
                conv_ms = conv_ms.min(t0.elapsed().as_secs_f64() * 1e3);
                out = Some(y.tensor);
            }
            let dense = dense_conv([n; 3], &coords, &feats, &kernel, None, k, 1, &coords);
            let dense: Vec<f64> = dense.into_iter().flatten().collect();
            let y = out.expect("at least one repetition");
            let flops = 2.0 * pairs as f64 * (cfg.c_in * cfg.c_out) as f64;
            rows.push(BenchRow {
                occupancy: occ,
                kernel: k,
                sites: coords.len(),
                pairs,
                kmap_ms,
                conv_ms,
                gflops: flops / (conv_ms * 1e6),
                dense_rel_err: rel_err(y.feats().as_slice(), &dense),
            });
        }
    }
    Ok(rows)
}

/// Tab-separated table with a header line.
pub fn to_tsv(rows: &[BenchRow]) -> String {
    let mut s = String::from("occupancy\tkernel\tsites\tpairs\tkmap_ms\tconv_ms\tgflops\tdense_rel_err\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.2e}",
            r.occupancy, r.kernel, r.sites, r.pairs, r.kmap_ms, r.conv_ms, r.gflops, r.dense_rel_err
        );
    }
    s
}
