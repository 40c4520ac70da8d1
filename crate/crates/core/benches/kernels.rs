//! Hot kernels under the rayon pool and the sequential fallback.
//!
//! With the default `parallel` feature each kernel runs on the global rayon
//! pool (`rayon`) and on a one-thread pool (`rayon-1`). Building with
//! `--no-default-features` gives the plain loops (`sequential`). Compare the
//! two builds with criterion baselines:
//!
//! ```text
//! cargo bench -p octa-vq --bench kernels -- --save-baseline par
//! cargo bench -p octa-vq --bench kernels --no-default-features -- --save-baseline seq
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use octa_vq::grid::FeatureGrid;
use octa_vq::metrics::ssim;
use octa_vq::ops::{conv3d_forward, ConvGeom};
use octa_vq::volume::{generate_dataset, generate_phantom, PhantomConfig};
use octa_vq::vq::{vq_quantize, Codebook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs `f` under every execution mode this build supports.
fn modes(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        g.bench_function("rayon", |b| b.iter(&f));
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        g.bench_function("rayon-1", |b| one.install(|| b.iter(&f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&f));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let geom = ConvGeom::same(8, 8, 3);
    let x = FeatureGrid::from_vec(8, [16, 16, 16], random(8 * 16 * 16 * 16, 1)).unwrap();
    let w = random(geom.weight_len(), 2);
    let bias = vec![0.0; 8];
    modes(c, "conv3d_8x16^3_k3", || {
        black_box(conv3d_forward(black_box(&x), &w, &bias, geom));
    });
}

fn quantize(c: &mut Criterion) {
    let cb = Codebook::new(512, 16, random(512 * 16, 3)).unwrap();
    let u = FeatureGrid::from_vec(16, [8, 8, 8], random(16 * 512, 4)).unwrap();
    modes(c, "vq_512x16_over_8^3", || {
        black_box(vq_quantize(black_box(&u), &cb).unwrap());
    });
}

fn metrics(c: &mut Criterion) {
    let cfg = PhantomConfig {
        dims: [64, 64, 32],
        ..Default::default()
    };
    let p = generate_phantom(&cfg).unwrap();
    modes(c, "ssim_64x64x32", || {
        black_box(ssim(black_box(&p.oct), &p.octa).unwrap());
    });
}

fn phantom(c: &mut Criterion) {
    let cfg = PhantomConfig {
        dims: [16, 16, 16],
        ..Default::default()
    };
    modes(c, "phantom_dataset_8x16^3", || {
        black_box(generate_dataset(black_box(&cfg), 8).unwrap());
    });
}

criterion_group!(benches, conv, quantize, metrics, phantom);
criterion_main!(benches);
