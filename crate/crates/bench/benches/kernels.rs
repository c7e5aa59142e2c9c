//! Criterion benchmarks for the numeric hot paths: rotated cross-correlation,
//! instance fusion, and the full single-observation policy forward pass.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arrange_core::embed::{encode_visual, EmbeddingVector, EncoderParams};
use arrange_core::fusion::{confidence_map, fuse, FusionConfig};
use arrange_core::grid::{cross_correlate, rotate_crop_degrees, Grid2D, RotationAngle};
use arrange_core::policy::{act, PolicyNets};
use arrange_core::scene::{make_episode, render, Split, TaskSpec};
use arrange_core::seg::{segment, DEFAULT_MIN_AREA};

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid2D {
    let mut g = Grid2D::zeros(h, w, c);
    for v in g.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    g
}

fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    EmbeddingVector::unit(values.into_iter().map(|v| v / norm).collect())
}

fn bench_correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("cross_correlate");
    for &(side, crop) in &[(32usize, 9usize), (64, 15)] {
        let mut rng = ChaCha8Rng::seed_from_u64(side as u64);
        let feature = random_grid(&mut rng, side, side, 2);
        let kernel = random_grid(&mut rng, crop, crop, 2);
        group.bench_with_input(
            BenchmarkId::new("single", format!("{side}x{side}_k{crop}")),
            &(),
            |b, _| b.iter(|| cross_correlate(black_box(&feature), black_box(&kernel)).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("rotated_sweep_36", format!("{side}x{side}_k{crop}")),
            &(),
            |b, _| {
                b.iter(|| {
                    for angle in RotationAngle::all() {
                        let rk = rotate_crop_degrees(&kernel, angle.degrees()).unwrap();
                        black_box(cross_correlate(&feature, &rk).unwrap());
                    }
                })
            },
        );
    }
    group.finish();
}

fn bench_fusion(c: &mut Criterion) {
    let mut group = c.benchmark_group("fusion");
    let config = FusionConfig::default();
    for &n in &[2usize, 6, 12] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let instances: Vec<EmbeddingVector> =
            (0..n).map(|_| random_embedding(&mut rng, 32)).collect();
        let global = random_embedding(&mut rng, 32);
        group.bench_with_input(BenchmarkId::new("fuse", n), &(), |b, _| {
            b.iter(|| fuse(black_box(&instances), black_box(&global), &config).unwrap())
        });
    }
    group.finish();
}

fn bench_policy_forward(c: &mut Criterion) {
    let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
    let ep = make_episode(&task, Split::Seen, 0).unwrap();
    let obs = render(&ep.scene);
    let seg = segment(&obs, [0.0; 3], DEFAULT_MIN_AREA).unwrap();
    let encoders = EncoderParams::oracle_aligned(0);
    let nets = PolicyNets::oracle_init();
    let fusion = FusionConfig::default();
    c.bench_function("policy_act_full", |b| {
        b.iter(|| {
            act(
                black_box(&obs),
                &ep.instruction,
                &encoders,
                &nets,
                &seg,
                &fusion,
            )
            .unwrap()
        })
    });
    let text = arrange_core::policy::filter_text(&ep.instruction).unwrap();
    let e = arrange_core::embed::encode_text(&text.tl_query, &encoders).unwrap();
    let instance_embs: Vec<EmbeddingVector> = seg
        .instances
        .iter()
        .map(|i| encode_visual(&arrange_core::seg::crop(&obs, i, 1), &encoders).unwrap())
        .collect();
    let global = encode_visual(&obs, &encoders).unwrap();
    let (fused, _) = fuse(&instance_embs, &global, &fusion).unwrap();
    c.bench_function("confidence_map_64", |b| {
        b.iter(|| confidence_map(black_box(&seg), &fused, &e).unwrap())
    });
}

criterion_group!(benches, bench_correlation, bench_fusion, bench_policy_forward);
criterion_main!(benches);
