use criterion::{black_box, criterion_group, criterion_main, Criterion};
use idle_core::adapter::mmd_loss;
use idle_core::autodiff::{ParamStore, Tape};
use idle_core::init::small_init;
use idle_core::{Backbone, BackboneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = small_init(&mut rng, &[64, 128]);
    let b = small_init(&mut rng, &[128, 64]);
    c.bench_function("matmul_64x128x64", |bch| {
        bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn backbone_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = BackboneConfig::default();
    let backbone = Backbone::new(&mut store, cfg.clone(), 300, &mut rng).unwrap();
    let tokens: Vec<usize> = (0..60).map(|i| (i * 7) % 300).collect();
    let prefixes: Vec<_> = (0..cfg.layers)
        .map(|_| small_init(&mut rng, &[2, cfg.d_model]))
        .collect();
    c.bench_function("backbone_forward_backward_t60_prefix2", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let pv: Vec<_> = prefixes
                .iter()
                .map(|p| tape.leaf(p.clone(), true))
                .collect();
            let out = backbone.forward(&mut tape, &store, &tokens, &pv).unwrap();
            let loss = tape.sum(out.pooled);
            black_box(tape.backward(loss).unwrap());
        })
    });
    c.bench_function("backbone_forward_clean_t60", |bch| {
        bch.iter(|| black_box(backbone.forward_clean(&store, &tokens).unwrap()))
    });
}

fn mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = small_init(&mut rng, &[2, 32]);
    let h = small_init(&mut rng, &[60, 32]);
    c.bench_function("mmd_prefix2_states60", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let dv = tape.leaf(d.clone(), true);
            let loss = mmd_loss(&mut tape, dv, &h, 1.0).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

criterion_group!(benches, matmul, backbone_forward, mmd);
criterion_main!(benches);
