use agenet::transforms::{Pipeline, TransformSpec};
use criterion::{criterion_group, criterion_main, Criterion};
use image::{Rgb, RgbImage};
use rand::SeedableRng;

fn transforms(c: &mut Criterion) {
    let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for p in [Pipeline::Norm256, Pipeline::ResizeColorjitFlipBlur] {
        let spec = TransformSpec::new(p, 224);
        c.bench_function(&format!("transform/{}", p.name()), |b| {
            b.iter(|| spec.apply(&img, &mut rng).unwrap())
        });
    }
}

criterion_group!(benches, transforms);
criterion_main!(benches);
