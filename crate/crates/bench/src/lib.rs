//! Fixed inputs for the kernel benchmarks under `benches/`.

use mixadapt_core::detector::Target;
use mixadapt_core::{BBox, Detection, GaussianBox, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let mu = BBox::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
            )
            .unwrap();
            let sigma = [0; 4].map(|_| rng.random_range(0.01..0.5));
            Detection::new(GaussianBox::new(mu, sigma).unwrap(), rng.random_range(0..2), rng.random_range(0.0..1.0))
        })
        .collect()
}

pub fn image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    let data = (0..side * side * 3).map(|_| rng.random_range(0.0..1.0f32)).collect();
    Image::new(side, side, 3, data).unwrap()
}

pub fn targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Target> {
    (0..n)
        .map(|_| Target {
            bbox: BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), 0.25, 0.3).unwrap(),
            class_id: rng.random_range(0..2),
        })
        .collect()
}
