// Per-phase timing probe for a realistic training iteration.
use jerseynum::codec::ClassSet;
use jerseynum::data::{balanced_counts, AugmentationPolicy, DatasetManifest, GeneratorParams, ImageStore, Split};
use jerseynum::loss::LossWeights;
use jerseynum::model::{build_network, BackboneConfig, Network};
use jerseynum::trainer::forward_backward;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassSet::from_number_range(1, 14).unwrap();
    let counts = balanced_counts(classes.len(), 40);
    let manifest = DatasetManifest::plan(
        &classes, &counts, &(0..25).collect::<Vec<u64>>(), (0.7, 0.12, 0.18), 7,
        GeneratorParams { image_size: (32, 32), max_occlusion: 0.0, max_blur_sigma: 0.0 },
    ).unwrap();
    manifest.write_images(dir.path()).unwrap();
    let model: Network<f32> = build_network(BackboneConfig::small_32(), classes, 1).unwrap();
    let mut store = ImageStore::new(&manifest, dir.path());
    store.preload(Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let policy = AugmentationPolicy::default();
    let indices: Vec<usize> = (0..50).collect();
    let w = LossWeights::multitask_best();

    let t0 = Instant::now();
    let mut batches = Vec::new();
    for _ in 0..50 {
        batches.push(store.load_batch::<f32>(Split::Train, &indices, &policy, &mut rng).unwrap());
    }
    println!("load_batch (jitter, cached): {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    let (batch, targets) = &batches[0];
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = forward_backward(&model, batch, targets, w).unwrap();
    }
    println!("forward_backward batch 50:  {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    let policy0 = AugmentationPolicy::none();
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = store.load_batch::<f32>(Split::Train, &indices, &policy0, &mut rng).unwrap();
    }
    println!("load_batch (no jitter):     {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);
}
