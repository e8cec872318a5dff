//! Deterministic inputs shared by the benchmarks in `benches/`.

use fedseg_core::data::{federation_plan, generate_federation, to_batch, Scale};
use fedseg_core::fl::RoundUpdate;
use fedseg_core::model::SegBatch;
use fedseg_core::rng::substream;
use fedseg_core::Tensor;
use rand::Rng;

/// `[n, c, h, w]` tensor of uniform values in `[-1, 1)`.
pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = substream(seed, &[]);
    let data = (0..shape.iter().product())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// First `n` training slices of client 1 of the desk federation at
/// `size × size`.
pub fn desk_batch(n: usize, size: usize) -> SegBatch {
    let mut plan = federation_plan(Scale::Desk, (size, size));
    plan.clients.truncate(1);
    plan.clients[0].n_train = n;
    plan.test_count = 0;
    plan.shadow_count = 0;
    let fed = generate_federation(7, &plan).expect("desk plan is valid");
    let refs: Vec<_> = fed.clients[0].train.iter().collect();
    to_batch(&refs).expect("uniform slice sizes")
}

/// `clients` updates of `len` values in `[-0.01, 0.01)`.
pub fn random_updates(clients: usize, len: usize, seed: u64) -> Vec<RoundUpdate> {
    (0..clients)
        .map(|k| {
            let mut rng = substream(seed, &[k as u64]);
            RoundUpdate {
                client_id: k,
                delta: (0..len).map(|_| rng.random_range(-0.01..0.01)).collect(),
                n_samples: 100,
            }
        })
        .collect()
}
