//! Shared fixtures for unit tests: a tiny untrained model bundle.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ae::{init_autoencoder, AeConfig, LatentScaler};
use crate::control::{init_defaults, init_f_count, init_image_projection, init_prompt_encoder};
use crate::corpus::Vocab;
use crate::diffusion::{init_denoiser, make_schedule, DenoiserConfig, ModelBundle, ScheduleKind};
use crate::nn::ParamStore;

/// Minimal random-weight bundle (d = 16) for machinery tests. Heads are
/// reinitialized so the sampler emits non-zero noise predictions.
pub fn tiny_bundle(seed: u64) -> ModelBundle<f64> {
    let ae_cfg = AeConfig {
        d: 16,
        depth: 1,
        heads: 2,
        ..Default::default()
    };
    let dn_cfg = DenoiserConfig {
        n_blocks: 1,
        d: 16,
        heads: 2,
        l_tokens: 2,
        ..Default::default()
    };
    let vocab = Vocab::new();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_autoencoder(&mut store, &ae_cfg, &mut rng);
    init_denoiser(&mut store, &dn_cfg, &mut rng);
    init_defaults(&mut store, 2, &mut rng);
    init_prompt_encoder(&mut store, vocab.len(), 16, &mut rng);
    init_image_projection(&mut store, 16, &mut rng);
    init_f_count(&mut store, 16, &mut rng);
    store.insert("dm.out_o.w", crate::nn::normal(&mut rng, &[16, 16], 0.2));
    store.insert("dm.out_l.w", crate::nn::normal(&mut rng, &[16, 16], 0.2));
    let scaler = LatentScaler {
        mu_o: Array1::zeros(16),
        sd_o: Array1::from_elem(16, 1.0),
        mu_l: Array1::zeros(16),
        sd_l: Array1::from_elem(16, 1.0),
    };
    ModelBundle {
        store,
        ae_cfg,
        dn_cfg,
        sched: make_schedule(20, ScheduleKind::Linear).unwrap(),
        vocab,
        scaler,
    }
}
