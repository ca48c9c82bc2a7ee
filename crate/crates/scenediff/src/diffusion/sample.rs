//! Ancestral DDPM sampling with classifier-free guidance, plus masked
//! denoising for completion and outpainting.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::{denoiser_forward, forward_noise, DenoiserConfig};
use super::schedule::NoiseSchedule;
use crate::ae::{decode_latents, AeConfig, LatentScaler, LatentSet};
use crate::control::{dense_tokens_array, ConditionSpec};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};
use crate::scene::{LayoutKind, SceneGraph};

/// Everything needed to run the generative model at inference.
pub struct ModelBundle<T: Real> {
    /// Frozen stage-1 weights, stage-2 weights, control weights, and the
    /// latent scaler, all addressed by prefix.
    pub store: ParamStore<T>,
    pub ae_cfg: AeConfig,
    pub dn_cfg: DenoiserConfig,
    pub sched: NoiseSchedule,
    pub vocab: Vocab,
    pub scaler: LatentScaler<T>,
}

/// Observed-token mask for masked denoising; true marks an observed token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub agents: Vec<bool>,
    pub lanes: Vec<bool>,
}

impl TokenMask {
    pub fn none(n_o: usize, n_l: usize) -> TokenMask {
        TokenMask {
            agents: vec![false; n_o],
            lanes: vec![false; n_l],
        }
    }

    pub fn all(n_o: usize, n_l: usize) -> TokenMask {
        TokenMask {
            agents: vec![true; n_o],
            lanes: vec![true; n_l],
        }
    }

    pub fn any_observed(&self) -> bool {
        self.agents.iter().chain(self.lanes.iter()).any(|&b| b)
    }
}

/// Guided noise prediction:
/// eps_cfg = eps(empty) + w (eps(cond) - eps(empty)).
///
/// The empty branch keeps the default tokens and replaces only the dense
/// stream (by the learned null token inside each cross-global site).
pub fn cfg_predict<T: Real>(
    bundle: &ModelBundle<T>,
    z: &LatentSet<T>,
    tau: usize,
    dense: Option<&Array2<T>>,
    spec: &ConditionSpec,
    guidance: f64,
) -> Result<LatentSet<T>> {
    let uncond = denoiser_forward(
        &bundle.store,
        z,
        tau,
        None,
        spec.n_o,
        spec.n_l,
        spec.domain,
        &bundle.dn_cfg,
    )?;
    let dense = match dense {
        Some(f) => f,
        None => return Ok(uncond),
    };
    if guidance == 0.0 {
        return Ok(uncond);
    }
    let cond = denoiser_forward(
        &bundle.store,
        z,
        tau,
        Some(dense),
        spec.n_o,
        spec.n_l,
        spec.domain,
        &bundle.dn_cfg,
    )?;
    let w = T::from_f(guidance);
    Ok(LatentSet {
        z_o: &uncond.z_o + &(&cond.z_o - &uncond.z_o).mapv(|x| x * w),
        z_l: &uncond.z_l + &(&cond.z_l - &uncond.z_l).mapv(|x| x * w),
    })
}

fn sample_noise<T: Real>(rng: &mut ChaCha8Rng, n_o: usize, n_l: usize, d: usize) -> LatentSet<T> {
    let mut draw = |rows: usize| {
        Array2::from_shape_fn((rows, d), |_| {
            T::from_f(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        })
    };
    LatentSet {
        z_o: draw(n_o),
        z_l: draw(n_l),
    }
}

/// One reverse DDPM step from tau to tau - 1.
fn reverse_step<T: Real>(
    z: &LatentSet<T>,
    eps: &LatentSet<T>,
    tau: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    d: usize,
) -> LatentSet<T> {
    let beta = sched.beta[tau - 1];
    let alpha = sched.alpha[tau - 1];
    let ab = sched.abar(tau);
    let coef = T::from_f(beta / (1.0 - ab).sqrt());
    let inv = T::from_f(1.0 / alpha.sqrt());
    let mut mean = LatentSet {
        z_o: (&z.z_o - &eps.z_o.mapv(|x| x * coef)).mapv(|x| x * inv),
        z_l: (&z.z_l - &eps.z_l.mapv(|x| x * coef)).mapv(|x| x * inv),
    };
    if tau > 1 {
        let sigma = T::from_f(sched.posterior_variance(tau).sqrt());
        let noise = sample_noise::<T>(rng, z.z_o.nrows(), z.z_l.nrows(), d);
        mean.z_o += &noise.z_o.mapv(|x| x * sigma);
        mean.z_l += &noise.z_l.mapv(|x| x * sigma);
    }
    mean
}

/// Sample a scene of the requested cardinalities. Deterministic in `seed`.
pub fn sample<T: Real>(
    bundle: &ModelBundle<T>,
    spec: &ConditionSpec,
    layout: LayoutKind,
    guidance: f64,
    seed: u64,
) -> Result<SceneGraph> {
    let latents = sample_latents(bundle, spec, None, None, guidance, seed)?;
    decode_scaled(bundle, &latents, layout, spec)
}

/// Masked denoising: observed latent tokens (already standardized) are
/// clamped to their forward-noised values at every step and restored exactly
/// at the end; the rest are sampled conditioned on the spec.
pub fn masked_denoise<T: Real>(
    bundle: &ModelBundle<T>,
    observed: &LatentSet<T>,
    mask: &TokenMask,
    spec: &ConditionSpec,
    layout: LayoutKind,
    guidance: f64,
    seed: u64,
) -> Result<SceneGraph> {
    if mask.agents.len() != spec.n_o || mask.lanes.len() != spec.n_l {
        return Err(Error::Contract(format!(
            "mask shape ({}, {}) does not match counts ({}, {})",
            mask.agents.len(),
            mask.lanes.len(),
            spec.n_o,
            spec.n_l
        )));
    }
    if observed.n_agents() != spec.n_o || observed.n_lanes() != spec.n_l {
        return Err(Error::Contract(
            "observed latents must be padded to the requested counts".into(),
        ));
    }
    let latents = sample_latents(bundle, spec, Some(observed), Some(mask), guidance, seed)?;
    decode_scaled(bundle, &latents, layout, spec)
}

fn sample_latents<T: Real>(
    bundle: &ModelBundle<T>,
    spec: &ConditionSpec,
    observed: Option<&LatentSet<T>>,
    mask: Option<&TokenMask>,
    guidance: f64,
    seed: u64,
) -> Result<LatentSet<T>> {
    if spec.n_o == 0 || spec.n_l == 0 {
        return Err(Error::Contract("counts must be at least 1".into()));
    }
    if spec.n_o > bundle.dn_cfg.max_agents || spec.n_l > bundle.dn_cfg.max_lanes {
        return Err(Error::Capacity(format!(
            "requested counts ({}, {}) exceed capacity ({}, {})",
            spec.n_o, spec.n_l, bundle.dn_cfg.max_agents, bundle.dn_cfg.max_lanes
        )));
    }
    let dense: Option<Array2<T>> = match &spec.dense {
        Some(input) => Some(dense_tokens_array(&bundle.store, &bundle.vocab, input)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = bundle.dn_cfg.d;
    let mut z = sample_noise::<T>(&mut rng, spec.n_o, spec.n_l, d);

    for tau in (1..=bundle.sched.t).rev() {
        if let (Some(obs), Some(m)) = (observed, mask) {
            let noise = sample_noise::<T>(&mut rng, spec.n_o, spec.n_l, d);
            let noised = forward_noise(obs, tau, &noise, &bundle.sched)?;
            clamp_observed(&mut z, &noised, m);
        }
        let eps = cfg_predict(bundle, &z, tau, dense.as_ref(), spec, guidance)?;
        z = reverse_step(&z, &eps, tau, &bundle.sched, &mut rng, d);
    }
    if let (Some(obs), Some(m)) = (observed, mask) {
        clamp_observed(&mut z, obs, m);
    }
    Ok(z)
}

fn clamp_observed<T: Real>(z: &mut LatentSet<T>, source: &LatentSet<T>, mask: &TokenMask) {
    for (i, &obs) in mask.agents.iter().enumerate() {
        if obs {
            z.z_o.row_mut(i).assign(&source.z_o.row(i));
        }
    }
    for (i, &obs) in mask.lanes.iter().enumerate() {
        if obs {
            z.z_l.row_mut(i).assign(&source.z_l.row(i));
        }
    }
}

fn decode_scaled<T: Real>(
    bundle: &ModelBundle<T>,
    z: &LatentSet<T>,
    layout: LayoutKind,
    spec: &ConditionSpec,
) -> Result<SceneGraph> {
    let unscaled = bundle.scaler.unscale(z);
    decode_latents(&bundle.store, &unscaled, &bundle.ae_cfg, layout, spec.domain)
}

/// Expose the final latent trajectory for clamp-preservation checks.
pub fn sample_latents_only<T: Real>(
    bundle: &ModelBundle<T>,
    spec: &ConditionSpec,
    observed: Option<&LatentSet<T>>,
    mask: Option<&TokenMask>,
    guidance: f64,
    seed: u64,
) -> Result<LatentSet<T>> {
    sample_latents(bundle, spec, observed, mask, guidance, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ae::init_autoencoder;
    use crate::control::{init_defaults, init_f_count, init_image_projection, init_prompt_encoder};
    use crate::diffusion::denoiser::init_denoiser;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::scene::DomainTag;
    use ndarray::Array1;
    use rand::Rng;

    pub(crate) fn tiny_bundle(seed: u64) -> ModelBundle<f64> {
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
        // Give the zero heads random weights so the sampler has signal.
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

    fn plain_spec(n_o: usize, n_l: usize) -> ConditionSpec {
        ConditionSpec {
            dense: None,
            n_o,
            n_l,
            domain: DomainTag::Metro,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let bundle = tiny_bundle(3);
        let spec = plain_spec(3, 4);
        let a = sample(&bundle, &spec, LayoutKind::EgoCentered, 2.0, 77).unwrap();
        let b = sample(&bundle, &spec, LayoutKind::EgoCentered, 2.0, 77).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = sample(&bundle, &spec, LayoutKind::EgoCentered, 2.0, 78).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn cardinality_contract() {
        let bundle = tiny_bundle(4);
        let scene = sample(&bundle, &plain_spec(3, 4), LayoutKind::EgoCentered, 1.0, 5).unwrap();
        assert_eq!(scene.n_agents(), 3);
        assert_eq!(scene.n_lanes(), 4);
    }

    #[test]
    fn capacity_guard() {
        let bundle = tiny_bundle(5);
        assert!(matches!(
            sample(&bundle, &plain_spec(64, 4), LayoutKind::EgoCentered, 1.0, 5),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn cfg_identities_at_zero_and_one() {
        let bundle = tiny_bundle(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = LatentSet {
            z_o: Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0)),
            z_l: Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0)),
        };
        let prompt = crate::corpus::PromptTokens {
            ids: bundle.vocab.encode("two lane straight road and one vehicle in metro").unwrap(),
        };
        let spec = ConditionSpec {
            dense: Some(crate::control::DenseInput::Prompt(prompt.clone())),
            n_o: 2,
            n_l: 3,
            domain: DomainTag::Metro,
        };
        let dense =
            dense_tokens_array(&bundle.store, &bundle.vocab, spec.dense.as_ref().unwrap()).unwrap();

        let uncond = denoiser_forward(&bundle.store, &z, 7, None, 2, 3, spec.domain, &bundle.dn_cfg).unwrap();
        let cond =
            denoiser_forward(&bundle.store, &z, 7, Some(&dense), 2, 3, spec.domain, &bundle.dn_cfg)
                .unwrap();

        let w0 = cfg_predict(&bundle, &z, 7, Some(&dense), &spec, 0.0).unwrap();
        for (a, b) in w0.z_o.iter().zip(uncond.z_o.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let w1 = cfg_predict(&bundle, &z, 7, Some(&dense), &spec, 1.0).unwrap();
        for (a, b) in w1.z_o.iter().zip(cond.z_o.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // w = 2 is the linear extrapolation, verified against two forwards.
        let w2 = cfg_predict(&bundle, &z, 7, Some(&dense), &spec, 2.0).unwrap();
        for ((a, u), c) in w2.z_l.iter().zip(uncond.z_l.iter()).zip(cond.z_l.iter()) {
            assert!((a - (u + 2.0 * (c - u))).abs() < 1e-9);
        }
    }

    #[test]
    fn full_mask_returns_decode_of_observed_exactly() {
        let bundle = tiny_bundle(7);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let observed = LatentSet {
            z_o: Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0)),
            z_l: Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0)),
        };
        let spec = plain_spec(2, 3);
        let mask = TokenMask::all(2, 3);
        let out = sample_latents_only(&bundle, &spec, Some(&observed), Some(&mask), 1.0, 3).unwrap();
        assert_eq!(out, observed);

        let scene =
            masked_denoise(&bundle, &observed, &mask, &spec, LayoutKind::EgoCentered, 1.0, 3)
                .unwrap();
        let direct = decode_latents(
            &bundle.store,
            &bundle.scaler.unscale(&observed),
            &bundle.ae_cfg,
            LayoutKind::EgoCentered,
            spec.domain,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&scene).unwrap(),
            serde_json::to_string(&direct).unwrap()
        );
    }

    #[test]
    fn empty_mask_equals_plain_sampling() {
        let bundle = tiny_bundle(8);
        let spec = plain_spec(2, 2);
        let mask = TokenMask::none(2, 2);
        let observed = LatentSet {
            z_o: Array2::zeros((2, 16)),
            z_l: Array2::zeros((2, 16)),
        };
        // The unconditioned path consumes the same rng stream only when no
        // clamp noise is drawn; with an all-false mask the clamp still draws
        // noise, so compare distributional reduction by checking the clamped
        // positions: none are clamped, so outputs differ from plain sampling
        // only through rng stream usage. Here we assert the path runs and
        // produces the right cardinalities.
        let scene =
            masked_denoise(&bundle, &observed, &mask, &spec, LayoutKind::EgoCentered, 1.0, 11)
                .unwrap();
        assert_eq!(scene.n_agents(), 2);
        assert_eq!(scene.n_lanes(), 2);
    }

    #[test]
    fn partial_mask_preserves_observed_tokens_exactly() {
        let bundle = tiny_bundle(9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let observed = LatentSet {
            z_o: Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0)),
            z_l: Array2::from_shape_fn((3, 16), |_| rng.gen_range(-1.0..1.0)),
        };
        let mask = TokenMask {
            agents: vec![true, false, true],
            lanes: vec![false, true, false],
        };
        let spec = plain_spec(3, 3);
        let out = sample_latents_only(&bundle, &spec, Some(&observed), Some(&mask), 1.0, 13).unwrap();
        for i in 0..3 {
            if mask.agents[i] {
                for j in 0..16 {
                    assert_eq!(out.z_o[[i, j]], observed.z_o[[i, j]]);
                }
            } else {
                assert!((0..16).any(|j| out.z_o[[i, j]] != observed.z_o[[i, j]]));
            }
        }
        for i in 0..3 {
            if mask.lanes[i] {
                for j in 0..16 {
                    assert_eq!(out.z_l[[i, j]], observed.z_l[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let bundle = tiny_bundle(10);
        let observed = LatentSet {
            z_o: Array2::zeros((2, 16)),
            z_l: Array2::zeros((2, 16)),
        };
        let mask = TokenMask::all(3, 2);
        assert!(masked_denoise(
            &bundle,
            &observed,
            &mask,
            &plain_spec(2, 2),
            LayoutKind::EgoCentered,
            1.0,
            3
        )
        .is_err());
    }
}
