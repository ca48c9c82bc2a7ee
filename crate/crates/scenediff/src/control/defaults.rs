//! Default control tokens: sinusoidal count and timestep codes plus a learned
//! domain embedding, summed into one conditioning vector that drives every
//! AdaLN-Zero site.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ConditionSpec, DenseInput};
use crate::error::{Error, Result};
use crate::nn::{normal, sincos_vector, Graph, ParamStore, Real, Var};

/// Conditioning vector width d_c.
pub const D_COND: usize = 64;

// Disjoint sinusoidal position ranges keep the summed code injective over
// the (N_o, N_l, tau) grid.
const LANE_OFFSET: f64 = 100.0;
const TAU_OFFSET: f64 = 1000.0;

pub fn init_default_tokens<T: Real>(store: &mut ParamStore<T>, n_domains: usize, rng: &mut ChaCha8Rng) {
    store.insert("ctl.domain.embed", normal(rng, &[n_domains, D_COND], 0.2));
}

/// Plain-array default-token vector c(N_o, N_l, domain, tau).
pub fn build_default_tokens<T: Real>(
    store: &ParamStore<T>,
    n_o: usize,
    n_l: usize,
    domain: crate::scene::DomainTag,
    tau: usize,
    max_agents: usize,
    max_lanes: usize,
) -> Result<Array1<T>> {
    if n_o > max_agents || n_l > max_lanes {
        return Err(Error::Capacity(format!(
            "counts ({n_o}, {n_l}) exceed capacity ({max_agents}, {max_lanes})"
        )));
    }
    let table = store.get("ctl.domain.embed")?;
    if domain.index() >= table.shape()[0] {
        return Err(Error::Input(format!("domain index {} out of range", domain.index())));
    }
    let e_o = sincos_vector::<T>(n_o as f64, D_COND)?;
    let e_l = sincos_vector::<T>(n_l as f64 + LANE_OFFSET, D_COND)?;
    let e_t = sincos_vector::<T>(tau as f64 + TAU_OFFSET, D_COND)?;
    let mut out = &(&e_o + &e_l) + &e_t;
    for (o, j) in out.iter_mut().zip(0..D_COND) {
        *o = *o + table[[domain.index(), j]];
    }
    Ok(out)
}

/// Graph node (1 x d_c) for the default tokens; gradient flows into the
/// domain embedding.
pub fn default_tokens_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    n_o: usize,
    n_l: usize,
    domain: crate::scene::DomainTag,
    tau: usize,
) -> Result<Var> {
    let e_o = sincos_vector::<T>(n_o as f64, D_COND)?;
    let e_l = sincos_vector::<T>(n_l as f64 + LANE_OFFSET, D_COND)?;
    let e_t = sincos_vector::<T>(tau as f64 + TAU_OFFSET, D_COND)?;
    let sum = &(&e_o + &e_l) + &e_t;
    let mut row = ArrayD::zeros(IxDyn(&[1, D_COND]));
    for (j, &v) in sum.iter().enumerate() {
        row[[0, j]] = v;
    }
    let fixed = g.constant(row)?;
    let table = store.param(g, "ctl.domain.embed")?;
    let dom = g.embedding(table, &[domain.index()])?;
    g.add(fixed, dom)
}

/// Classifier-free-guidance dropout: with probability `p_cfg` the dense
/// stream is removed; the defaults always survive.
pub fn cfg_dropout(spec: &ConditionSpec, p_cfg: f64, rng: &mut ChaCha8Rng) -> Result<ConditionSpec> {
    if !(0.0..1.0).contains(&p_cfg) {
        return Err(Error::Config(format!("p_cfg {p_cfg} outside [0, 1)")));
    }
    let mut out = spec.clone();
    if out.dense.is_some() && rng.gen::<f64>() < p_cfg {
        out.dense = None;
    }
    Ok(out)
}

/// Remove the dense stream unconditionally (the CFG unconditional branch).
pub fn drop_dense(spec: &ConditionSpec) -> ConditionSpec {
    ConditionSpec {
        dense: None,
        ..spec.clone()
    }
}

pub use init_default_tokens as init_defaults;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PromptTokens;
    use crate::scene::DomainTag;
    use rand::SeedableRng;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_default_tokens(&mut s, 2, &mut rng);
        s
    }

    #[test]
    fn distinct_count_pairs_give_distinct_vectors() {
        let s = store();
        let mut seen = std::collections::BTreeSet::new();
        for n_o in 0..=32usize {
            for n_l in 0..=32usize {
                let v =
                    build_default_tokens(&s, n_o, n_l, DomainTag::Metro, 10, 32, 32).unwrap();
                let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
                assert!(seen.insert(key), "collision at ({n_o}, {n_l})");
            }
        }
    }

    #[test]
    fn tau_embedding_uses_shared_sincos() {
        let s = store();
        let a = build_default_tokens(&s, 3, 4, DomainTag::Metro, 7, 32, 32).unwrap();
        let b = build_default_tokens(&s, 3, 4, DomainTag::Metro, 9, 32, 32).unwrap();
        let et7 = sincos_vector::<f64>(7.0 + TAU_OFFSET, D_COND).unwrap();
        let et9 = sincos_vector::<f64>(9.0 + TAU_OFFSET, D_COND).unwrap();
        for j in 0..D_COND {
            assert!(((a[j] - b[j]) - (et7[j] - et9[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_and_domain_errors() {
        let s = store();
        assert!(matches!(
            build_default_tokens(&s, 40, 4, DomainTag::Metro, 0, 32, 32),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn cfg_dropout_rates() {
        let spec = ConditionSpec {
            dense: Some(DenseInput::Prompt(PromptTokens { ids: vec![1, 2] })),
            n_o: 2,
            n_l: 2,
            domain: DomainTag::Metro,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // p = 0 never drops.
        for _ in 0..100 {
            let out = cfg_dropout(&spec, 0.0, &mut rng).unwrap();
            assert!(out.dense.is_some());
        }
        // p = 1 is rejected by precondition.
        assert!(cfg_dropout(&spec, 1.0, &mut rng).is_err());
        // Empirical rate within 3 sigma of a binomial at p = 0.1.
        let p = 0.1;
        let n = 10_000;
        let mut drops = 0;
        for _ in 0..n {
            if cfg_dropout(&spec, p, &mut rng).unwrap().dense.is_none() {
                drops += 1;
            }
        }
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let rate = drops as f64 / n as f64;
        assert!(
            (rate - p).abs() < 3.0 * sigma,
            "rate {rate} vs p {p} (3 sigma {})",
            3.0 * sigma
        );
    }
}
