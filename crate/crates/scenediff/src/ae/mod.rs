//! Stage-1 scene autoencoder: scene elements to latent tokens and back.

mod model;
mod train;

pub use model::{
    agent_features, decode_graph, decode_latents, encode_graph, encode_scene, init_autoencoder,
    lane_features, AeConfig, DecodeHeads, A_FEAT, LANE_FEAT,
};
pub use train::{fit_scaler, train_autoencoder, AeTrainConfig, EpochStats, ReconstructionReport};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

/// Stacked per-agent and per-lane latent tokens with variable cardinalities.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet<T: Real> {
    /// N_o x d agent tokens.
    pub z_o: Array2<T>,
    /// N_l x d lane tokens.
    pub z_l: Array2<T>,
}

impl<T: Real> LatentSet<T> {
    pub fn n_agents(&self) -> usize {
        self.z_o.nrows()
    }

    pub fn n_lanes(&self) -> usize {
        self.z_l.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z_o.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_o.ncols() != self.z_l.ncols() {
            return Err(Error::Contract(
                "agent and lane latent dims must match".into(),
            ));
        }
        if !self.z_o.iter().chain(self.z_l.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "latents" });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> LatentSet<T> {
        LatentSet {
            z_o: self.z_o.mapv(&f),
            z_l: self.z_l.mapv(&f),
        }
    }
}

/// Per-dimension standardization of latents (separately for agent and lane
/// blocks), fit on the training corpus and applied before diffusion.
#[derive(Debug, Clone)]
pub struct LatentScaler<T: Real> {
    pub mu_o: Array1<T>,
    pub sd_o: Array1<T>,
    pub mu_l: Array1<T>,
    pub sd_l: Array1<T>,
}

impl<T: Real> LatentScaler<T> {
    /// Fit from a set of latent sets.
    pub fn fit(latents: &[LatentSet<T>]) -> Result<LatentScaler<T>> {
        let d = latents
            .first()
            .ok_or_else(|| Error::Contract("no latents to fit scaler".into()))?
            .dim();
        let stat = |select: &dyn Fn(&LatentSet<T>) -> &Array2<T>| {
            let mut mu = Array1::<T>::zeros(d);
            let mut count = 0usize;
            for ls in latents {
                let m = select(ls);
                for row in m.rows() {
                    mu += &row;
                    count += 1;
                }
            }
            let n = T::from_f(count.max(1) as f64);
            mu.mapv_inplace(|x| x / n);
            let mut var = Array1::<T>::zeros(d);
            for ls in latents {
                let m = select(ls);
                for row in m.rows() {
                    ndarray::Zip::from(&mut var).and(&row).and(&mu).for_each(
                        |v, &x, &mean| {
                            let dxy = x - mean;
                            *v += dxy * dxy;
                        },
                    );
                }
            }
            var.mapv_inplace(|x| (x / n).sqrt().max(T::from_f(1e-4)));
            (mu, var)
        };
        let (mu_o, sd_o) = stat(&|ls| &ls.z_o);
        let (mu_l, sd_l) = stat(&|ls| &ls.z_l);
        Ok(LatentScaler {
            mu_o,
            sd_o,
            mu_l,
            sd_l,
        })
    }

    pub fn scale(&self, ls: &LatentSet<T>) -> LatentSet<T> {
        LatentSet {
            z_o: standardize(&ls.z_o, &self.mu_o, &self.sd_o),
            z_l: standardize(&ls.z_l, &self.mu_l, &self.sd_l),
        }
    }

    pub fn unscale(&self, ls: &LatentSet<T>) -> LatentSet<T> {
        LatentSet {
            z_o: destandardize(&ls.z_o, &self.mu_o, &self.sd_o),
            z_l: destandardize(&ls.z_l, &self.mu_l, &self.sd_l),
        }
    }

    /// Persist into a store as frozen parameters (rides along in the stage-1
    /// checkpoint).
    pub fn save_into(&self, store: &mut ParamStore<T>) {
        for (name, arr) in [
            ("scale.mu_o", &self.mu_o),
            ("scale.sd_o", &self.sd_o),
            ("scale.mu_l", &self.mu_l),
            ("scale.sd_l", &self.sd_l),
        ] {
            store.insert(name, arr.clone().into_dyn());
            store.set_frozen(name, true);
        }
    }

    pub fn load_from(store: &ParamStore<T>) -> Result<LatentScaler<T>> {
        let get = |name: &str| -> Result<Array1<T>> {
            Ok(store
                .get(name)?
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Contract(format!("{name} must be 1-d")))?
                .to_owned())
        };
        Ok(LatentScaler {
            mu_o: get("scale.mu_o")?,
            sd_o: get("scale.sd_o")?,
            mu_l: get("scale.mu_l")?,
            sd_l: get("scale.sd_l")?,
        })
    }
}

fn standardize<T: Real>(m: &Array2<T>, mu: &Array1<T>, sd: &Array1<T>) -> Array2<T> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        ndarray::Zip::from(&mut row).and(mu).and(sd).for_each(|x, &m, &s| {
            *x = (*x - m) / s;
        });
    }
    out
}

fn destandardize<T: Real>(m: &Array2<T>, mu: &Array1<T>, sd: &Array1<T>) -> Array2<T> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        ndarray::Zip::from(&mut row).and(mu).and(sd).for_each(|x, &m, &s| {
            *x = *x * s + m;
        });
    }
    out
}
