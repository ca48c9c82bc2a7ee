//! Image-token projections: feature and depth streams each linearly mapped
//! to the latent width, the same non-trainable sine-cosine grid embedding
//! added to both, then concatenated.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{DenseImageTokens, D_DEPTH, D_FEAT, GRID_H, GRID_W};
use crate::error::Result;
use crate::nn::{sincos_grid, xavier, Graph, ParamStore, Real, Var};

pub fn init_image_projection<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut ChaCha8Rng) {
    store.insert("ctl.image.wfeat", xavier(rng, D_FEAT, d));
    store.insert("ctl.image.wdepth", xavier(rng, D_DEPTH, d));
}

/// F_I = [E_feat . W_feat + P, E_depth . W_depth + P], 2 * M_I rows.
pub fn project_image<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: &DenseImageTokens,
) -> Result<Var> {
    tokens.validate()?;
    let d = store.get("ctl.image.wfeat")?.shape()[1];
    let p = sincos_grid::<T>(GRID_H, GRID_W, d)?;
    let p_c = g.constant(p.into_dyn())?;

    let feat = g.constant(tokens.feat.mapv(|x| T::from_f(x as f64)).into_dyn())?;
    // Depth is normalized to [0, 1] before projection so its scale matches
    // the unit-ish feature stream.
    let depth_norm = tokens
        .depth
        .mapv(|x| T::from_f(x as f64 / crate::corpus::DEPTH_MAX));
    let depth = g.constant(depth_norm.into_dyn())?;

    let wf = store.param(g, "ctl.image.wfeat")?;
    let wd = store.param(g, "ctl.image.wdepth")?;
    let f_feat = g.matmul(feat, wf)?;
    let f_feat = g.add(f_feat, p_c)?;
    let f_depth = g.matmul(depth, wd)?;
    let p_c2 = {
        let p = sincos_grid::<T>(GRID_H, GRID_W, d)?;
        g.constant(p.into_dyn())?
    };
    let f_depth = g.add(f_depth, p_c2)?;
    g.concat_rows(&[f_feat, f_depth])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::M_I;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tokens(rng: &mut ChaCha8Rng) -> DenseImageTokens {
        DenseImageTokens {
            feat: Array2::from_shape_fn((M_I, D_FEAT), |_| rng.gen_range(-1.0f32..1.0)),
            depth: Array2::from_shape_fn((M_I, D_DEPTH), |_| rng.gen_range(0.0f32..64.0)),
        }
    }

    #[test]
    fn output_is_both_streams_concatenated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        init_image_projection(&mut store, 32, &mut rng);
        let t = tokens(&mut rng);
        let mut g = Graph::<f64>::new();
        let f = project_image(&mut g, &store, &t).unwrap();
        assert_eq!(g.shape(f), &[2 * M_I, 32]);
    }

    #[test]
    fn zero_inputs_give_pure_positional_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        init_image_projection(&mut store, 32, &mut rng);
        let t = DenseImageTokens {
            feat: Array2::zeros((M_I, D_FEAT)),
            depth: Array2::zeros((M_I, D_DEPTH)),
        };
        let mut g = Graph::<f64>::new();
        let f = project_image(&mut g, &store, &t).unwrap();
        let p = sincos_grid::<f64>(GRID_H, GRID_W, 32).unwrap();
        let v = g.value(f);
        for i in 0..M_I {
            for j in 0..32 {
                assert_eq!(v[[i, j]], p[[i, j]]); // feat stream
                assert_eq!(v[[M_I + i, j]], p[[i, j]]); // depth stream
            }
        }
    }

    #[test]
    fn same_positional_embedding_in_both_streams() {
        // F_feat[i] - E_feat[i] W_feat equals F_depth[i] - E_depth[i] W_depth
        // for every i, because P is shared.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        init_image_projection(&mut store, 16, &mut rng);
        let t = tokens(&mut rng);
        let mut g = Graph::<f64>::new();
        let f = project_image(&mut g, &store, &t).unwrap();

        let feat = g
            .constant(t.feat.mapv(|x| x as f64).into_dyn())
            .unwrap();
        let depth = g
            .constant(t.depth.mapv(|x| x as f64 / crate::corpus::DEPTH_MAX).into_dyn())
            .unwrap();
        let wf = store.param(&mut g, "ctl.image.wfeat").unwrap();
        let wd = store.param(&mut g, "ctl.image.wdepth").unwrap();
        let ef = g.matmul(feat, wf).unwrap();
        let ed = g.matmul(depth, wd).unwrap();
        let fv = g.value(f).clone();
        let efv = g.value(ef);
        let edv = g.value(ed);
        for i in 0..M_I {
            for j in 0..16 {
                let p_from_feat = fv[[i, j]] - efv[[i, j]];
                let p_from_depth = fv[[M_I + i, j]] - edv[[i, j]];
                assert!((p_from_feat - p_from_depth).abs() < 1e-12);
            }
        }
    }
}
