//! Prompt encoder (small trainable transformer over the template vocabulary)
//! and the linear projection into the latent width.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{PromptTokens, Vocab, MAX_PROMPT_LEN};
use crate::error::Result;
use crate::nn::{
    multi_head_attention, sincos_positional_embedding, xavier, zeros, Graph, MhaParams,
    ParamStore, Real, Var,
};

/// Prompt embedding width d_P.
pub const D_PROMPT: usize = 32;
const ENC_BLOCKS: usize = 2;
const ENC_HEADS: usize = 2;

pub fn init_prompt_encoder<T: Real>(
    store: &mut ParamStore<T>,
    vocab_size: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert("ctl.prompt.embed", crate::nn::normal(rng, &[vocab_size, D_PROMPT], 0.5));
    for blk in 0..ENC_BLOCKS {
        let p = format!("ctl.prompt.blk{blk}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{name}"), xavier(rng, D_PROMPT, D_PROMPT));
        }
        store.insert(
            &format!("{p}.ln1.g"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[D_PROMPT]), T::one()),
        );
        store.insert(&format!("{p}.ln1.b"), zeros(&[D_PROMPT]));
        store.insert(
            &format!("{p}.ln2.g"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[D_PROMPT]), T::one()),
        );
        store.insert(&format!("{p}.ln2.b"), zeros(&[D_PROMPT]));
        store.insert(&format!("{p}.mlp.w1"), xavier(rng, D_PROMPT, 2 * D_PROMPT));
        store.insert(&format!("{p}.mlp.b1"), zeros(&[2 * D_PROMPT]));
        store.insert(&format!("{p}.mlp.w2"), xavier(rng, 2 * D_PROMPT, D_PROMPT));
        store.insert(&format!("{p}.mlp.b2"), zeros(&[D_PROMPT]));
    }
    // Bias-free projection W_P: d_P -> d.
    store.insert("ctl.prompt.wp", xavier(rng, D_PROMPT, d));
}

/// Token embeddings through the 2-block encoder. Word order matters (count
/// words bind to their nouns), so sine-cosine positions are added to the
/// embeddings.
pub fn encode_prompt<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    vocab: &Vocab,
    tokens: &PromptTokens,
) -> Result<Var> {
    tokens.validate(vocab.len())?;
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    let table = store.param(g, "ctl.prompt.embed")?;
    let emb = g.embedding(table, &ids)?;
    let pos = sincos_positional_embedding::<T>(MAX_PROMPT_LEN, D_PROMPT)?;
    let pos_slice = pos.slice(ndarray::s![0..ids.len(), ..]).to_owned();
    let pos_c = g.constant(pos_slice.into_dyn())?;
    let mut x = g.add(emb, pos_c)?;

    for blk in 0..ENC_BLOCKS {
        let p = format!("ctl.prompt.blk{blk}");
        let ln1g = store.param(g, &format!("{p}.ln1.g"))?;
        let ln1b = store.param(g, &format!("{p}.ln1.b"))?;
        let h = g.layer_norm(x, ln1g, ln1b)?;
        let mha = MhaParams {
            wq: store.param(g, &format!("{p}.attn.wq"))?,
            wk: store.param(g, &format!("{p}.attn.wk"))?,
            wv: store.param(g, &format!("{p}.attn.wv"))?,
            wo: Some(store.param(g, &format!("{p}.attn.wo"))?),
        };
        let attn = multi_head_attention(g, h, h, &mha, ENC_HEADS, None)?;
        x = g.add(x, attn)?;
        let ln2g = store.param(g, &format!("{p}.ln2.g"))?;
        let ln2b = store.param(g, &format!("{p}.ln2.b"))?;
        let h = g.layer_norm(x, ln2g, ln2b)?;
        let w1 = store.param(g, &format!("{p}.mlp.w1"))?;
        let b1 = store.param(g, &format!("{p}.mlp.b1"))?;
        let w2 = store.param(g, &format!("{p}.mlp.w2"))?;
        let b2 = store.param(g, &format!("{p}.mlp.b2"))?;
        let m = g.linear(h, w1, b1)?;
        let m = g.silu(m)?;
        let m = g.linear(m, w2, b2)?;
        x = g.add(x, m)?;
    }
    Ok(x)
}

/// F_P = E_P . W_P (single bias-free linear map).
pub fn project_prompt<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, e_p: Var) -> Result<Var> {
    let wp = store.param(g, "ctl.prompt.wp")?;
    g.matmul(e_p, wp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParamStore<f64>, Vocab) {
        let vocab = Vocab::new();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_prompt_encoder(&mut store, vocab.len(), d, &mut rng);
        (store, vocab)
    }

    #[test]
    fn identical_sequences_encode_identically() {
        let (store, vocab) = setup(16);
        let tokens = PromptTokens {
            ids: vocab.encode("two lane straight road and three vehicles in metro").unwrap(),
        };
        let mut g = Graph::<f64>::new();
        let a = encode_prompt(&mut g, &store, &vocab, &tokens).unwrap();
        let b = encode_prompt(&mut g, &store, &vocab, &tokens).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn swapped_count_words_change_their_positions() {
        let (store, vocab) = setup(16);
        let a = PromptTokens {
            ids: vocab.encode("two lane straight road and five vehicles in metro").unwrap(),
        };
        let b = PromptTokens {
            ids: vocab.encode("five lane straight road and two vehicles in metro").unwrap(),
        };
        let mut g = Graph::<f64>::new();
        let table = store.param(&mut g, "ctl.prompt.embed").unwrap();
        let ea = g
            .embedding(table, &a.ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
            .unwrap();
        let eb = g
            .embedding(table, &b.ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
            .unwrap();
        let va = g.value(ea);
        let vb = g.value(eb);
        // Embedding rows differ exactly at the two swapped positions.
        let mut diff_rows = vec![];
        for i in 0..a.ids.len() {
            let differs = (0..D_PROMPT).any(|j| va[[i, j]] != vb[[i, j]]);
            if differs {
                diff_rows.push(i);
            }
        }
        assert_eq!(diff_rows, vec![0, 5]);
    }

    #[test]
    fn empty_prompt_rejected() {
        let (store, vocab) = setup(16);
        let mut g = Graph::<f64>::new();
        let empty = PromptTokens { ids: vec![] };
        assert!(encode_prompt(&mut g, &store, &vocab, &empty).is_err());
        let oov = PromptTokens { ids: vec![9999] };
        assert!(encode_prompt(&mut g, &store, &vocab, &oov).is_err());
    }

    #[test]
    fn projection_is_linear_and_bias_free() {
        let (store, _) = setup(24);
        let mut g = Graph::<f64>::new();
        let zero = g.constant(ndarray::ArrayD::zeros(IxDyn(&[3, D_PROMPT]))).unwrap();
        let fz = project_prompt(&mut g, &store, zero).unwrap();
        assert!(g.value(fz).iter().all(|&x| x == 0.0));
        assert_eq!(g.shape(fz), &[3, 24]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = crate::nn::normal::<f64>(&mut rng, &[3, D_PROMPT], 1.0);
        let b = crate::nn::normal::<f64>(&mut rng, &[3, D_PROMPT], 1.0);
        let va = g.constant(a.clone()).unwrap();
        let vb = g.constant(b.clone()).unwrap();
        let vsum = g.constant(&a + &b).unwrap();
        let fa = project_prompt(&mut g, &store, va).unwrap();
        let fb = project_prompt(&mut g, &store, vb).unwrap();
        let fsum = project_prompt(&mut g, &store, vsum).unwrap();
        let direct = g.add(fa, fb).unwrap();
        for (x, y) in g.value(fsum).iter().zip(g.value(direct).iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
