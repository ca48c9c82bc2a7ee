//! Multi-head attention (fused forward/backward) and sine-cosine embeddings.

use ndarray::{Array1, Array2, ArrayD, Ix2};

use super::graph::{Graph, Var};
use super::scalar::Real;
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Scaled dot-product multi-head attention core (no projections).
    ///
    /// `q`: Nq x d, `k`/`v`: Nk x d, d divisible by `heads`. `mask[i] = true`
    /// removes key i (zero attention weight). The whole op is fused: one node
    /// carries the analytic backward for q, k and v.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (nq, d) = self.dims2(q, "attention")?;
        let (nk, dk) = self.dims2(k, "attention")?;
        let (nv, dv) = self.dims2(v, "attention")?;
        if d != dk || d != dv {
            return Err(Error::Contract(format!(
                "attention: dim mismatch q:{d} k:{dk} v:{dv}"
            )));
        }
        if nk != nv {
            return Err(Error::Contract(format!(
                "attention: key count {nk} != value count {nv}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: d={d} not divisible by heads={heads}"
            )));
        }
        if let Some(m) = mask {
            if m.len() != nk {
                return Err(Error::Contract("attention: mask length".into()));
            }
            if m.iter().all(|&x| x) {
                return Err(Error::Contract("attention: all keys masked".into()));
            }
        }
        let dh = d / heads;
        let scale = T::from_f(1.0 / (dh as f64).sqrt());

        let qa = self.value(q).clone();
        let ka = self.value(k).clone();
        let va = self.value(v).clone();
        let q2 = qa.view().into_dimensionality::<Ix2>().unwrap();
        let k2 = ka.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = va.view().into_dimensionality::<Ix2>().unwrap();

        let mut out = Array2::<T>::zeros((nq, d));
        let mut probs: Vec<Array2<T>> = Vec::with_capacity(heads);
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let qh = q2.slice(ndarray::s![.., c.clone()]);
            let kh = k2.slice(ndarray::s![.., c.clone()]);
            let vh = v2.slice(ndarray::s![.., c.clone()]);
            let mut s = qh.dot(&kh.t());
            s.mapv_inplace(|x| x * scale);
            if let Some(m) = mask {
                for (j, &masked) in m.iter().enumerate() {
                    if masked {
                        s.column_mut(j).fill(T::neg_infinity());
                    }
                }
            }
            for mut row in s.rows_mut() {
                let max = row.fold(T::neg_infinity(), |a, &x| if x > a { x } else { a });
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(ndarray::s![.., c]).assign(&s.dot(&vh));
            probs.push(s);
        }

        let qa2 = qa.clone();
        let ka2 = ka.clone();
        let va2 = va.clone();
        self.push_node(
            out.into_dyn(),
            Box::new(move |g: &ArrayD<T>, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let q2 = qa2.view().into_dimensionality::<Ix2>().unwrap();
                let k2 = ka2.view().into_dimensionality::<Ix2>().unwrap();
                let v2 = va2.view().into_dimensionality::<Ix2>().unwrap();
                let mut dq = Array2::<T>::zeros((nq, d));
                let mut dk = Array2::<T>::zeros((nk, d));
                let mut dv = Array2::<T>::zeros((nk, d));
                for (h, p) in probs.iter().enumerate() {
                    let c = h * dh..(h + 1) * dh;
                    let gh = g2.slice(ndarray::s![.., c.clone()]);
                    let qh = q2.slice(ndarray::s![.., c.clone()]);
                    let kh = k2.slice(ndarray::s![.., c.clone()]);
                    let vh = v2.slice(ndarray::s![.., c.clone()]);
                    // values
                    dv.slice_mut(ndarray::s![.., c.clone()])
                        .assign(&p.t().dot(&gh));
                    // scores
                    let dp = gh.dot(&vh.t());
                    let mut ds = &dp * p;
                    for (mut dsrow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = dsrow.sum();
                        ndarray::Zip::from(&mut dsrow).and(&prow).for_each(|x, &pi| {
                            *x -= pi * dot;
                        });
                    }
                    ds.mapv_inplace(|x| x * scale);
                    dq.slice_mut(ndarray::s![.., c.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(ndarray::s![.., c]).assign(&ds.t().dot(&qh));
                }
                grads.accum(q, dq.into_dyn());
                grads.accum(k, dk.into_dyn());
                grads.accum(v, dv.into_dyn());
            }),
            "attention",
        )
    }
}

/// Projection weights of one attention module. The output projection is
/// optional so the pre-projection behavior stays testable.
pub struct MhaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Option<Var>,
}

/// Full multi-head attention: project, attend, project back.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q_in: Var,
    kv_in: Var,
    p: &MhaParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let q = g.matmul(q_in, p.wq)?;
    let k = g.matmul(kv_in, p.wk)?;
    let v = g.matmul(kv_in, p.wv)?;
    let a = g.attention(q, k, v, heads, mask)?;
    match p.wo {
        Some(wo) => g.matmul(a, wo),
        None => Ok(a),
    }
}

/// Plain-array attention probe used by tests: returns the output and the
/// per-head attention weight matrices.
pub fn attention_probe<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    mask: Option<&[bool]>,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = T::from_f(1.0 / (dh as f64).sqrt());
    let mut out = Array2::<T>::zeros((q.nrows(), d));
    let mut weights = Vec::new();
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., c.clone()]);
        let kh = k.slice(ndarray::s![.., c.clone()]);
        let vh = v.slice(ndarray::s![.., c.clone()]);
        let mut s = qh.dot(&kh.t());
        s.mapv_inplace(|x| x * scale);
        if let Some(m) = mask {
            for (j, &masked) in m.iter().enumerate() {
                if masked {
                    s.column_mut(j).fill(T::neg_infinity());
                }
            }
        }
        for mut row in s.rows_mut() {
            let max = row.fold(T::neg_infinity(), |a, &x| if x > a { x } else { a });
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        out.slice_mut(ndarray::s![.., c]).assign(&s.dot(&vh));
        weights.push(s);
    }
    (out, weights)
}

/// Sine-cosine embedding rows for arbitrary (possibly fractional) positions.
///
/// Even dims carry sin, odd dims carry cos, over geometric frequencies with
/// base 10_000. `d` must be even.
pub fn sincos_rows<T: Real>(positions: &[f64], d: usize) -> Result<Array2<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Contract(format!(
            "sincos embedding dim must be even, got {d}"
        )));
    }
    let half = d / 2;
    let mut out = Array2::<T>::zeros((positions.len(), d));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = 1.0 / 10_000f64.powf(i as f64 / half as f64);
            let angle = p * freq;
            out[[r, 2 * i]] = T::from_f(angle.sin());
            out[[r, 2 * i + 1]] = T::from_f(angle.cos());
        }
    }
    Ok(out)
}

/// Standard positional embedding for token indices 0..M.
pub fn sincos_positional_embedding<T: Real>(m: usize, d: usize) -> Result<Array2<T>> {
    let pos: Vec<f64> = (0..m).map(|i| i as f64).collect();
    sincos_rows(&pos, d)
}

/// 2D grid variant: row and column embeddings of d/2 each, concatenated.
/// Token order is row-major.
pub fn sincos_grid<T: Real>(h: usize, w: usize, d: usize) -> Result<Array2<T>> {
    if d % 2 != 0 || (d / 2) % 2 != 0 {
        return Err(Error::Contract(format!(
            "2-d sincos embedding needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let rows = sincos_positional_embedding::<T>(h, half)?;
    let cols = sincos_positional_embedding::<T>(w, half)?;
    let mut out = Array2::<T>::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            let t = r * w + c;
            out.slice_mut(ndarray::s![t, ..half]).assign(&rows.row(r));
            out.slice_mut(ndarray::s![t, half..]).assign(&cols.row(c));
        }
    }
    Ok(out)
}

/// Single embedding row as a 1-d array (used for timestep embeddings).
pub fn sincos_vector<T: Real>(position: f64, d: usize) -> Result<Array1<T>> {
    let rows = sincos_rows::<T>(&[position], d)?;
    Ok(rows.row(0).to_owned())
}
