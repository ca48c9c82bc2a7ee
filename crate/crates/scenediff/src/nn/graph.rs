//! Tape-based reverse-mode autodiff over dense arrays.
//!
//! A [`Graph`] owns the forward values; every op appends a node with a boxed
//! backward closure. Values are `Arc`-shared so parameters can enter many
//! concurrent graphs without copying. All ops validate output finiteness:
//! a NaN/Inf anywhere trips [`crate::error::Error::NonFinite`].

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

use super::scalar::Real;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut Grads<T>) + Send + Sync>;

/// Per-node gradient accumulators produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accum(&mut self, v: Var, g: ArrayD<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.slots[v.0].take()
    }
}

pub struct Graph<T: Real> {
    values: Vec<Arc<ArrayD<T>>>,
    backward: Vec<Option<BackFn<T>>>,
    /// Trainable parameter registrations: (name, leaf id).
    trainable: Vec<(String, Var)>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::with_capacity(256),
            backward: Vec::with_capacity(256),
            trainable: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable per-op finiteness checks (hot loops that are already guarded).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0].iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub(crate) fn register_trainable(&mut self, name: String, v: Var) {
        self.trainable.push((name, v));
    }

    /// Append a node with an explicit backward closure (used by fused ops in
    /// sibling modules).
    pub(crate) fn push_node(
        &mut self,
        value: ArrayD<T>,
        back: BackFn<T>,
        op: &'static str,
    ) -> Result<Var> {
        self.push(value, Some(back), op)
    }

    fn push(
        &mut self,
        value: ArrayD<T>,
        back: Option<BackFn<T>>,
        op: &'static str,
    ) -> Result<Var> {
        if self.check_finite && !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.values.push(Arc::new(value));
        self.backward.push(back);
        Ok(Var(self.values.len() - 1))
    }

    /// Leaf with gradient tracking disabled (inputs, frozen weights, targets).
    pub fn constant(&mut self, value: ArrayD<T>) -> Result<Var> {
        self.push(value, None, "constant")
    }

    /// Shared leaf (no copy); used by [`super::params::ParamStore`].
    pub(crate) fn shared_leaf(&mut self, value: Arc<ArrayD<T>>) -> Var {
        self.values.push(value);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        let arr = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data)
            .map_err(|e| Error::Contract(format!("constant_rows: {e}")))?;
        self.constant(arr)
    }

    pub fn scalar_const(&mut self, x: T) -> Result<Var> {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = &*self.values[a.0] + &*self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.clone());
            })),
            "add",
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = &*self.values[a.0] - &*self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, -g.clone());
            })),
            "sub",
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.values[a.0].clone();
        let vb = self.values[b.0].clone();
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g * &*vb);
                grads.accum(b, g * &*va);
            })),
            "mul",
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let kk = T::from_f(k);
        let out = self.values[a.0].mapv(|x| x * kk);
        self.push(
            out,
            Some(Box::new(move |g, grads| grads.accum(a, g.mapv(|x| x * kk)))),
            "scale",
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let kk = T::from_f(k);
        let out = self.values[a.0].mapv(|x| x + kk);
        self.push(
            out,
            Some(Box::new(move |g, grads| grads.accum(a, g.clone()))),
            "add_scalar",
        )
    }

    /// `mat + bias` broadcasting a length-d vector over the rows of an n x d
    /// matrix.
    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let m = self.values[mat.0].clone();
        let b = self.values[bias.0].clone();
        let (rows, cols) = self.dims2(mat, "add_bias")?;
        let bv = b
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Contract("add_bias: bias must be 1-d".into()))?;
        if bv.len() != cols {
            return Err(Error::Contract(format!(
                "add_bias: bias len {} != cols {}",
                bv.len(),
                cols
            )));
        }
        let mut out = m.as_ref().clone();
        {
            let mut o2 = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            for mut row in o2.rows_mut() {
                row += &bv;
            }
        }
        let _ = rows;
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(mat, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                grads.accum(bias, g2.sum_axis(Axis(0)).into_dyn());
            })),
            "add_bias",
        )
    }

    /// `mat * gain` broadcasting a length-d vector over the rows of an n x d
    /// matrix.
    pub fn scale_cols(&mut self, mat: Var, gain: Var) -> Result<Var> {
        let (_, cols) = self.dims2(mat, "scale_cols")?;
        let m = self.values[mat.0].clone();
        let v = self.values[gain.0].clone();
        let gv = v
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Contract("scale_cols: gain must be 1-d".into()))?;
        if gv.len() != cols {
            return Err(Error::Contract(format!(
                "scale_cols: gain len {} != cols {}",
                gv.len(),
                cols
            )));
        }
        let mut out = m.as_ref().clone();
        {
            let mut o2 = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            for mut row in o2.rows_mut() {
                row *= &gv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let m2 = m.view().into_dimensionality::<Ix2>().unwrap();
                let gv = v.view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = g2.to_owned();
                for mut row in dm.rows_mut() {
                    row *= &gv;
                }
                grads.accum(mat, dm.into_dyn());
                let mut dv = ndarray::Array1::<T>::zeros(gv.len());
                for (grow, mrow) in g2.rows().into_iter().zip(m2.rows()) {
                    ndarray::Zip::from(&mut dv).and(&grow).and(&mrow).for_each(
                        |d, &gi, &mi| *d += gi * mi,
                    );
                }
                grads.accum(gain, dv.into_dyn());
            })),
            "scale_cols",
        )
    }

    /// Dense layer: `x . w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Multiply a whole array by a learned scalar (shape [1]) node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.values[s.0].len() != 1 {
            return Err(Error::Contract("scale_by: scalar must have one element".into()));
        }
        let va = self.values[a.0].clone();
        let vs = self.values[s.0].clone();
        let k = vs[[0]];
        let out = va.mapv(|x| x * k);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g.mapv(|x| x * k));
                let ds = g
                    .iter()
                    .zip(va.iter())
                    .fold(T::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                grads.accum(s, ArrayD::from_elem(IxDyn(&[1]), ds));
            })),
            "scale_by",
        )
    }

    // ---- activations ----

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].mapv(|x| x.tanh());
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g * &saved.mapv(|t| T::one() - t * t));
            })),
            "tanh",
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].mapv(sigmoid_s);
        let saved = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g * &saved.mapv(|s| s * (T::one() - s)));
            })),
            "sigmoid",
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let va = self.values[a.0].clone();
        let out = va.mapv(|x| x * sigmoid_s(x));
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let d = va.mapv(|x| {
                    let s = sigmoid_s(x);
                    s * (T::one() + x * (T::one() - s))
                });
                grads.accum(a, g * &d);
            })),
            "silu",
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let va = self.values[a.0].clone();
        let out = va.mapv(softplus_s);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, g * &va.mapv(sigmoid_s));
            })),
            "softplus",
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.values[a.0].clone();
        let vb = self.values[b.0].clone();
        let a2 = va
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Contract("matmul: lhs must be 2-d".into()))?;
        let b2 = vb
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Contract("matmul: rhs must be 2-d".into()))?;
        if a2.ncols() != b2.nrows() {
            return Err(Error::Contract(format!(
                "matmul: {}x{} . {}x{}",
                a2.nrows(),
                a2.ncols(),
                b2.nrows(),
                b2.ncols()
            )));
        }
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                grads.accum(a, g2.dot(&b2.t()).into_dyn());
                grads.accum(b, a2.t().dot(&g2).into_dyn());
            })),
            "matmul",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Contract("transpose: need 2-d".into()))?
            .t()
            .to_owned()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                grads.accum(a, g2.t().to_owned().into_dyn());
            })),
            "transpose",
        )
    }

    // ---- shape ops ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty".into()));
        }
        let views: Vec<_> = parts
            .iter()
            .map(|v| self.values[v.0].view().into_dimensionality::<Ix2>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Contract("concat_rows: parts must be 2-d".into()))?;
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Contract(format!("concat_rows: {e}")))?
            .into_dyn();
        let row_counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut start = 0;
                for (part, rows) in parts.iter().zip(&row_counts) {
                    let slice = g2.slice(ndarray::s![start..start + rows, ..]);
                    grads.accum(*part, slice.to_owned().into_dyn());
                    start += rows;
                }
            })),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.dims2(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows: {start}+{len} > {rows}"
            )));
        }
        let shape = self.values[a.0].shape().to_vec();
        let out = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                {
                    let mut f2 = full.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    f2.slice_mut(ndarray::s![start..start + len, ..]).assign(&g2);
                }
                grads.accum(a, full);
            })),
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols: {start}+{len} > {cols}"
            )));
        }
        let shape = self.values[a.0].shape().to_vec();
        let out = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                {
                    let mut f2 = full.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    f2.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                }
                grads.accum(a, full);
            })),
            "slice_cols",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let total: usize = shape.iter().product();
        if total != self.values[a.0].len() {
            return Err(Error::Contract("reshape: element count mismatch".into()));
        }
        let old_shape = self.values[a.0].shape().to_vec();
        let out = self.values[a.0]
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::Contract(format!("reshape: {e}")))?;
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(
                    a,
                    g.clone().into_shape_with_order(IxDyn(&old_shape)).unwrap(),
                );
            })),
            "reshape",
        )
    }

    // ---- normalization / softmax ----

    /// Row-wise softmax over the last axis of a 2-d input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Contract("softmax_rows: need 2-d".into()))?;
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let saved = out.clone().into_dyn();
        self.push(
            saved.clone(),
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let p = saved.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = (&g2 * &p).to_owned();
                for (mut drow, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.sum();
                    ndarray::Zip::from(&mut drow).and(&prow).for_each(|d, &pi| {
                        *d -= pi * dot;
                    });
                }
                grads.accum(a, dx.into_dyn());
            })),
            "softmax_rows",
        )
    }

    /// Layer norm over the last axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = T::from_f(1e-5);
        let v = self.values[x.0]
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Contract("layer_norm: need 2-d".into()))?;
        let d = v.ncols();
        let gm = self.values[gamma.0].clone();
        let bt = self.values[beta.0].clone();
        if gm.len() != d || bt.len() != d {
            return Err(Error::Contract("layer_norm: gain/bias dim mismatch".into()));
        }
        let gview = gm.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bview = bt.view().into_dimensionality::<Ix1>().unwrap().to_owned();

        let nd = T::from_f(d as f64);
        let mut xhat = v.to_owned();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / nd;
            row.mapv_inplace(|a| a - mean);
            let var = row.fold(T::zero(), |acc, &a| acc + a * a) / nd;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|a| a * is);
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&gview)
                .and(&bview)
                .for_each(|o, &g, &b| *o = *o * g + b);
        }
        let xhat = xhat.into_dyn();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix2>().unwrap();
                // d gamma, d beta
                let mut dgamma = ndarray::Array1::<T>::zeros(d);
                let mut dbeta = ndarray::Array1::<T>::zeros(d);
                for (grow, xrow) in g2.rows().into_iter().zip(xh.rows()) {
                    ndarray::Zip::from(&mut dgamma)
                        .and(&grow)
                        .and(&xrow)
                        .for_each(|dg, &gi, &xi| *dg += gi * xi);
                    dbeta += &grow;
                }
                grads.accum(gamma, dgamma.into_dyn());
                grads.accum(beta, dbeta.into_dyn());
                // dx
                let mut dx = ndarray::Array2::<T>::zeros((g2.nrows(), d));
                for ((grow, xrow), (mut dxrow, &is)) in g2
                    .rows()
                    .into_iter()
                    .zip(xh.rows())
                    .zip(dx.rows_mut().into_iter().zip(&inv_std))
                {
                    // dxhat = g * gamma
                    let dxhat: Vec<T> = grow
                        .iter()
                        .zip(gview.iter())
                        .map(|(&gi, &gm)| gi * gm)
                        .collect();
                    let mean_dxhat =
                        dxhat.iter().fold(T::zero(), |a, &b| a + b) / nd;
                    let mean_dxhat_x = dxhat
                        .iter()
                        .zip(xrow.iter())
                        .fold(T::zero(), |a, (&dh, &xi)| a + dh * xi)
                        / nd;
                    for (k, dxk) in dxrow.iter_mut().enumerate() {
                        *dxk = is * (dxhat[k] - mean_dxhat - xrow[k] * mean_dxhat_x);
                    }
                }
                grads.accum(x, dx.into_dyn());
            })),
            "layer_norm",
        )
    }

    // ---- reductions / losses ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let shape = self.values[a.0].shape().to_vec();
        let s = self.values[a.0].sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, grads| {
                grads.accum(a, ArrayD::from_elem(IxDyn(&shape), g[[0]]));
            })),
            "sum_all",
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let shape = self.values[a.0].shape().to_vec();
        let n = T::from_f(self.values[a.0].len() as f64);
        let s = self.values[a.0].sum() / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, grads| {
                grads.accum(a, ArrayD::from_elem(IxDyn(&shape), g[[0]] / n));
            })),
            "mean_all",
        )
    }

    /// Mean squared error between two same-shape arrays (mean over entries).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let va = self.values[a.0].clone();
        let vb = self.values[b.0].clone();
        let n = T::from_f(va.len() as f64);
        let diff = &*va - &*vb;
        let loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |g, grads| {
                let scale = T::from_f(2.0) * g[[0]] / n;
                let d = (&*va - &*vb).mapv(|x| x * scale);
                grads.accum(a, d.clone());
                grads.accum(b, -d);
            })),
            "mse",
        )
    }

    /// Column-weighted smooth-L1 (Huber, delta = 1) against a constant target.
    ///
    /// `col_weights.len()` must equal the column count; the loss is
    /// sum_ij w_j * huber(pred_ij - target_ij) / rows.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, col_weights: &[f64]) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let (rows, cols) = self.dims2(pred, "smooth_l1")?;
        if col_weights.len() != cols {
            return Err(Error::Contract("smooth_l1: weight count".into()));
        }
        let w: Vec<T> = col_weights.iter().map(|&x| T::from_f(x)).collect();
        let vp = self.values[pred.0].clone();
        let vt = self.values[target.0].clone();
        let nr = T::from_f(rows as f64);
        let p2 = vp.view().into_dimensionality::<Ix2>().unwrap();
        let t2 = vt.view().into_dimensionality::<Ix2>().unwrap();
        let mut loss = T::zero();
        for (prow, trow) in p2.rows().into_iter().zip(t2.rows()) {
            for ((&p, &t), &wj) in prow.iter().zip(trow.iter()).zip(&w) {
                let d = p - t;
                let ad = d.abs();
                let h = if ad < T::one() {
                    T::from_f(0.5) * d * d
                } else {
                    ad - T::from_f(0.5)
                };
                loss = loss + wj * h;
            }
        }
        loss = loss / nr;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |g, grads| {
                let p2 = vp.view().into_dimensionality::<Ix2>().unwrap();
                let t2 = vt.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<T>::zeros((p2.nrows(), p2.ncols()));
                let scale = g[[0]] / nr;
                for ((prow, trow), mut drow) in
                    p2.rows().into_iter().zip(t2.rows()).zip(dx.rows_mut())
                {
                    for (k, dk) in drow.iter_mut().enumerate() {
                        let d = prow[k] - trow[k];
                        let clamped = if d > T::one() {
                            T::one()
                        } else if d < -T::one() {
                            -T::one()
                        } else {
                            d
                        };
                        *dk = w[k] * clamped * scale;
                    }
                }
                grads.accum(pred, dx.into_dyn());
            })),
            "smooth_l1",
        )
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Contract("cross_entropy: target count".into()));
        }
        if targets.iter().any(|&t| t >= cols) {
            return Err(Error::Contract("cross_entropy: target out of range".into()));
        }
        let v = self.values[logits.0].clone();
        let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
        let mut probs = v2.to_owned();
        let mut loss = T::zero();
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
            loss = loss - row[targets[i]].max(T::from_f(1e-30)).ln();
        }
        let nr = T::from_f(rows as f64);
        loss = loss / nr;
        let targets = targets.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |g, grads| {
                let scale = g[[0]] / nr;
                let mut dx = probs.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    row[targets[i]] -= T::one();
                    row.mapv_inplace(|x| x * scale);
                }
                grads.accum(logits, dx.into_dyn());
            })),
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits against a constant 0/1 target.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape(logits, target, "bce_with_logits")?;
        let vl = self.values[logits.0].clone();
        let vt = self.values[target.0].clone();
        let n = T::from_f(vl.len() as f64);
        let mut loss = T::zero();
        for (&x, &y) in vl.iter().zip(vt.iter()) {
            // softplus(x) - x*y, stable
            loss = loss + softplus_s(x) - x * y;
        }
        loss = loss / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |g, grads| {
                let scale = g[[0]] / n;
                let mut dx = vl.as_ref().clone();
                ndarray::Zip::from(&mut dx).and(&*vt).for_each(|x, &y| {
                    *x = (sigmoid_s(*x) - y) * scale;
                });
                grads.accum(logits, dx);
            })),
            "bce_with_logits",
        )
    }

    /// Per-entry weighted binary cross-entropy with logits. `weight` and
    /// `target` are constants; loss = sum w * (softplus(x) - x*y) / n.
    pub fn weighted_bce_with_logits(&mut self, logits: Var, target: Var, weight: Var) -> Result<Var> {
        self.same_shape(logits, target, "weighted_bce")?;
        self.same_shape(logits, weight, "weighted_bce")?;
        let vl = self.values[logits.0].clone();
        let vt = self.values[target.0].clone();
        let vw = self.values[weight.0].clone();
        let n = T::from_f(vl.len() as f64);
        let mut loss = T::zero();
        for ((&x, &y), &w) in vl.iter().zip(vt.iter()).zip(vw.iter()) {
            loss = loss + w * (softplus_s(x) - x * y);
        }
        loss = loss / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            Some(Box::new(move |g, grads| {
                let scale = g[[0]] / n;
                let mut dx = vl.as_ref().clone();
                ndarray::Zip::from(&mut dx).and(&*vt).and(&*vw).for_each(|x, &y, &w| {
                    *x = w * (sigmoid_s(*x) - y) * scale;
                });
                grads.accum(logits, dx);
            })),
            "weighted_bce",
        )
    }

    // ---- lookup ----

    /// Gather the rows of `table` named by `ids` (embedding lookup).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range (vocab {rows})"
            )));
        }
        let t2 = self.values[table.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let mut out = ndarray::Array2::<T>::zeros((ids.len(), cols));
        for (k, &i) in ids.iter().enumerate() {
            out.row_mut(k).assign(&t2.row(i));
        }
        let ids = ids.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = ndarray::Array2::<T>::zeros((rows, cols));
                for (k, &i) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(i);
                    r += &g2.row(k);
                }
                grads.accum(table, dt.into_dyn());
            })),
            "embedding",
        )
    }

    // ---- custom ----

    /// Custom op: arbitrary forward on one input, caller-provided backward.
    ///
    /// `bwd(input, grad_out)` must return the gradient w.r.t. the input.
    pub fn custom_unary(
        &mut self,
        a: Var,
        op: &'static str,
        fwd: impl Fn(&ArrayD<T>) -> ArrayD<T>,
        bwd: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T> + Send + Sync + 'static,
    ) -> Result<Var> {
        let va = self.values[a.0].clone();
        let out = fwd(&va);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.accum(a, bwd(&va, g));
            })),
            op,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract("backward: loss must be scalar".into()));
        }
        let mut grads = Grads::new(self.values.len());
        grads.slots[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));
        for id in (0..=loss.0).rev() {
            let g = match grads.slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(f) = &self.backward[id] {
                f(&g, &mut grads);
            }
            grads.slots[id] = Some(g);
        }
        Ok(grads)
    }

    // ---- helpers ----

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn dims2(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.values[a.0].shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op}: need 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }
}

pub(crate) fn sigmoid_s<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_s<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > T::zero() { x } else { T::zero() };
    m + (T::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn()).unwrap();
        let b = g.constant(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn()).unwrap();
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 5.0);
        assert_eq!(ga[[1, 1]], 8.0);
    }

    #[test]
    fn matmul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[1.0, 2.0]]).into_dyn()).unwrap();
        let b = g.constant(arr2(&[[3.0], [4.0]]).into_dyn()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c)[[0, 0]], 11.0);
        let c1 = g.reshape(c, &[1]).unwrap();
        let grads = g.backward(c1).unwrap();
        let ga = grads.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 3.0);
        assert_eq!(ga[[0, 1]], 4.0);
    }

    #[test]
    fn nan_trips_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[1e308]]).into_dyn()).unwrap();
        let b = g.constant(arr2(&[[1e308]]).into_dyn()).unwrap();
        // overflow to inf
        assert!(matches!(g.add(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let a = g
            .constant(arr2(&[[0.1, 2.0, -1.0], [5.0, 5.0, 5.0]]).into_dyn())
            .unwrap();
        let p = g.softmax_rows(a).unwrap();
        let v = g.value(p);
        for i in 0..2 {
            let s: f64 = (0..3).map(|j| v[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let mut g = Graph::<f64>::new();
        let t = g
            .constant(arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).into_dyn())
            .unwrap();
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e)[[0, 0]], 2.0);
        let s = g.sum_all(e).unwrap();
        let grads = g.backward(s).unwrap();
        let gt = grads.get(t).unwrap();
        assert_eq!(gt[[2, 0]], 2.0); // row 2 gathered twice
        assert_eq!(gt[[1, 0]], 0.0);
        // out-of-vocabulary id is an input error
        assert!(g.embedding(t, &[3]).is_err());
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr2(&[[1.0, 2.0]]).into_dyn()).unwrap();
        assert!(g.backward(a).is_err());
    }
}
