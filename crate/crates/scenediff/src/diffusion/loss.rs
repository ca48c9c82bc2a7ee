//! Collision penalty over decoded agent boxes.
//!
//! L_col = (1/N) sum_{i != j} tanh(overlap(i, j) / zeta), with overlap the
//! exact oriented-box IoU of the decoded footprints and N the number of
//! ordered agent pairs (1 when fewer than two agents). The penalty enters
//! the graph as a custom op over the decoder's raw agent-attribute matrix;
//! its backward is evaluated by central differences per attribute, which
//! keeps the forward value exact while letting gradient flow through the
//! frozen decoder into the noise prediction.

use ndarray::{ArrayD, Ix2, IxDyn};

use crate::ae::A_FEAT;
use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Var};
use crate::scene::{normalize_heading, oriented_box_iou, AgentBox, AgentClass};

/// Columns of the raw attribute matrix that influence the BEV footprint.
const FOOTPRINT_COLS: [usize; 6] = [0, 1, 3, 4, 5, 6];
const FD_STEP: f64 = 1e-3;

fn box_from_attr_row(row: &[f64]) -> AgentBox {
    AgentBox {
        x: row[0] * 32.0,
        y: row[1] * 32.0,
        z: 0.0,
        heading: normalize_heading(row[3].atan2(row[4])),
        length: row[5].clamp(-2.0, 2.2).exp(),
        width: row[6].clamp(-2.0, 2.2).exp(),
        height: 1.0,
        speed: 0.0,
        class: AgentClass::Vehicle,
    }
}

fn penalty_value(attrs: &[Vec<f64>], zeta: f64) -> f64 {
    let n = attrs.len();
    if n < 2 {
        return 0.0;
    }
    let boxes: Vec<AgentBox> = attrs.iter().map(|r| box_from_attr_row(r)).collect();
    let pairs = (n * (n - 1)) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            // Ordered pairs (i,j) and (j,i) contribute the same term.
            sum += 2.0 * (oriented_box_iou(&boxes[i], &boxes[j]) / zeta).tanh();
        }
    }
    sum / pairs
}

/// Sum over ordered pairs involving agent `i` only (the part of the penalty
/// that moves when agent i's attributes move).
fn penalty_terms_of(attrs: &[Vec<f64>], i: usize, zeta: f64) -> f64 {
    let n = attrs.len();
    let bi = box_from_attr_row(&attrs[i]);
    let mut sum = 0.0;
    for j in 0..n {
        if j != i {
            let bj = box_from_attr_row(&attrs[j]);
            sum += 2.0 * (oriented_box_iou(&bi, &bj) / zeta).tanh();
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Graph op: agent attribute matrix (N_o x A_FEAT, normalized decoder
/// output) -> scalar collision penalty.
pub fn collision_penalty_graph<T: Real>(
    g: &mut Graph<T>,
    agent_attrs: Var,
    zeta: f64,
) -> Result<Var> {
    if zeta <= 0.0 {
        return Err(Error::Config(format!("zeta must be positive, got {zeta}")));
    }
    let (_, cols) = g.dims2(agent_attrs, "collision_penalty")?;
    if cols != A_FEAT {
        return Err(Error::Contract(format!(
            "collision penalty expects {A_FEAT} attribute columns, got {cols}"
        )));
    }
    g.custom_unary(
        agent_attrs,
        "collision_penalty",
        move |value| {
            let rows = to_rows(value);
            ArrayD::from_elem(IxDyn(&[1]), T::from_f(penalty_value(&rows, zeta)))
        },
        move |value, gout| {
            let rows = to_rows(value);
            let n = rows.len();
            let mut grad = ArrayD::<T>::zeros(value.raw_dim());
            if n >= 2 {
                let upstream = gout[[0]].to_f();
                let mut g2 = grad.view_mut().into_dimensionality::<Ix2>().unwrap();
                for i in 0..n {
                    for &c in &FOOTPRINT_COLS {
                        let mut plus = rows.clone();
                        plus[i][c] += FD_STEP;
                        let mut minus = rows.clone();
                        minus[i][c] -= FD_STEP;
                        let d = (penalty_terms_of(&plus, i, zeta)
                            - penalty_terms_of(&minus, i, zeta))
                            / (2.0 * FD_STEP);
                        g2[[i, c]] = T::from_f(d * upstream);
                    }
                }
            }
            grad
        },
    )
}

fn to_rows<T: Real>(value: &ArrayD<T>) -> Vec<Vec<f64>> {
    let v = value.view().into_dimensionality::<Ix2>().unwrap();
    v.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.to_f()).collect())
        .collect()
}

/// Plain evaluation of the penalty for monitoring and tests.
pub fn collision_penalty_value<T: Real>(agent_attrs: &ndarray::Array2<T>, zeta: f64) -> f64 {
    let rows: Vec<Vec<f64>> = agent_attrs
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.to_f()).collect())
        .collect();
    penalty_value(&rows, zeta)
}
