//! 3-axis sinusoidal positional encoding and windowed multi-head
//! self-attention blocks.
//!
//! Tokens only attend to other tokens in the same axis-aligned cubic window;
//! windows are processed independently and written back to disjoint row sets,
//! so token order is preserved.

use crate::autodiff::{NodeId, Tape};
use crate::error::{SvxError, SvxResult};
use crate::matrix::{Matrix, Real};
use crate::voxel::{window_partition_coords, Coordinate, WindowGroups};
use rand::Rng;
use std::rc::Rc;

/// Sinusoidal encoding of 3D lattice positions: the channel axis splits into
/// three equal blocks of m = d_model/3, and within a block pair i encodes one
/// axis value a as (sin(a/10000^{2i/m}), cos(a/10000^{2i/m})).
pub fn positional_encoding<T: Real>(coords: &[Coordinate], d_model: usize) -> SvxResult<Matrix<T>> {
    if d_model == 0 || d_model % 6 != 0 {
        return Err(SvxError::BadConfig {
            detail: format!("d_model {d_model} not divisible by 6"),
        });
    }
    let m = d_model / 3;
    let mut out = Matrix::zeros(coords.len(), d_model);
    for (r, c) in coords.iter().enumerate() {
        for (axis, a) in [c.x, c.y, c.z].into_iter().enumerate() {
            let a = a as f64;
            for i in 0..m / 2 {
                let freq = 10000f64.powf(2.0 * i as f64 / m as f64);
                let angle = a / freq;
                out.set(r, axis * m + 2 * i, T::from_f64(angle.sin()));
                out.set(r, axis * m + 2 * i + 1, T::from_f64(angle.cos()));
            }
        }
    }
    Ok(out)
}

/// One pre-norm transformer block's parameters. Attention projections carry
/// no bias; the MLP does.
#[derive(Clone, Debug)]
pub struct AttnParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_w1: Matrix<T>,
    pub mlp_b1: Matrix<T>,
    pub mlp_w2: Matrix<T>,
    pub mlp_b2: Matrix<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

/// Same fan-in uniform rule as the convolutions: weights ±1/√fan_in, biases
/// zero, layer-norm gains one.
pub fn init_attn_params<T: Real, R: Rng>(rng: &mut R, d_model: usize) -> AttnParams<T> {
    let mut linear = |rows: usize, cols: usize| -> Matrix<T> {
        let bound = 1.0 / (rows as f64).sqrt();
        let data: Vec<T> =
            (0..rows * cols).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        Matrix::from_vec(rows, cols, data).expect("sized here")
    };
    AttnParams {
        wq: linear(d_model, d_model),
        wk: linear(d_model, d_model),
        wv: linear(d_model, d_model),
        wo: linear(d_model, d_model),
        mlp_w1: linear(d_model, 4 * d_model),
        mlp_b1: Matrix::zeros(1, 4 * d_model),
        mlp_w2: linear(4 * d_model, d_model),
        mlp_b2: Matrix::zeros(1, d_model),
        ln1_gain: Matrix::full(1, d_model, T::one()),
        ln1_bias: Matrix::zeros(1, d_model),
        ln2_gain: Matrix::full(1, d_model, T::one()),
        ln2_bias: Matrix::zeros(1, d_model),
    }
}

/// Tape-side handles mirroring AttnParams.
#[derive(Clone, Copy, Debug)]
pub struct AttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

impl AttnNodes {
    pub fn from_params<T: Real>(tape: &mut Tape<T>, p: &AttnParams<T>) -> AttnNodes {
        AttnNodes {
            wq: tape.leaf(p.wq.clone()),
            wk: tape.leaf(p.wk.clone()),
            wv: tape.leaf(p.wv.clone()),
            wo: tape.leaf(p.wo.clone()),
            mlp_w1: tape.leaf(p.mlp_w1.clone()),
            mlp_b1: tape.leaf(p.mlp_b1.clone()),
            mlp_w2: tape.leaf(p.mlp_w2.clone()),
            mlp_b2: tape.leaf(p.mlp_b2.clone()),
            ln1_gain: tape.leaf(p.ln1_gain.clone()),
            ln1_bias: tape.leaf(p.ln1_bias.clone()),
            ln2_gain: tape.leaf(p.ln2_gain.clone()),
            ln2_bias: tape.leaf(p.ln2_bias.clone()),
        }
    }
}

/// Emit h = x + MHSA(LN(x)), out = h + MLP(LN(h)) onto the tape, with
/// attention restricted to each window group's members.
pub fn attention_block_apply<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    groups: &WindowGroups,
    nodes: AttnNodes,
    heads: usize,
) -> SvxResult<NodeId> {
    let (n, d) = tape.shape(x);
    let dq = tape.shape(nodes.wq);
    if dq != (d, d) {
        return Err(SvxError::ShapeMismatch {
            op: "attention_block",
            expected: format!("{d}x{d} projections"),
            got: format!("{dq:?}"),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(SvxError::BadConfig {
            detail: format!("d_model {d} not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let ln1 = tape.layer_norm(x, nodes.ln1_gain, nodes.ln1_bias)?;
    let q_all = tape.matmul(ln1, nodes.wq)?;
    let k_all = tape.matmul(ln1, nodes.wk)?;
    let v_all = tape.matmul(ln1, nodes.wv)?;

    let mut merged: Option<NodeId> = None;
    for (_, members) in &groups.groups {
        let rows = Rc::new(members.clone());
        let qw = tape.gather_rows(q_all, Rc::clone(&rows))?;
        let kw = tape.gather_rows(k_all, Rc::clone(&rows))?;
        let vw = tape.gather_rows(v_all, Rc::clone(&rows))?;
        let mut head_out: Option<NodeId> = None;
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(qw, lo, hi)?;
            let kh = tape.slice_cols(kw, lo, hi)?;
            let vh = tape.slice_cols(vw, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let att = tape.softmax_rows(scaled);
            let oh = tape.matmul(att, vh)?;
            head_out = Some(match head_out {
                Some(prev) => tape.concat_cols(prev, oh)?,
                None => oh,
            });
        }
        let ow = head_out.expect("at least one head");
        let scattered = tape.scatter_add_rows(ow, rows, n)?;
        merged = Some(match merged {
            Some(prev) => tape.add(prev, scattered)?,
            None => scattered,
        });
    }
    // Window row sets are disjoint, so applying Wo after the merge equals
    // applying it per window.
    let attn = match merged {
        Some(m) => tape.matmul(m, nodes.wo)?,
        None => tape.leaf(Matrix::zeros(n, d)),
    };
    let h_res = tape.add(x, attn)?;

    let ln2 = tape.layer_norm(h_res, nodes.ln2_gain, nodes.ln2_bias)?;
    let m1 = tape.matmul(ln2, nodes.mlp_w1)?;
    let m1b = tape.row_add(m1, nodes.mlp_b1)?;
    let act = tape.gelu(m1b);
    let m2 = tape.matmul(act, nodes.mlp_w2)?;
    let m2b = tape.row_add(m2, nodes.mlp_b2)?;
    tape.add(h_res, m2b)
}

/// Standalone windowed attention block over a token matrix.
pub fn window_attention_block<T: Real>(
    tokens: &Matrix<T>,
    coords: &[Coordinate],
    params: &AttnParams<T>,
    window_extent: u32,
    heads: usize,
) -> SvxResult<Matrix<T>> {
    if tokens.rows() != coords.len() {
        return Err(SvxError::ShapeMismatch {
            op: "window_attention_block",
            expected: format!("{} coords", tokens.rows()),
            got: format!("{}", coords.len()),
        });
    }
    let groups = window_partition_coords(coords, window_extent)?;
    let mut tape = Tape::new();
    let x = tape.leaf(tokens.clone());
    let nodes = AttnNodes::from_params(&mut tape, params);
    let y = attention_block_apply(&mut tape, x, &groups, nodes, heads)?;
    Ok(tape.value(y).clone())
}
