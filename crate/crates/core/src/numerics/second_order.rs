//! Differentiable gradients: the reverse sweep is itself recorded on the tape.

use super::tape::{dependency_mask, NodeId, Op, Tape, LEAKY_SLOPE};
use super::{NumericsError, Result, Tensor};

/// Record `∂output/∂wrt` as a new node on `tape`.
///
/// The returned node can be used in further computation and differentiated
/// again with [`backward`](super::backward). Only ops with a registered
/// symbolic adjoint may lie on the path from `wrt` to `output`.
pub fn gradient_node(tape: &mut Tape, output: NodeId, wrt: NodeId) -> Result<NodeId> {
    tape.check(output)?;
    tape.check(wrt)?;
    if tape.value(output).len() != 1 {
        return Err(NumericsError::NonScalarOutput(tape.shape(output).to_vec()));
    }
    let needs = dependency_mask(tape, output.0, &[wrt]);
    if !needs[output.0] {
        return tape.leaf(Tensor::zeros(tape.shape(wrt)));
    }
    let mut adj: Vec<Option<NodeId>> = vec![None; output.0 + 1];
    adj[output.0] = Some(tape.leaf(Tensor::ones(tape.shape(output)))?);

    for i in (wrt.0..=output.0).rev() {
        if !needs[i] || i == wrt.0 {
            continue;
        }
        let Some(g) = adj[i] else { continue };
        for (input, contrib) in symbolic_vjp(tape, NodeId(i), g, &needs)? {
            adj[input.0] = Some(match adj[input.0] {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
    }
    match adj[wrt.0] {
        Some(g) => Ok(g),
        None => tape.leaf(Tensor::zeros(tape.shape(wrt))),
    }
}

fn symbolic_vjp(tape: &mut Tape, id: NodeId, g: NodeId, needs: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
    let op = tape.nodes[id.0].op.clone();
    let want = |n: NodeId| needs[n.0];
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if want(a) {
                let bt = tape.transpose(b)?;
                out.push((a, tape.matmul(g, bt)?));
            }
            if want(b) {
                let at = tape.transpose(a)?;
                out.push((b, tape.matmul(at, g)?));
            }
        }
        Op::Transpose(a) => out.push((a, tape.transpose(g)?)),
        Op::Add(a, b) => {
            if want(a) {
                out.push((a, g));
            }
            if want(b) {
                out.push((b, g));
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                out.push((a, g));
            }
            if want(b) {
                out.push((b, tape.scale(g, -1.0)?));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                out.push((a, tape.mul(g, b)?));
            }
            if want(b) {
                out.push((b, tape.mul(g, a)?));
            }
        }
        Op::MulConst(a, c) => out.push((a, tape.mul_const(g, c)?)),
        Op::Scale(a, k) => out.push((a, tape.scale(g, k)?)),
        Op::AddScalar(a, _) => out.push((a, g)),
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let w = tape.value(p).dims2()?.1;
                if want(p) {
                    out.push((p, tape.slice_cols(g, offset, w)?));
                }
                offset += w;
            }
        }
        Op::SliceCols { input, start, .. } => {
            let total = tape.value(input).dims2()?.1;
            out.push((input, tape.pad_cols(g, start, total)?));
        }
        Op::PadCols { input, start, .. } => {
            let len = tape.value(input).dims2()?.1;
            out.push((input, tape.slice_cols(g, start, len)?));
        }
        Op::BroadcastRows { input, .. } => out.push((input, tape.sum_rows(g)?)),
        Op::BroadcastCols { input, .. } => out.push((input, tape.sum_cols(g)?)),
        Op::BroadcastScalar { input, .. } => out.push((input, tape.sum(g)?)),
        Op::SumRows(a) => {
            let rows = tape.value(a).dims2()?.0;
            out.push((a, tape.broadcast_rows(g, rows)?));
        }
        Op::SumCols(a) => {
            let cols = tape.value(a).dims2()?.1;
            out.push((a, tape.broadcast_cols(g, cols)?));
        }
        Op::Sum(a) => {
            let shape = tape.shape(a).to_vec();
            out.push((a, tape.broadcast_scalar(g, &shape)?));
        }
        Op::Mean(a) => {
            let shape = tape.shape(a).to_vec();
            let n = tape.value(a).len() as f64;
            let b = tape.broadcast_scalar(g, &shape)?;
            out.push((a, tape.scale(b, 1.0 / n)?));
        }
        Op::LeakyRelu(a) => {
            // Second derivative is zero almost everywhere: the slope mask is a constant.
            let mask = tape.value(a).map(|x| if x > 0.0 { 1.0 } else { LEAKY_SLOPE });
            out.push((a, tape.mul_const(g, mask)?));
        }
        Op::Tanh(a) => {
            let y2 = tape.square(id)?;
            let neg = tape.scale(y2, -1.0)?;
            let d = tape.add_scalar(neg, 1.0)?;
            out.push((a, tape.mul(g, d)?));
        }
        Op::Sigmoid(a) => {
            let neg = tape.scale(id, -1.0)?;
            let one_minus = tape.add_scalar(neg, 1.0)?;
            let d = tape.mul(id, one_minus)?;
            out.push((a, tape.mul(g, d)?));
        }
        Op::Square(a) => {
            let two_x = tape.scale(a, 2.0)?;
            out.push((a, tape.mul(g, two_x)?));
        }
        Op::RowNorm(a) => {
            let cols = tape.value(a).dims2()?.1;
            let inv = tape.recip(id)?;
            let k = tape.mul(g, inv)?;
            let kb = tape.broadcast_cols(k, cols)?;
            out.push((a, tape.mul(a, kb)?));
        }
        Op::Recip(a) => {
            let y2 = tape.square(id)?;
            let d = tape.scale(y2, -1.0)?;
            out.push((a, tape.mul(g, d)?));
        }
        other => return Err(NumericsError::NoSecondOrderAdjoint(other.name())),
    }
    Ok(out)
}
