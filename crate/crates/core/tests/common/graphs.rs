//! Random computation graphs over the tape's op set, rebuilt from a seed so
//! finite differences can re-evaluate them with perturbed leaves.

use poseforge::numerics::{backward, gradient_node, NodeId, Tape, Tensor};
use poseforge::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    /// Every 2-D op, first order.
    Matrix,
    /// Convolution, upsampling and channel concatenation.
    Image,
    /// Ops that support `gradient_node`, differentiated twice.
    SecondOrder,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub seed: u64,
    pub kind: Kind,
    pub leaves: Vec<Tensor>,
    pub ops: Vec<&'static str>,
}

fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng::uniform_vec(r, n, -1.0, 1.0)).unwrap()
}

pub fn sample(seed: u64, kind: Kind) -> Graph {
    let mut r = rng::substream(seed, "graphs/leaves");
    let leaves = match kind {
        Kind::Image => {
            let c = 1 + rng::index(&mut r, 2);
            let k = [3, 5][rng::index(&mut r, 2)];
            let o = 1 + rng::index(&mut r, 2);
            vec![rand_tensor(&mut r, &[c, 4, 4]), rand_tensor(&mut r, &[o, c * k * k]), rand_tensor(&mut r, &[o, 1])]
        }
        _ => {
            let rows = 1 + rng::index(&mut r, 3);
            let cols = 2 + rng::index(&mut r, 3);
            vec![rand_tensor(&mut r, &[rows, cols]), rand_tensor(&mut r, &[cols, rows]), rand_tensor(&mut r, &[rows, cols])]
        }
    };
    let mut g = Graph { seed, kind, leaves, ops: Vec::new() };
    let mut tape = Tape::new();
    let (_, _, ops) = record(&g, &g.leaves.clone(), &mut tape);
    g.ops = ops;
    g
}

const FIRST_ORDER: &[&str] = &[
    "matmul", "transpose", "add", "sub", "mul", "mul_const", "scale", "add_scalar", "concat", "slice", "pad", "broadcast_rows",
    "broadcast_cols", "broadcast_scalar", "sum_rows", "sum_cols", "sum", "mean", "leaky_relu", "tanh", "sigmoid", "square",
    "row_norm", "recip", "log", "abs", "clamp", "log_sigmoid", "log_softmax", "linear",
];
const SECOND_ORDER: usize = 24;

/// Build the graph on `tape` from `leaves`; returns leaf ids, the scalar
/// output and the op names used.
pub fn record(g: &Graph, leaves: &[Tensor], tape: &mut Tape) -> (Vec<NodeId>, NodeId, Vec<&'static str>) {
    let mut r = rng::substream(g.seed, "graphs/structure");
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let mut ops = Vec::new();
    let mut pool = ids.clone();
    if g.kind == Kind::Image {
        let k = ((tape.shape(ids[1])[1] / tape.shape(ids[0])[0]) as f64).sqrt().round() as usize;
        let stride = 1 + rng::index(&mut r, 2);
        let y = tape.conv2d(ids[0], ids[1], ids[2], k, stride).unwrap();
        let y = tape.tanh(y).unwrap();
        let mut y = if stride == 2 { tape.upsample2x(y).unwrap() } else { y };
        ops.extend(["conv2d", "tanh"]);
        if stride == 2 {
            ops.push("upsample2x");
        }
        if rng::index(&mut r, 2) == 0 {
            let up = tape.upsample2x(y).unwrap();
            let x2 = tape.upsample2x(ids[0]).unwrap();
            y = tape.concat_channels(&[up, x2]).unwrap();
            ops.extend(["upsample2x", "concat_channels"]);
        } else {
            y = tape.concat_channels(&[y, ids[0]]).unwrap();
            ops.push("concat_channels");
        }
        let y = tape.sigmoid(y).unwrap();
        let c = rand_tensor(&mut r, tape.shape(y));
        let y = tape.mul_const(y, c).unwrap();
        let out = tape.sum(y).unwrap();
        return (ids, out, ops);
    }
    let menu = if g.kind == Kind::SecondOrder { &FIRST_ORDER[..SECOND_ORDER] } else { FIRST_ORDER };
    let steps = 4 + rng::index(&mut r, 5);
    for _ in 0..steps {
        let a = pool[rng::index(&mut r, pool.len())];
        let sa = tape.shape(a).to_vec();
        let (rows, cols) = (sa[0], sa[1]);
        let same: Vec<NodeId> = pool.iter().copied().filter(|p| tape.shape(*p) == sa.as_slice()).collect();
        let b = same[rng::index(&mut r, same.len())];
        let op = menu[rng::index(&mut r, menu.len())];
        let node = match op {
            "matmul" => match pool.iter().copied().find(|p| tape.shape(*p)[0] == cols) {
                Some(m) => tape.matmul(a, m),
                None => continue,
            },
            "transpose" => tape.transpose(a),
            "add" => tape.add(a, b),
            "sub" => tape.sub(a, b),
            "mul" => tape.mul(a, b),
            "mul_const" => {
                let c = rand_tensor(&mut r, &sa);
                tape.mul_const(a, c)
            }
            "scale" => tape.scale(a, rng::uniform(&mut r, -2.0, 2.0)),
            "add_scalar" => tape.add_scalar(a, rng::uniform(&mut r, -1.0, 1.0)),
            "concat" => match pool.iter().copied().find(|p| tape.shape(*p)[0] == rows && *p != a) {
                Some(m) => tape.concat_cols(&[a, m]),
                None => tape.concat_cols(&[a, a]),
            },
            "slice" if cols >= 2 => tape.slice_cols(a, 1, cols - 1),
            "pad" => tape.pad_cols(a, 1, cols + 2),
            "broadcast_rows" => {
                let s = tape.sum_rows(a).unwrap();
                tape.broadcast_rows(s, rows + 1)
            }
            "broadcast_cols" => {
                let s = tape.sum_cols(a).unwrap();
                tape.broadcast_cols(s, cols)
            }
            "broadcast_scalar" => {
                let s = tape.mean(a).unwrap();
                tape.broadcast_scalar(s, &sa)
            }
            "sum_rows" => tape.sum_rows(a),
            "sum_cols" => tape.sum_cols(a),
            "sum" | "mean" => {
                let s = if op == "sum" { tape.sum(a) } else { tape.mean(a) }.unwrap();
                tape.broadcast_scalar(s, &sa)
            }
            "leaky_relu" => tape.leaky_relu(a),
            "tanh" => tape.tanh(a),
            "sigmoid" => tape.sigmoid(a),
            "square" => tape.square(a),
            "row_norm" => tape.row_norm(a),
            "recip" => {
                let s = tape.square(a).unwrap();
                let s = tape.add_scalar(s, 0.5).unwrap();
                tape.recip(s)
            }
            "log" => {
                let s = tape.sigmoid(a).unwrap();
                tape.log(s)
            }
            "abs" => tape.abs(a),
            "clamp" => tape.clamp(a, -0.6, 0.6),
            "log_sigmoid" => tape.log_sigmoid(a),
            "log_softmax" => tape.log_softmax_rows(a),
            "linear" => match pool.iter().copied().find(|p| tape.shape(*p)[0] == cols) {
                Some(w) => {
                    let wc = tape.shape(w)[1];
                    let bias = pool.iter().copied().find(|p| tape.shape(*p)[1] == wc).map(|p| {
                        let s = tape.sum_rows(p).unwrap();
                        tape.tanh(s).unwrap()
                    });
                    match bias {
                        Some(bias) => tape.linear(a, w, bias),
                        None => continue,
                    }
                }
                None => continue,
            },
            _ => continue,
        }
        .unwrap();
        ops.push(op);
        pool.push(node);
    }
    // Every node feeds the output through a random projection.
    let mut total = None;
    for &p in &pool {
        let c = rand_tensor(&mut r, tape.shape(p));
        let m = tape.mul_const(p, c).unwrap();
        let s = tape.sum(m).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s).unwrap(),
        });
    }
    (ids, total.unwrap(), ops)
}

/// Relative error; leaves whose true gradient is below 1e-6 in norm are
/// compared absolutely against that floor.
fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Central differences of `eval` with respect to every leaf element.
fn numeric(leaves: &[Tensor], mut eval: impl FnMut(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    leaves
        .iter()
        .enumerate()
        .map(|(li, leaf)| {
            (0..leaf.len())
                .map(|k| {
                    let mut plus = leaves.to_vec();
                    plus[li].data_mut()[k] += FD_STEP;
                    let mut minus = leaves.to_vec();
                    minus[li].data_mut()[k] -= FD_STEP;
                    (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}

/// Worst relative error over leaves between `backward` and central differences.
pub fn first_order_error(g: &Graph) -> f64 {
    let mut tape = Tape::new();
    let (ids, out, _) = record(g, &g.leaves, &mut tape);
    let grads = backward(&tape, out, &ids).unwrap();
    let num = numeric(&g.leaves, |ls| {
        let mut t = Tape::new();
        let (_, o, _) = record(g, ls, &mut t);
        t.value(o).item()
    });
    ids.iter().zip(&num).map(|(id, n)| rel_error(grads.get(*id).unwrap().data(), n)).fold(0.0, f64::max)
}

/// `h = Σ c ⊙ ∂f/∂x₀` built with `gradient_node`; compares `∂h/∂leaves`
/// from `backward` against differences of `h`.
pub fn second_order_error(g: &Graph) -> f64 {
    let h = |ls: &[Tensor], tape: &mut Tape| -> (Vec<NodeId>, NodeId) {
        let (ids, out, _) = record(g, ls, tape);
        let gx = gradient_node(tape, out, ids[0]).unwrap();
        let mut r = rng::substream(g.seed, "graphs/probe");
        let c = rand_tensor(&mut r, tape.shape(gx));
        let m = tape.mul_const(gx, c).unwrap();
        let sq = tape.square(m).unwrap();
        let s = tape.sum(sq).unwrap();
        let lin = tape.sum(m).unwrap();
        (ids, tape.add(s, lin).unwrap())
    };
    let mut tape = Tape::new();
    let (ids, out) = h(&g.leaves, &mut tape);
    let grads = backward(&tape, out, &ids).unwrap();
    let num = numeric(&g.leaves, |ls| {
        let mut t = Tape::new();
        let (_, o) = h(ls, &mut t);
        t.value(o).item()
    });
    ids.iter().zip(&num).map(|(id, n)| rel_error(grads.get(*id).unwrap().data(), n)).fold(0.0, f64::max)
}
