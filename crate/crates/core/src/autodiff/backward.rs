use std::rc::Rc;

use super::{NodeData, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of a scalar root with respect to tape nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}

fn val(nodes: &[NodeData], id: usize) -> &Tensor {
    nodes[id].value.as_ref()
}

/// Numeric vector-Jacobian products of one node.
fn vjp(nodes: &[NodeData], node: &NodeData, g: &Tensor) -> Vec<(usize, Tensor)> {
    let out = node.value.as_ref();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, g.mul(val(nodes, *b)).expect("shape")),
            (*b, g.mul(val(nodes, *a)).expect("shape")),
        ],
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::AddConst(a) => vec![(*a, g.clone())],
        Op::MulScalar(t, s) => {
            let k = val(nodes, *s).item();
            vec![
                (*t, g.scale(k)),
                (*s, Tensor::scalar(g.dot(val(nodes, *t)))),
            ]
        }
        Op::Exp(a) => vec![(*a, g.mul(out).expect("shape"))],
        Op::Sqrt(a) => vec![(
            *a,
            g.zip_map(out, |gi, o| if o > 0.0 { gi / (2.0 * o) } else { 0.0 })
                .expect("shape"),
        )],
        Op::Recip(a) => vec![(*a, g.zip_map(out, |gi, o| -gi * o * o).expect("shape"))],
        Op::Sigmoid(a) => vec![(
            *a,
            g.zip_map(out, |gi, o| gi * o * (1.0 - o)).expect("shape"),
        )],
        Op::Tanh(a) => vec![(
            *a,
            g.zip_map(out, |gi, o| gi * (1.0 - o * o)).expect("shape"),
        )],
        Op::LeakyRelu(a, slope) => {
            let x = val(nodes, *a);
            vec![(
                *a,
                g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { gi * slope })
                    .expect("shape"),
            )]
        }
        Op::SoftThreshold(a, l) => {
            let x = val(nodes, *a);
            let lam = val(nodes, *l).item();
            let gx = g
                .zip_map(x, |gi, xi| if xi.abs() > lam { gi } else { 0.0 })
                .expect("shape");
            let gl: f64 = g
                .data()
                .iter()
                .zip(x.data())
                .filter(|(_, xi)| xi.abs() > lam)
                .map(|(gi, xi)| -gi * sign(*xi))
                .sum();
            vec![(*a, gx), (*l, Tensor::scalar(gl))]
        }
        Op::L1Sum(a) => {
            let k = g.item();
            vec![(*a, val(nodes, *a).map(|v| k * sign(v)))]
        }
        Op::SqL2Sum(a) => {
            let k = g.item();
            vec![(*a, val(nodes, *a).scale(2.0 * k))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(nodes, *a).shape(), g.item()))],
        Op::Mean(a) => {
            let x = val(nodes, *a);
            vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
        }
        Op::MatVec(m, v) => {
            let (mv, vv) = (val(nodes, *m), val(nodes, *v));
            let (r, c) = mv.dims2().expect("matrix");
            let mut gm = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gm[i * c + j] = g.data()[i] * vv.data()[j];
                }
            }
            let gv = mv.transpose().expect("matrix").matvec(g).expect("shape");
            let gv = gv.reshape(vv.shape().to_vec()).expect("shape");
            vec![(*m, Tensor::new(vec![r, c], gm)), (*v, gv)]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let ga = g.matmul(&bv.transpose().expect("matrix")).expect("shape");
            let gb = av.transpose().expect("matrix").matmul(g).expect("shape");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Outer(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let ga = g.matvec(bv).expect("shape");
            let gb = g.transpose().expect("matrix").matvec(av).expect("shape");
            vec![
                (*a, ga.reshape(av.shape().to_vec()).expect("shape")),
                (*b, gb.reshape(bv.shape().to_vec()).expect("shape")),
            ]
        }
        Op::Transpose(a) => vec![(*a, g.transpose().expect("matrix"))],
        Op::AddRowBias(m, b) => {
            let (r, c) = g.dims2().expect("matrix");
            let mut gb = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gb[j] += g.data()[i * c + j];
                }
            }
            let bshape = val(nodes, *b).shape().to_vec();
            vec![(*m, g.clone()), (*b, Tensor::new(bshape, gb))]
        }
        Op::BroadcastRows(v) => {
            let (r, c) = g.dims2().expect("matrix");
            let mut gv = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gv[j] += g.data()[i * c + j];
                }
            }
            let vshape = val(nodes, *v).shape().to_vec();
            vec![(*v, Tensor::new(vshape, gv))]
        }
        Op::ColSum(m) => {
            let (r, c) = val(nodes, *m).dims2().expect("matrix");
            let mut gm = Vec::with_capacity(r * c);
            for _ in 0..r {
                gm.extend_from_slice(g.data());
            }
            vec![(*m, Tensor::new(vec![r, c], gm))]
        }
        Op::RowSqSum(m) => {
            let mv = val(nodes, *m);
            let (r, c) = mv.dims2().expect("matrix");
            let mut gm = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gm[i * c + j] = 2.0 * mv.data()[i * c + j] * g.data()[i];
                }
            }
            vec![(*m, Tensor::new(vec![r, c], gm))]
        }
        Op::SliceCols(m, start, len) => {
            let (r, c) = val(nodes, *m).dims2().expect("matrix");
            let mut gm = vec![0.0; r * c];
            for i in 0..r {
                gm[i * c + start..i * c + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            vec![(*m, Tensor::new(vec![r, c], gm))]
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let pv = val(nodes, p);
                    let n = pv.len();
                    let gp =
                        Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    (p, gp)
                })
                .collect()
        }
        Op::Slice(a, start, len) => {
            let av = val(nodes, *a);
            let mut ga = vec![0.0; av.len()];
            ga[*start..start + len].copy_from_slice(g.data());
            vec![(*a, Tensor::new(av.shape().to_vec(), ga))]
        }
        Op::Reshape(a) => {
            let shape = val(nodes, *a).shape().to_vec();
            vec![(*a, g.reshape(shape).expect("shape"))]
        }
        Op::Broadcast(a) => vec![(*a, Tensor::scalar(g.sum()))],
        Op::GaussianReparam { mean, scale, noise } => {
            let sv = val(nodes, *scale);
            let gs = if sv.is_scalar() {
                Tensor::new(sv.shape().to_vec(), vec![g.dot(noise)])
            } else {
                g.mul(noise).expect("shape")
            };
            vec![(*mean, g.clone()), (*scale, gs)]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(nodes, i)).collect();
            op.vjp(&ins, out, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &i)| gi.map(|t| (i, t)))
                .collect()
        }
    }
}

impl Tape {
    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a trainable leaf. Does not modify the tape.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rv = nodes[root.id].value.as_ref();
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0]));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                for (p, gp) in vjp(&nodes, node, &g) {
                    if nodes[p].requires_grad {
                        accumulate(&mut grads[p], gp);
                    }
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `root` with respect to `wrt`, recorded as new tape nodes
    /// so they can themselves be differentiated.
    pub fn grad_graph<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let rv = root.value();
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        // Nodes on a path from some `wrt` entry to the root.
        let mut on_path = vec![false; root.id + 1];
        for w in wrt {
            if w.id <= root.id {
                on_path[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=root.id {
                if !on_path[id] {
                    on_path[id] = nodes[id].op.parents().iter().any(|&p| on_path[p]);
                }
            }
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; root.id + 1];
        grads[root.id] = Some(self.constant(Tensor::new(rv.shape().to_vec(), vec![1.0])));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id] else { continue };
            if !on_path[id] {
                continue;
            }
            let (op, value) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), Rc::clone(&nodes[id].value))
            };
            let node_var = Var { tape: self, id };
            for (p, gp) in self.vjp_graph(&op, node_var, &value, g)? {
                if on_path[p] {
                    grads[p] = Some(match grads[p] {
                        Some(acc) => acc.add(gp)?,
                        None => gp,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    fn vjp_graph<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        _out_value: &Tensor,
        g: Var<'t>,
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let var = |id: usize| Var { tape: self, id };
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.neg())],
            Op::Mul(a, b) => vec![(*a, g.mul(var(*b))?), (*b, g.mul(var(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddConst(a) => vec![(*a, g)],
            Op::MulScalar(t, s) => vec![
                (*t, g.mul_scalar(var(*s))?),
                (*s, g.mul(var(*t))?.sum().reshape(var(*s).shape())?),
            ],
            Op::Exp(a) => vec![(*a, g.mul(out)?)],
            Op::Sigmoid(a) => {
                let d = out.mul(out.neg().add_const(1.0))?;
                vec![(*a, g.mul(d)?)]
            }
            Op::Tanh(a) => {
                let d = out.mul(out)?.neg().add_const(1.0);
                vec![(*a, g.mul(d)?)]
            }
            Op::LeakyRelu(a, slope) => {
                let mask = var(*a).value().map(|x| if x > 0.0 { 1.0 } else { *slope });
                vec![(*a, g.mul(self.constant(mask))?)]
            }
            Op::SqL2Sum(a) => vec![(*a, var(*a).mul_scalar(g)?.scale(2.0))],
            Op::Sum(a) => vec![(*a, g.reshape(vec![1])?.broadcast(&var(*a).shape())?)],
            Op::Mean(a) => {
                let shape = var(*a).shape();
                let n: usize = shape.iter().product();
                vec![(
                    *a,
                    g.reshape(vec![1])?.broadcast(&shape)?.scale(1.0 / n as f64),
                )]
            }
            Op::MatVec(m, v) => vec![
                (*m, g.outer(var(*v))),
                (
                    *v,
                    var(*m).transpose()?.matvec(g)?.reshape(var(*v).shape())?,
                ),
            ],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(var(*b).transpose()?)?),
                (*b, var(*a).transpose()?.matmul(g)?),
            ],
            Op::Outer(a, b) => vec![
                (*a, g.matvec(var(*b))?.reshape(var(*a).shape())?),
                (
                    *b,
                    g.transpose()?.matvec(var(*a))?.reshape(var(*b).shape())?,
                ),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::AddRowBias(m, b) => vec![(*m, g), (*b, g.col_sum()?.reshape(var(*b).shape())?)],
            Op::BroadcastRows(v) => vec![(*v, g.col_sum()?.reshape(var(*v).shape())?)],
            Op::ColSum(m) => {
                let (r, _) = var(*m).value().dims2()?;
                vec![(*m, g.broadcast_rows(r))]
            }
            Op::Slice(a, start, len) => {
                let shape = var(*a).shape();
                let n: usize = shape.iter().product();
                let mut parts = Vec::new();
                if *start > 0 {
                    parts.push(self.constant(Tensor::zeros(&[*start])));
                }
                parts.push(g);
                if start + len < n {
                    parts.push(self.constant(Tensor::zeros(&[n - start - len])));
                }
                vec![(*a, self.concat(&parts)?.reshape(shape)?)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let shape = var(p).shape();
                    let n: usize = shape.iter().product();
                    out.push((p, g.slice(offset, n)?.reshape(shape)?));
                    offset += n;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.reshape(var(*a).shape())?)],
            Op::Broadcast(a) => vec![(*a, g.sum().reshape(var(*a).shape())?)],
            Op::GaussianReparam { mean, scale, noise } => {
                let z = self.constant(noise.as_ref().clone());
                let gs = if var(*scale).value().is_scalar() {
                    g.mul(z)?.sum().reshape(var(*scale).shape())?
                } else {
                    g.mul(z)?
                };
                vec![(*mean, g), (*scale, gs)]
            }
            other => return Err(Error::NotTwiceDifferentiable(other.name())),
        })
    }
}
