//! Reverse sweep. Each rule reads the upstream gradient and sums its
//! contribution into the operands, so tensors consumed several times
//! accumulate correctly.

use super::layout::{self, accumulate_broadcast, permute_copy, region_copy, roll_copy};
use super::ops::{batched_gemm, gelu_derivative};
use super::scalar::Scalar;
use super::{Node, Tensor};
use crate::error::{Error, Result};
use std::collections::HashSet;

pub(crate) fn run_backward<E: Scalar>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward starts from a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::contract("backward on an untracked tensor (no graph recorded)"));
    }

    // Iterative postorder DFS; `order` ends with the loss.
    enum Item<E: Scalar> {
        Enter(Tensor<E>),
        Exit(Tensor<E>),
    }
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Item::Enter(loss.clone())];
    while let Some(item) = stack.pop() {
        match item {
            Item::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Item::Exit(t.clone()));
                if let Some(node) = t.node() {
                    for inp in node.inputs() {
                        if inp.requires_grad() && !visited.contains(&inp.id()) {
                            stack.push(Item::Enter(inp.clone()));
                        }
                    }
                }
            }
            Item::Exit(t) => order.push(t),
        }
    }

    loss.seed_grad_one();
    for t in order.iter().rev() {
        let Some(node) = t.node() else { continue };
        let Some(grad) = t.take_grad_for_backward() else { continue };
        node.backward(t, &grad)?;
        // Intermediate grads are spent; only leaves keep theirs.
        t.zero_grad();
    }
    Ok(())
}

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<E: Scalar> Node<E> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Node::MatMul { a, b, .. } | Node::Add { a, b } | Node::Sub { a, b } | Node::Mul { a, b } => {
                vec![a, b]
            }
            Node::Scale { x, .. }
            | Node::Gelu { x }
            | Node::Sigmoid { x }
            | Node::SoftmaxLast { x }
            | Node::SumAll { x }
            | Node::Reshape { x }
            | Node::Permute { x, .. }
            | Node::Roll { x, .. }
            | Node::PadEnd { x }
            | Node::Slice { x, .. } => vec![x],
            Node::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Node::GatherRows { table, .. } => vec![table],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor<E>, grad: &[E]) -> Result<()> {
        match self {
            Node::MatMul { a, b, trans_b } => {
                let ash = a.shape().to_vec();
                let bsh = b.shape().to_vec();
                let osh = out.shape().to_vec();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
                let n = osh[osh.len() - 1];
                let batch_o = &osh[..osh.len() - 2];
                let a_batch = &ash[..ash.len() - 2];
                let b_batch = &bsh[..bsh.len() - 2];
                if a.requires_grad() {
                    let bd = b.data();
                    a.accumulate_grad(|ga| {
                        if *trans_b {
                            // c = g . b_stored : [m,n] x [n,k]
                            batched_gemm(batch_o, grad, batch_o, m, n, false, &bd, b_batch, br, bc, false, ga, a_batch, E::ONE);
                        } else {
                            // c = g . b^T : [m,n] x [n,k]
                            batched_gemm(batch_o, grad, batch_o, m, n, false, &bd, b_batch, br, bc, true, ga, a_batch, E::ONE);
                        }
                    });
                }
                if b.requires_grad() {
                    let ad = a.data();
                    b.accumulate_grad(|gb| {
                        if *trans_b {
                            // b stored [n,k]: c = g^T . a : [n,m] x [m,k]
                            batched_gemm(batch_o, grad, batch_o, m, n, true, &ad, a_batch, m, k, false, gb, b_batch, E::ONE);
                        } else {
                            // b stored [k,n]: c = a^T . g : [k,m] x [m,n]
                            batched_gemm(batch_o, &ad, a_batch, m, k, true, grad, batch_o, m, n, false, gb, b_batch, E::ONE);
                        }
                    });
                }
            }
            Node::Add { a, b } => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    a.accumulate_grad(|ga| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), Some(ga), None, |g, _, _| g, |g, _, _| g);
                    });
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), None, Some(gb), |g, _, _| g, |g, _, _| g);
                    });
                }
            }
            Node::Sub { a, b } => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    a.accumulate_grad(|ga| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), Some(ga), None, |g, _, _| g, |g, _, _| g);
                    });
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), None, Some(gb), |g, _, _| g, |g, _, _| -g);
                    });
                }
            }
            Node::Mul { a, b } => {
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    a.accumulate_grad(|ga| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), Some(ga), None, |g, _, bv| g * bv, |g, _, _| g);
                    });
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        accumulate_broadcast(grad, out.shape(), &ad, a.shape(), &bd, b.shape(), None, Some(gb), |g, _, _| g, |g, av, _| g * av);
                    });
                }
            }
            Node::Scale { x, c } => {
                if x.requires_grad() {
                    x.accumulate_grad(|gx| {
                        for (d, &g) in gx.iter_mut().zip(grad) {
                            *d += g * *c;
                        }
                    });
                }
            }
            Node::Gelu { x } => {
                if x.requires_grad() {
                    let xd = x.data();
                    x.accumulate_grad(|gx| {
                        for i in 0..gx.len() {
                            gx[i] += grad[i] * gelu_derivative(xd[i]);
                        }
                    });
                }
            }
            Node::Sigmoid { x } => {
                if x.requires_grad() {
                    let yd = out.data();
                    x.accumulate_grad(|gx| {
                        for i in 0..gx.len() {
                            let y = yd[i];
                            gx[i] += grad[i] * y * (E::ONE - y);
                        }
                    });
                }
            }
            Node::SoftmaxLast { x } => {
                if x.requires_grad() {
                    let d = *out.shape().last().expect("rank >= 1");
                    let yd = out.data();
                    x.accumulate_grad(|gx| {
                        for ((grow, yrow), gxrow) in
                            grad.chunks_exact(d).zip(yd.chunks_exact(d)).zip(gx.chunks_exact_mut(d))
                        {
                            let mut dot = E::ZERO;
                            for j in 0..d {
                                dot += grow[j] * yrow[j];
                            }
                            for j in 0..d {
                                gxrow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Node::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = *x.shape().last().expect("rank >= 1");
                let xd = x.data();
                let gd = gamma.data();
                let inv_d = E::from_f64(1.0 / d as f64);
                if gamma.requires_grad() {
                    gamma.accumulate_grad(|gg| {
                        for (r, (grow, xrow)) in grad.chunks_exact(d).zip(xd.chunks_exact(d)).enumerate() {
                            for j in 0..d {
                                gg[j] += grow[j] * (xrow[j] - mean[r]) * rstd[r];
                            }
                        }
                    });
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(|gb| {
                        for grow in grad.chunks_exact(d) {
                            add_into(gb, grow);
                        }
                    });
                }
                if x.requires_grad() {
                    x.accumulate_grad(|gx| {
                        for (r, ((grow, xrow), gxrow)) in grad
                            .chunks_exact(d)
                            .zip(xd.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .enumerate()
                        {
                            let (mu, rs) = (mean[r], rstd[r]);
                            let mut sum_gg = E::ZERO;
                            let mut sum_gg_xhat = E::ZERO;
                            for j in 0..d {
                                let gg = grow[j] * gd[j];
                                let xhat = (xrow[j] - mu) * rs;
                                sum_gg += gg;
                                sum_gg_xhat += gg * xhat;
                            }
                            let mean_gg = sum_gg * inv_d;
                            let mean_gg_xhat = sum_gg_xhat * inv_d;
                            for j in 0..d {
                                let gg = grow[j] * gd[j];
                                let xhat = (xrow[j] - mu) * rs;
                                gxrow[j] += rs * (gg - mean_gg - xhat * mean_gg_xhat);
                            }
                        }
                    });
                }
            }
            Node::SumAll { x } => {
                if x.requires_grad() {
                    let g0 = grad[0];
                    x.accumulate_grad(|gx| {
                        for d in gx.iter_mut() {
                            *d += g0;
                        }
                    });
                }
            }
            Node::Reshape { x } => {
                if x.requires_grad() {
                    x.accumulate_grad(|gx| add_into(gx, grad));
                }
            }
            Node::Permute { x, axes } => {
                if x.requires_grad() {
                    let inv = layout::invert_axes(axes);
                    let (back, _) = permute_copy(grad, out.shape(), &inv);
                    x.accumulate_grad(|gx| add_into(gx, &back));
                }
            }
            Node::Roll { x, shifts } => {
                if x.requires_grad() {
                    let neg: Vec<isize> = shifts.iter().map(|&s| -s).collect();
                    let back = roll_copy(grad, out.shape(), &neg);
                    x.accumulate_grad(|gx| add_into(gx, &back));
                }
            }
            Node::PadEnd { x } => {
                if x.requires_grad() {
                    let zeros = vec![0usize; x.ndim()];
                    let xsh = x.shape().to_vec();
                    let osh = out.shape().to_vec();
                    x.accumulate_grad(|gx| {
                        region_copy(grad, &osh, &zeros, gx, &xsh, &zeros, &xsh, true);
                    });
                }
            }
            Node::Slice { x, starts } => {
                if x.requires_grad() {
                    let zeros = vec![0usize; x.ndim()];
                    let xsh = x.shape().to_vec();
                    let osh = out.shape().to_vec();
                    x.accumulate_grad(|gx| {
                        region_copy(grad, &osh, &zeros, gx, &xsh, starts, &osh, true);
                    });
                }
            }
            Node::GatherRows { table, idx } => {
                if table.requires_grad() {
                    let cols = table.shape()[1];
                    table.accumulate_grad(|gt| {
                        for (i, &r) in idx.iter().enumerate() {
                            let dst = &mut gt[r * cols..(r + 1) * cols];
                            add_into(dst, &grad[i * cols..(i + 1) * cols]);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::GradCheck;
    use super::super::Tensor;
    use crate::rng::Stream;
    use std::rc::Rc;

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        let mut s = Stream::new(seed, "gc");
        (0..n).map(|_| s.normal()).collect()
    }

    fn param(seed: u64, shape: &[usize]) -> Tensor<f64> {
        Tensor::param(shape, randn(seed, shape.iter().product())).unwrap()
    }

    /// Fixed random projection turns any output into a scalar with
    /// non-uniform sensitivities, so transposition bugs cannot cancel.
    fn project(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
        let w = Tensor::from_vec(t.shape(), randn(seed, t.numel())).unwrap();
        t.mul(&w).unwrap().sum_all()
    }

    fn assert_grads(params: Vec<(&str, Tensor<f64>)>, f: impl FnMut() -> crate::Result<Tensor<f64>>) {
        let named: Vec<(String, Tensor<f64>)> =
            params.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        let reports = GradCheck::default().run(&named, f).unwrap();
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-7,
                "{} rel err {} over {} probes",
                r.name,
                r.max_rel_err,
                r.probes
            );
        }
    }

    #[test]
    fn grad_matmul_plain() {
        let a = param(1, &[2, 3]);
        let b = param(2, &[3, 2]);
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(vec![("a", a), ("b", b)], move || {
            Ok(project(&ac.matmul(&bc)?, 100))
        });
    }

    #[test]
    fn grad_matmul_batched_broadcast() {
        // Batched lhs against a shared 2-D rhs exercises stride-0 reduction.
        let a = param(3, &[2, 2, 4, 3]);
        let b = param(4, &[3, 5]);
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(vec![("a", a), ("b", b)], move || {
            Ok(project(&ac.matmul(&bc)?, 101))
        });
    }

    #[test]
    fn grad_matmul_nt() {
        let a = param(5, &[2, 3, 4]);
        let b = param(6, &[2, 5, 4]);
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(vec![("a", a), ("b", b)], move || {
            Ok(project(&ac.matmul_nt(&bc)?, 102))
        });
    }

    #[test]
    fn grad_add_sub_mul_broadcast() {
        let a = param(7, &[3, 4]);
        let b = param(8, &[4]);
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(vec![("a", a), ("b", b)], move || {
            let s = ac.add(&bc)?.mul(&ac.sub(&bc)?)?;
            Ok(project(&s, 103))
        });
    }

    #[test]
    fn grad_broadcast_middle_axes() {
        let a = param(9, &[2, 1, 3]);
        let b = param(10, &[1, 4, 3]);
        let (ac, bc) = (a.clone(), b.clone());
        assert_grads(vec![("a", a), ("b", b)], move || {
            Ok(project(&ac.mul(&bc)?, 104))
        });
    }

    #[test]
    fn grad_scale_gelu_sigmoid() {
        let x = param(11, &[2, 5]);
        let xc = x.clone();
        assert_grads(vec![("x", x)], move || {
            Ok(project(&xc.scale(1.7).gelu().sigmoid(), 105))
        });
    }

    #[test]
    fn grad_softmax() {
        let x = param(12, &[3, 6]);
        let xc = x.clone();
        assert_grads(vec![("x", x)], move || {
            Ok(project(&xc.softmax_lastdim(), 106))
        });
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let x = param(13, &[4, 6]);
        let gamma = param(14, &[6]);
        let beta = param(15, &[6]);
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        assert_grads(vec![("x", x), ("gamma", gamma), ("beta", beta)], move || {
            Ok(project(&xc.layer_norm(&gc, &bc, 1e-5)?, 107))
        });
    }

    #[test]
    fn grad_reindexing_ops() {
        let x = param(16, &[2, 3, 4]);
        let xc = x.clone();
        assert_grads(vec![("x", x)], move || {
            let y = xc
                .reshape(&[6, 4])?
                .permute(&[1, 0])?
                .roll(&[1, -2])?
                .pad_end(&[2, 1])?
                .slice(&[1, 0], &[4, 6])?;
            Ok(project(&y, 108))
        });
    }

    #[test]
    fn grad_gather_rows_scatter_adds() {
        let table = param(17, &[4, 3]);
        let idx = Rc::new(vec![1usize, 3, 1, 0, 1]);
        let tc = table.clone();
        assert_grads(vec![("table", table)], move || {
            Ok(project(&tc.gather_rows(&idx)?, 109))
        });
        // Row 2 is never gathered: its gradient stays zero.
        let t2 = param(18, &[4, 3]);
        let y = project(&t2.gather_rows(&Rc::new(vec![0usize, 1, 3])).unwrap(), 110);
        y.backward().unwrap();
        let g = t2.grad().unwrap();
        assert!(g[6..9].iter().all(|&v| v == 0.0));
        assert!(g[0..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // y = sum(x + x): every element's gradient is exactly 2.
        let x = param(19, &[5]);
        let y = x.add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 5]);
        // Reuse through different op types still checks out numerically.
        let x2 = param(20, &[3, 3]);
        let xc = x2.clone();
        assert_grads(vec![("x", x2)], move || {
            let a = xc.gelu();
            let b = xc.softmax_lastdim();
            Ok(project(&a.mul(&b)?, 111).add(&project(&xc.matmul(&xc)?, 112))?.sum_all())
        });
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = param(21, &[4]);
        let frozen = x.detach();
        assert!(!frozen.requires_grad());
        let y = x.mul(&frozen).unwrap().sum_all();
        y.backward().unwrap();
        // d/dx (x * const) = const = x values.
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.to_vec()) {
            assert!((gi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_contract_violations() {
        let x = param(22, &[2, 2]);
        // Non-scalar root.
        assert!(x.add(&x).unwrap().backward().is_err());
        // Untracked root records no graph.
        let c = Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap();
        assert!(c.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = param(23, &[3]);
        let y = crate::no_grad(|| x.gelu().sum_all());
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
        // Graph recording resumes after the guard.
        let z = x.gelu().sum_all();
        assert!(z.requires_grad());
        z.backward().unwrap();
        assert!(x.grad().is_some());
    }
}
