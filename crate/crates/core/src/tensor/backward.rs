use alloc::vec;
use alloc::vec::Vec;

use super::{kernels, Graph, Op, Tensor};
use crate::{Error, Real, Result};

impl<T: Real> Graph<T> {
    /// Reverse-mode sweep from a rank-0 `root`.
    ///
    /// Clears all previous gradients, then leaves `d root / d node` on every
    /// node that requires gradients.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if !self.nodes[root.0].shape.is_empty() {
            return Err(Error::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.vjp(id, &g);
            self.nodes[id].grad = Some(g);
            for (parent, pg) in contributions {
                self.accumulate(parent, pg);
            }
        }
        // Intermediate gradients are kept; leaves that never received a
        // contribution get explicit zeros.
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, t: Tensor, g: Vec<T>) {
        let node = &mut self.nodes[t.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient contributions of node `id` to its inputs.
    fn vjp(&self, id: usize, g: &[T]) -> Vec<(Tensor, Vec<T>)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, self.value(*b), &mut ga);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(*a), g, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::BatchedMatMul { a, b, transpose_b } => {
                let sa = &self.nodes[a.0].shape;
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.shape[2];
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let bi = &vb[i * k * p..(i + 1) * k * p];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // out = a·bᵀ with b[p×k]: ga = g·b
                            kernels::gemm_nn(m, p, k, gi, bi, gai);
                        } else {
                            kernels::gemm_nt(m, p, k, gi, bi, gai);
                        }
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * p];
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * p..(i + 1) * k * p];
                        if *transpose_b {
                            // gb[p×k] = gᵀ·a
                            kernels::gemm_tn(p, m, k, gi, ai, gbi);
                        } else {
                            kernels::gemm_tn(k, m, p, ai, gi, gbi);
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute(x, perm) => {
                let gx = kernels::permute(&node.shape, &kernels::inverse_perm(perm), g);
                out.push((*x, gx));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb: Vec<T> = g.iter().zip(self.value(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    out.push((*a, gb));
                }
                if self.wants(*b) {
                    let ga: Vec<T> = g.iter().zip(self.value(*a)).map(|(&gv, &av)| gv * av).collect();
                    out.push((*b, ga));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), xr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), xr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
                        *o = if yv == T::neg_infinity() {
                            T::zero()
                        } else {
                            gv - yv.exp() * total
                        };
                    }
                }
                out.push((*x, gx));
            }
            Op::MaskFill(x, mask) => {
                let gx = g
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { T::zero() } else { v })
                    .collect();
                out.push((*x, gx));
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let gain_v = self.value(*gain);
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut g_gain = vec![T::zero(); d];
                let mut g_bias = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut gxhat = vec![T::zero(); d];
                for (r, (&(mean, rstd), (xr, gr))) in
                    stats.iter().zip(xv.chunks_exact(d).zip(g.chunks_exact(d))).enumerate()
                {
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        gxhat[j] = gr[j] * gain_v[j];
                        g_gain[j] += gr[j] * xhat[j];
                        g_bias[j] += gr[j];
                    }
                    let mean_g: T = gxhat.iter().copied().sum::<T>() * inv_d;
                    let mean_gx: T = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    let row = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        row[j] = rstd * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, gx));
                }
                if self.wants(*gain) {
                    out.push((*gain, g_gain));
                }
                if self.wants(*bias) {
                    out.push((*bias, g_bias));
                }
            }
            Op::SelectRows(x, rows) => {
                let d = node.shape[1];
                let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (gr, &r) in g.chunks_exact(d).zip(rows) {
                    for (a, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                        *a += v;
                    }
                }
                out.push((*x, gx));
            }
            Op::Gather(x, idx) => {
                let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&v, &i) in g.iter().zip(idx) {
                    gx[i] += v;
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::KlDiv(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                if self.wants(*p) {
                    let gp = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| {
                            if a > T::zero() {
                                g[0] * (a.ln() - b.ln() + T::one())
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    out.push((*p, gp));
                }
                if self.wants(*q) {
                    let gq = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| if a > T::zero() { -g[0] * a / b } else { T::zero() })
                        .collect();
                    out.push((*q, gq));
                }
            }
            Op::Custom(inputs, vjp) => {
                let vals: Vec<&[T]> = inputs.iter().map(|t| self.value(*t)).collect();
                for (t, gi) in inputs.iter().zip(vjp(&vals, y, g)) {
                    if self.wants(*t) {
                        out.push((*t, gi));
                    }
                }
            }
        }
        out
    }
}
