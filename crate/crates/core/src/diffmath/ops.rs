use super::graph::{numel, slot, Graph, Op, ValueId};
use crate::error::{Error, Result};
use crate::real::{c, Real};

/// Guard inside the per-row L2 norm: `sqrt(sum x^2 + eps^2)`.
pub const NORM_EPS: f64 = 1e-8;

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Graph<T> {
    /// Shared linear map over the last axis: `x[.., Din] * W[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() < 2 || ws.len() != 2 || ws[0] != last_dim(xs) {
            return Err(Error::shape("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("linear", ws, bs));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = numel(xs) / din;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = dout;

        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            out.extend_from_slice(bd);
            let o = &mut out[r * dout..];
            for (i, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                for (ov, &wv) in o[..dout].iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                    *ov += xv * wv;
                }
            }
        }
        Ok(self.push_op(out, out_shape, Op::Linear { x, w, b }))
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: T) -> ValueId {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::LeakyRelu { x, slope })
    }

    /// Logistic function, clamped so outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let hi = T::one() - T::epsilon() / c(2.0);
        let lo = T::min_positive_value();
        let out = self
            .data(x)
            .iter()
            .map(|&v| {
                let s = if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                };
                s.max(lo).min(hi)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::Sigmoid { x })
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(last_dim(s));
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push_op(out, shape, Op::Concat { parts: parts.to_vec() }))
    }

    /// Row gather: `x[M, D]` with `idx` (row-major `N x k`) gives `[N, k, D]`.
    pub fn gather(&mut self, x: ValueId, idx: &[usize], k: usize) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 2 || k == 0 || !idx.len().is_multiple_of(k) {
            return Err(Error::shape("gather", xs, &[idx.len(), k]));
        }
        let (m, d) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                len: m,
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let shape = vec![idx.len() / k, k, d];
        Ok(self.push_op(out, shape, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Max over the middle axis of `[N, K, D]`; ties resolve to the lowest K index.
    pub fn max_over_axis(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[1] == 0 {
            return Err(Error::shape("max_over_axis", xs, &[0, 1, 0]));
        }
        let (n, k, d) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * d);
        let mut argmax = Vec::with_capacity(n * d);
        for r in 0..n {
            let base = r * k * d;
            for ch in 0..d {
                let mut best = xd[base + ch];
                let mut arg = 0u32;
                for kk in 1..k {
                    let v = xd[base + kk * d + ch];
                    if v > best {
                        best = v;
                        arg = kk as u32;
                    }
                }
                out.push(best);
                argmax.push(arg);
            }
        }
        Ok(self.push_op(out, vec![n, d], Op::MaxOverAxis { x, argmax }))
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: ValueId, b: ValueId, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Mul { a, b }))
    }

    /// `a / (b + eps)` elementwise.
    pub fn div(&mut self, a: ValueId, b: ValueId, eps: T) -> Result<ValueId> {
        self.same_shape("div", a, b)?;
        let out = self.zip_with(a, b, |x, y| x / (y + eps));
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(out, shape, Op::Div { a, b, eps }))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: ValueId, scale: T, shift: T) -> ValueId {
        let out = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: ValueId, factor: T) -> ValueId {
        self.affine(x, factor, T::zero())
    }

    /// Multiplies every row `x[n, ..]` by the scalar `w[n]`.
    pub fn scale_rows(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.is_empty() || self.value(w).len() != xs[0] {
            return Err(Error::shape("scale_rows", xs, self.shape(w)));
        }
        let inner = numel(xs) / xs[0];
        let wd = self.data(w);
        let out = self
            .data(x)
            .chunks(inner.max(1))
            .zip(wd)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let shape = xs.to_vec();
        Ok(self.push_op(out, shape, Op::ScaleRows { x, w }))
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s = self.data(x).iter().copied().sum();
        self.push_op(vec![s], vec![], Op::Sum { x })
    }

    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / c(d.len() as f64);
        self.push_op(vec![s], vec![], Op::Mean { x })
    }

    /// Guarded L2 norm over the last axis: `sqrt(sum x^2 + eps^2)`.
    pub fn row_norm(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(Error::shape("row_norm", xs, &[1]));
        }
        let d = last_dim(xs);
        let eps2 = c::<T>(NORM_EPS) * c(NORM_EPS);
        let out = self
            .data(x)
            .chunks(d.max(1))
            .map(|row| (row.iter().map(|&v| v * v).sum::<T>() + eps2).sqrt())
            .collect();
        let shape = xs[..xs.len() - 1].to_vec();
        Ok(self.push_op(out, shape, Op::RowNorm { x }))
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(out, shape, Op::Abs { x })
    }

    /// `sum_k w[n,k] x[n,k,:] / sum_k w[n,k]` for `x[N,K,D]`, `w[N,K]`.
    pub fn weighted_mean(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws != &xs[..2] {
            return Err(Error::shape("weighted_mean", xs, ws));
        }
        let (n, k, d) = (xs[0], xs[1], xs[2]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let wr = &wd[r * k..(r + 1) * k];
            let total: T = wr.iter().copied().sum();
            let o = &mut out[r * d..(r + 1) * d];
            for (kk, &wk) in wr.iter().enumerate() {
                let row = &xd[(r * k + kk) * d..(r * k + kk + 1) * d];
                for (ov, &xv) in o.iter_mut().zip(row) {
                    *ov += wk * xv;
                }
            }
            o.iter_mut().for_each(|v| *v = *v / total);
        }
        Ok(self.push_op(out, vec![n, d], Op::WeightedMean { x, w }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_op(out, shape.to_vec(), Op::Reshape { x }))
    }

    pub(crate) fn backprop_op(&self, i: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes[..];
        let node = &nodes[i];
        let op = node.op.as_ref().expect("backprop_op on leaf");
        match op {
            Op::Linear { x, w, b } => {
                let (din, dout) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let rows = g.len() / dout;
                let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wr = &wd[i * dout..(i + 1) * dout];
                            dx[r * din + i] += gr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if let Some(dw) = slot(scratch, nodes, *w) {
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let xv = xd[r * din + i];
                            if xv == T::zero() {
                                continue;
                            }
                            for (dv, &gv) in dw[i * dout..(i + 1) * dout].iter_mut().zip(gr) {
                                *dv += xv * gv;
                            }
                        }
                    }
                }
                if let Some(db) = slot(scratch, nodes, *b) {
                    for gr in g.chunks(dout) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = &nodes[x.0].data;
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += if xv >= T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Sigmoid { x } => {
                let sd = &node.data;
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(sd) {
                        *d += gv * s * (T::one() - s);
                    }
                }
            }
            Op::Concat { parts } => {
                let total = last_dim(&node.shape);
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for p in parts {
                    let w = last_dim(&nodes[p.0].shape);
                    if let Some(dp) = slot(scratch, nodes, *p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    off += w;
                }
            }
            Op::Gather { x, idx } => {
                let d = nodes[x.0].shape[1];
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for (j, &src) in idx.iter().enumerate() {
                        dx[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(&g[j * d..(j + 1) * d])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::MaxOverAxis { x, argmax } => {
                let (k, d) = (nodes[x.0].shape[1], nodes[x.0].shape[2]);
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for (j, (&gv, &a)) in g.iter().zip(argmax).enumerate() {
                        let (r, ch) = (j / d, j % d);
                        dx[(r * k + a as usize) * d + ch] += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = slot(scratch, nodes, *id) {
                        d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = slot(scratch, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(d) = slot(scratch, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(d) = slot(scratch, nodes, *a) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bd) {
                        *d += gv * o;
                    }
                }
                if let Some(d) = slot(scratch, nodes, *b) {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(ad) {
                        *d += gv * o;
                    }
                }
            }
            Op::Div { a, b, eps } => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(d) = slot(scratch, nodes, *a) {
                    for ((d, &gv), &den) in d.iter_mut().zip(g).zip(bd) {
                        *d += gv / (den + *eps);
                    }
                }
                if let Some(d) = slot(scratch, nodes, *b) {
                    for (((d, &gv), &num), &den) in d.iter_mut().zip(g).zip(ad).zip(bd) {
                        let q = den + *eps;
                        *d -= gv * num / (q * q);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(d) = slot(scratch, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *scale);
                }
            }
            Op::ScaleRows { x, w } => {
                let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
                let inner = xd.len() / wd.len().max(1);
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for (j, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * wd[j / inner];
                    }
                }
                if let Some(dw) = slot(scratch, nodes, *w) {
                    for (j, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
                        dw[j / inner] += gv * xv;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(d) = slot(scratch, nodes, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(d) = slot(scratch, nodes, *x) {
                    let s = g[0] / c(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::RowNorm { x } => {
                let xd = &nodes[x.0].data;
                let dim = last_dim(&nodes[x.0].shape);
                let norms = &node.data;
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for (j, (d, &xv)) in dx.iter_mut().zip(xd).enumerate() {
                        let r = j / dim;
                        *d += g[r] * xv / norms[r];
                    }
                }
            }
            Op::Abs { x } => {
                let xd = &nodes[x.0].data;
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d += gv;
                        } else if xv < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::WeightedMean { x, w } => {
                let (k, d) = (nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let (xd, wd) = (&nodes[x.0].data, &nodes[w.0].data);
                let out = &node.data;
                let n = out.len() / d.max(1);
                let totals: Vec<T> = wd.chunks(k).map(|r| r.iter().copied().sum()).collect();
                if let Some(dx) = slot(scratch, nodes, *x) {
                    for r in 0..n {
                        for kk in 0..k {
                            let s = wd[r * k + kk] / totals[r];
                            let base = (r * k + kk) * d;
                            for ch in 0..d {
                                dx[base + ch] += g[r * d + ch] * s;
                            }
                        }
                    }
                }
                if let Some(dw) = slot(scratch, nodes, *w) {
                    for r in 0..n {
                        for kk in 0..k {
                            let base = (r * k + kk) * d;
                            let mut acc = T::zero();
                            for ch in 0..d {
                                acc += g[r * d + ch] * (xd[base + ch] - out[r * d + ch]);
                            }
                            dw[r * k + kk] += acc / totals[r];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = slot(scratch, nodes, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}
