//! Differentiable operations. Each op computes its output eagerly and, when
//! gradient tracking applies, records a backward closure on the tape.

use super::{numel_of, strides_of, Elem, Graph, Tensor};
use crate::error::{Error, Result};

/// Batch-broadcast helper: maps a flat broadcast-batch index to the flat
/// batch offset inside a tensor whose batch dims may contain 1s.
fn batch_offset(flat: usize, out_batch: &[usize], dims: &[usize]) -> usize {
    let mut rem = flat;
    let mut offset = 0usize;
    let mut stride = numel_of(dims);
    for i in 0..out_batch.len() {
        let below: usize = out_batch[i + 1..].iter().product();
        let coord = rem / below;
        rem %= below;
        stride /= dims[i];
        if dims[i] != 1 {
            offset += coord * stride;
        }
    }
    offset
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let len = a.len().max(b.len());
    let mut out = vec![1usize; len];
    for i in 0..len {
        let da = if i < len - a.len() { 1 } else { a[i - (len - a.len())] };
        let db = if i < len - b.len() { 1 } else { b[i - (len - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!(
                "batch dims not broadcastable: {:?} vs {:?}",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], len: usize) -> Vec<usize> {
    let mut v = vec![1usize; len - shape.len()];
    v.extend_from_slice(shape);
    v
}

impl<E: Elem> Graph<E> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let data = {
            let ad = a.data();
            let bd = b.data();
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect()
        };
        let out = Tensor::from_vec(data, a.shape())?;
        if self.tracks(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                a.accum_grad(&go);
                b.accum_grad(&go);
            });
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.add(a, &self.scale(b, -E::one())?)
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "mul: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let data = {
            let ad = a.data();
            let bd = b.data();
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::from_vec(data, a.shape())?;
        if self.tracks(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                if a.requires_grad() {
                    let bd = b.data();
                    let da: Vec<E> = go.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
                    drop(bd);
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let db: Vec<E> = go.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
                    drop(ad);
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Scalar multiple c*a.
    pub fn scale(&self, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
        let data = a.map_data(|d| d.iter().map(|&x| x * c).collect());
        let out = Tensor::from_vec(data, a.shape())?;
        if self.tracks(&[a]) {
            out.set_requires_grad(true);
            let (a, o) = (a.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let da: Vec<E> = go.iter().map(|&g| g * c).collect();
                a.accum_grad(&da);
            });
        }
        Ok(out)
    }

    /// a + b where b's shape is a suffix of a's shape (broadcast over the
    /// leading dims). Covers linear bias ([.., d] + [d]) and positional
    /// embeddings ([N, T, d] + [T, d]).
    pub fn add_suffix(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (ashape, bshape) = (a.shape(), b.shape());
        if bshape.len() > ashape.len() || &ashape[ashape.len() - bshape.len()..] != bshape {
            return Err(Error::dim(format!(
                "add_suffix: {:?} is not a suffix of {:?}",
                bshape, ashape
            )));
        }
        let bn = b.numel();
        let data = {
            let ad = a.data();
            let bd = b.data();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % bn])
                .collect()
        };
        let out = Tensor::from_vec(data, ashape)?;
        if self.tracks(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                a.accum_grad(&go);
                if b.requires_grad() {
                    let mut db = vec![E::zero(); bn];
                    for (i, &g) in go.iter().enumerate() {
                        db[i % bn] = db[i % bn] + g;
                    }
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Batched matrix product a[.., m, k] x b[.., k, n] with broadcastable
    /// batch dims.
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, ka) = (a.dim(a.rank() - 2), a.dim(a.rank() - 1));
        let (kb, n) = (b.dim(b.rank() - 2), b.dim(b.rank() - 1));
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul: inner dims differ for {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let k = ka;
        let abatch = &a.shape()[..a.rank() - 2];
        let bbatch = &b.shape()[..b.rank() - 2];
        let obatch = broadcast_batch(abatch, bbatch)?;
        let adims = pad_left(abatch, obatch.len());
        let bdims = pad_left(bbatch, obatch.len());
        let nb = numel_of(&obatch);

        let mut oshape = obatch.clone();
        oshape.push(m);
        oshape.push(n);
        let mut data = vec![E::zero(); nb * m * n];
        {
            let ad = a.data();
            let bd = b.data();
            for bi in 0..nb {
                let ao = batch_offset(bi, &obatch, &adims) * m * k;
                let bo = batch_offset(bi, &obatch, &bdims) * k * n;
                let co = bi * m * n;
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[ao + i * k + p];
                        let brow = &bd[bo + p * n..bo + p * n + n];
                        let crow = &mut data[co + i * n..co + i * n + n];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(data, &oshape)?;
        if self.tracks(&[a, b]) {
            out.set_requires_grad(true);
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            let obatch = obatch.clone();
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let adims = pad_left(&a.shape()[..a.rank() - 2], obatch.len());
                let bdims = pad_left(&b.shape()[..b.rank() - 2], obatch.len());
                let nb = numel_of(&obatch);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut da = vec![E::zero(); a.numel()];
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &obatch, &adims) * m * k;
                        let bo = batch_offset(bi, &obatch, &bdims) * k * n;
                        let co = bi * m * n;
                        // dA = dC x B^T
                        for i in 0..m {
                            for j in 0..n {
                                let g = go[co + i * n + j];
                                let brow = &bd[bo + j..];
                                for p in 0..k {
                                    da[ao + i * k + p] = da[ao + i * k + p] + g * brow[p * n];
                                }
                            }
                        }
                    }
                    drop(bd);
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut db = vec![E::zero(); b.numel()];
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &obatch, &adims) * m * k;
                        let bo = batch_offset(bi, &obatch, &bdims) * k * n;
                        let co = bi * m * n;
                        // dB = A^T x dC
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[ao + i * k + p];
                                let grow = &go[co + i * n..co + i * n + n];
                                let brow = &mut db[bo + p * n..bo + p * n + n];
                                for (bv, &g) in brow.iter_mut().zip(grow) {
                                    *bv = *bv + av * g;
                                }
                            }
                        }
                    }
                    drop(ad);
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= x.rank() {
            return Err(Error::dim(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                x.shape()
            )));
        }
        let len = x.dim(axis);
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let outer: usize = x.shape()[..axis].iter().product();
        let mut data = x.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = E::neg_infinity();
                for t in 0..len {
                    mx = mx.max(data[base + t * inner]);
                }
                let mut sum = E::zero();
                for t in 0..len {
                    let e = (data[base + t * inner] - mx).exp();
                    data[base + t * inner] = e;
                    sum = sum + e;
                }
                for t in 0..len {
                    data[base + t * inner] = data[base + t * inner] / sum;
                }
            }
        }
        let out = Tensor::from_vec(data, x.shape())?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let y = o.data();
                let mut dx = vec![E::zero(); x.numel()];
                for ob in 0..outer {
                    for i in 0..inner {
                        let base = ob * len * inner + i;
                        let mut dot = E::zero();
                        for t in 0..len {
                            let idx = base + t * inner;
                            dot = dot + go[idx] * y[idx];
                        }
                        for t in 0..len {
                            let idx = base + t * inner;
                            dx[idx] = y[idx] * (go[idx] - dot);
                        }
                    }
                }
                drop(y);
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Layer normalization over the last dim with affine parameters.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm on rank-0 tensor".to_string()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{}]",
                gamma.shape(),
                beta.shape(),
                d
            )));
        }
        let rows = x.numel() / d;
        let groups: Vec<(usize, usize)> = (0..rows).map(|r| (r * d, d)).collect();
        self.group_norm_impl(x, gamma, beta, eps, groups, GroupAffine::PerElement)
    }

    /// Per-channel normalization of an NCHW map: each (n, c) plane is
    /// normalized over its H*W values, then scaled/shifted by gamma[c],
    /// beta[c]. Batch-size independent, identical in train and eval.
    pub fn channel_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!(
                "channel_norm expects NCHW, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!(
                "channel_norm: gamma {:?} / beta {:?} must be [{}]",
                gamma.shape(),
                beta.shape(),
                c
            )));
        }
        let plane = h * w;
        let groups: Vec<(usize, usize)> = (0..n * c).map(|i| (i * plane, plane)).collect();
        self.group_norm_impl(x, gamma, beta, eps, groups, GroupAffine::PerGroupChannel(c))
    }

    /// Shared normalization kernel: each group is a contiguous run of
    /// elements normalized to zero mean / unit variance (biased variance),
    /// followed by an affine transform.
    fn group_norm_impl(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
        groups: Vec<(usize, usize)>,
        affine: GroupAffine,
    ) -> Result<Tensor<E>> {
        let mut data = x.to_vec();
        {
            let gd = gamma.data();
            let bd = beta.data();
            for (gi, &(start, len)) in groups.iter().enumerate() {
                let (mu, inv) = group_stats(&data[start..start + len], eps);
                for t in 0..len {
                    let xhat = (data[start + t] - mu) * inv;
                    let (ga, be) = affine.at(gi, t, &gd, &bd);
                    data[start + t] = ga * xhat + be;
                }
            }
        }
        let out = Tensor::from_vec(data, x.shape())?;
        if self.tracks(&[x, gamma, beta]) {
            out.set_requires_grad(true);
            let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let xd = x.data();
                let gd = gamma.data();
                let mut dx = vec![E::zero(); x.numel()];
                let mut dgamma = vec![E::zero(); gamma.numel()];
                let mut dbeta = vec![E::zero(); beta.numel()];
                for (gi, &(start, len)) in groups.iter().enumerate() {
                    let (mu, inv) = group_stats(&xd[start..start + len], eps);
                    let nf = E::from_f64(len as f64);
                    // mean(dxhat) and mean(dxhat * xhat) over the group
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for t in 0..len {
                        let xhat = (xd[start + t] - mu) * inv;
                        let (ga, _) = affine.at(gi, t, &gd, &gd);
                        let dxhat = go[start + t] * ga;
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat;
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for t in 0..len {
                        let xhat = (xd[start + t] - mu) * inv;
                        let (ga, _) = affine.at(gi, t, &gd, &gd);
                        let dxhat = go[start + t] * ga;
                        dx[start + t] = inv * (dxhat - m1 - xhat * m2);
                        let slot = affine.param_index(gi, t);
                        dgamma[slot] = dgamma[slot] + go[start + t] * xhat;
                        dbeta[slot] = dbeta[slot] + go[start + t];
                    }
                }
                drop(xd);
                drop(gd);
                x.accum_grad(&dx);
                gamma.accum_grad(&dgamma);
                beta.accum_grad(&dbeta);
            });
        }
        Ok(out)
    }

    /// Exact GELU: x * Phi(x) with the Gaussian CDF evaluated through f64.
    pub fn gelu(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x.map_data(|d| d.iter().map(|&v| v * v.gauss_cdf()).collect());
        let out = Tensor::from_vec(data, x.shape())?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let xd = x.data();
                let dx: Vec<E> = go
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| g * (v.gauss_cdf() + v * v.gauss_pdf()))
                    .collect();
                drop(xd);
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Tanh-approximate GELU; only reachable through the explicit config
    /// switch.
    pub fn gelu_tanh(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = E::from_f64(0.044_715);
        let half = E::from_f64(0.5);
        let fwd = move |v: E| {
            let u = c * (v + a * v * v * v);
            half * v * (E::one() + u.tanh())
        };
        let data = x.map_data(|d| d.iter().map(|&v| fwd(v)).collect());
        let out = Tensor::from_vec(data, x.shape())?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let xd = x.data();
                let three = E::from_f64(3.0);
                let dx: Vec<E> = go
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (E::one() + three * a * v * v);
                        g * (half * (E::one() + t) + half * v * (E::one() - t * t) * du)
                    })
                    .collect();
                drop(xd);
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Copy-reshape; total element count must be preserved.
    pub fn reshape(&self, x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != x.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let out = Tensor::from_vec(x.to_vec(), shape)?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                x.accum_grad(&go);
            });
        }
        Ok(out)
    }

    /// Dimension permutation (generalized transpose).
    pub fn permute(&self, x: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
        let r = x.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "permute: {:?} is not a permutation of 0..{}",
                perm, r
            )));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
        let in_strides = strides_of(x.shape());
        let out_strides = strides_of(&oshape);
        let map_index = {
            let perm = perm.to_vec();
            let oshape = oshape.clone();
            move |flat_out: usize| -> usize {
                let mut rem = flat_out;
                let mut idx_in = 0usize;
                for (k, &os) in out_strides.iter().enumerate() {
                    let coord = rem / os;
                    rem %= os;
                    debug_assert!(coord < oshape[k]);
                    idx_in += coord * in_strides[perm[k]];
                }
                idx_in
            }
        };
        let data = {
            let xd = x.data();
            (0..x.numel()).map(|i| xd[map_index(i)]).collect()
        };
        let out = Tensor::from_vec(data, &oshape)?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let mut dx = vec![E::zero(); x.numel()];
                for (i, &g) in go.iter().enumerate() {
                    dx[map_index(i)] = dx[map_index(i)] + g;
                }
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&self, xs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors".to_string()))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::dim(format!("concat axis {} out of range", axis)));
        }
        for x in xs {
            if x.rank() != r
                || (0..r).any(|i| i != axis && x.dim(i) != first.dim(i))
            {
                return Err(Error::dim(format!(
                    "concat: incompatible shapes {:?} vs {:?} along axis {}",
                    x.shape(),
                    first.shape(),
                    axis
                )));
            }
        }
        let mut oshape = first.shape().to_vec();
        oshape[axis] = xs.iter().map(|x| x.dim(axis)).sum();
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = vec![E::zero(); numel_of(&oshape)];
        let total_axis = oshape[axis];
        let mut base = 0usize;
        let mut spans = Vec::with_capacity(xs.len());
        for x in xs {
            let len = x.dim(axis);
            let xd = x.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total_axis + base) * inner;
                data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
            spans.push((base, len));
            base += len;
        }
        let out = Tensor::from_vec(data, &oshape)?;
        let refs: Vec<&Tensor<E>> = xs.to_vec();
        if self.tracks(&refs) {
            out.set_requires_grad(true);
            let owned: Vec<Tensor<E>> = xs.iter().map(|x| (*x).clone()).collect();
            let o = out.clone();
            self.record(move || {
                let Some(go) = o.grad() else { return };
                for (x, &(base, len)) in owned.iter().zip(&spans) {
                    if !x.requires_grad() {
                        continue;
                    }
                    let mut dx = vec![E::zero(); x.numel()];
                    for ob in 0..outer {
                        let dst = ob * len * inner;
                        let src = (ob * total_axis + base) * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
                    }
                    x.accum_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Split the last dim into `parts` equal chunks (used to separate the
    /// fused QKV projection).
    pub fn split_last(&self, x: &Tensor<E>, parts: usize) -> Result<Vec<Tensor<E>>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("split_last on rank-0".to_string()))?;
        if parts == 0 || d % parts != 0 {
            return Err(Error::dim(format!(
                "split_last: {} does not divide last dim {}",
                parts, d
            )));
        }
        let chunk = d / parts;
        let rows = x.numel() / d;
        let mut oshape = x.shape().to_vec();
        *oshape.last_mut().unwrap() = chunk;
        let xd = x.data();
        let mut outs = Vec::with_capacity(parts);
        for p in 0..parts {
            let mut data = Vec::with_capacity(rows * chunk);
            for row in 0..rows {
                let base = row * d + p * chunk;
                data.extend_from_slice(&xd[base..base + chunk]);
            }
            outs.push(Tensor::from_vec(data, &oshape)?);
        }
        drop(xd);
        if self.tracks(&[x]) {
            for (p, out) in outs.iter().enumerate() {
                out.set_requires_grad(true);
                let (x, o) = (x.clone(), out.clone());
                self.record(move || {
                    let Some(go) = o.grad() else { return };
                    let mut dx = vec![E::zero(); x.numel()];
                    for row in 0..rows {
                        let dst = row * d + p * chunk;
                        let src = row * chunk;
                        dx[dst..dst + chunk].copy_from_slice(&go[src..src + chunk]);
                    }
                    x.accum_grad(&dx);
                });
            }
        }
        Ok(outs)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.map_data(|d| d.iter().fold(E::zero(), |acc, &v| acc + v));
        let out = Tensor::scalar(s);
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                x.accum_grad(&vec![go[0]; x.numel()]);
            });
        }
        Ok(out)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let n = E::from_f64(x.numel() as f64);
        let s = self.sum(x)?;
        self.scale(&s, E::one() / n)
    }

    /// Mean cross-entropy over scored positions of `logits` shaped
    /// [N, C, ...spatial] against integer labels (length N * spatial).
    /// Pixels carrying `ignore` are skipped; no scored pixels is a data
    /// error.
    pub fn cross_entropy(
        &self,
        logits: &Tensor<E>,
        targets: &[u8],
        ignore: Option<u8>,
    ) -> Result<Tensor<E>> {
        if logits.rank() < 2 {
            return Err(Error::dim(format!(
                "cross_entropy expects [N, C, ...], got {:?}",
                logits.shape()
            )));
        }
        let n = logits.dim(0);
        let c = logits.dim(1);
        let spatial: usize = logits.shape()[2..].iter().product();
        if targets.len() != n * spatial {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for {} positions",
                targets.len(),
                n * spatial
            )));
        }
        let mut total = E::zero();
        let mut count = 0usize;
        {
            let ld = logits.data();
            for ni in 0..n {
                for s in 0..spatial {
                    let label = targets[ni * spatial + s];
                    if Some(label) == ignore {
                        continue;
                    }
                    if usize::from(label) >= c {
                        return Err(Error::data(format!(
                            "label {} out of range (C = {}) at sample {}, position {}",
                            label, c, ni, s
                        )));
                    }
                    let at = |ci: usize| ld[(ni * c + ci) * spatial + s];
                    let mut mx = E::neg_infinity();
                    for ci in 0..c {
                        mx = mx.max(at(ci));
                    }
                    let mut sum = E::zero();
                    for ci in 0..c {
                        sum = sum + (at(ci) - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    total = total + lse - at(usize::from(label));
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::data(
                "cross_entropy: no scored pixels (all ignored)".to_string(),
            ));
        }
        let out = Tensor::scalar(total / E::from_f64(count as f64));
        if self.tracks(&[logits]) {
            out.set_requires_grad(true);
            let (x, o) = (logits.clone(), out.clone());
            let targets = targets.to_vec();
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let g = go[0] / E::from_f64(count as f64);
                let ld = x.data();
                let mut dx = vec![E::zero(); x.numel()];
                for ni in 0..n {
                    for s in 0..spatial {
                        let label = targets[ni * spatial + s];
                        if Some(label) == ignore {
                            continue;
                        }
                        let at = |ci: usize| ld[(ni * c + ci) * spatial + s];
                        let mut mx = E::neg_infinity();
                        for ci in 0..c {
                            mx = mx.max(at(ci));
                        }
                        let mut sum = E::zero();
                        for ci in 0..c {
                            sum = sum + (at(ci) - mx).exp();
                        }
                        for ci in 0..c {
                            let p = (at(ci) - mx).exp() / sum;
                            let ind = if ci == usize::from(label) { E::one() } else { E::zero() };
                            dx[(ni * c + ci) * spatial + s] = g * (p - ind);
                        }
                    }
                }
                drop(ld);
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }
}

fn group_stats<E: Elem>(vals: &[E], eps: E) -> (E, E) {
    let nf = E::from_f64(vals.len() as f64);
    let mut mu = E::zero();
    for &v in vals {
        mu = mu + v;
    }
    mu = mu / nf;
    let mut var = E::zero();
    for &v in vals {
        let d = v - mu;
        var = var + d * d;
    }
    var = var / nf;
    (mu, (var + eps).sqrt().recip())
}

/// How affine parameters index into a normalization group.
enum GroupAffine {
    /// gamma/beta indexed by position inside the group (layer norm).
    PerElement,
    /// gamma/beta indexed by the group's channel (channel norm);
    /// the payload is the channel count.
    PerGroupChannel(usize),
}

impl GroupAffine {
    fn at<E: Elem>(&self, group: usize, t: usize, gamma: &[E], beta: &[E]) -> (E, E) {
        let i = self.param_index(group, t);
        (gamma[i], beta[i])
    }

    fn param_index(&self, group: usize, t: usize) -> usize {
        match self {
            GroupAffine::PerElement => t,
            GroupAffine::PerGroupChannel(c) => group % c,
        }
    }
}

/// Per-pixel argmax over the channel axis of [N, C, H, W] logits.
pub fn argmax_channel<E: Elem>(logits: &Tensor<E>) -> Result<Vec<u8>> {
    if logits.rank() != 4 {
        return Err(Error::dim(format!(
            "argmax_channel expects NCHW, got {:?}",
            logits.shape()
        )));
    }
    let (n, c, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let spatial = h * w;
    let ld = logits.data();
    let mut out = vec![0u8; n * spatial];
    for ni in 0..n {
        for s in 0..spatial {
            let mut best = 0usize;
            let mut bv = ld[(ni * c) * spatial + s];
            for ci in 1..c {
                let v = ld[(ni * c + ci) * spatial + s];
                if v > bv {
                    bv = v;
                    best = ci;
                }
            }
            out[ni * spatial + s] = best as u8;
        }
    }
    Ok(out)
}
