//! Spatial ops on NCHW maps: grouped 2-D convolution, adaptive average
//! pooling, bilinear resize, and patch extraction for ViT tokenization.

use super::{Elem, Graph, Tensor};
use crate::error::{Error, Result};

/// Pooling bin `i` of `n` over an extent `len` spans
/// [floor(i*len/n), ceil((i+1)*len/n)): bins cover the input with no gaps.
pub(crate) fn pool_bin(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start, end)
}

impl<E: Elem> Graph<E> {
    /// Grouped 2-D convolution with zero padding.
    /// x: [N, Cin, H, W], w: [Cout, Cin/groups, kh, kw], bias: [Cout].
    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects NCHW x and OIHW w, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, cin_g, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::dim(format!(
                "conv2d: groups {} must divide Cin {} and Cout {}",
                groups, cin, cout
            )));
        }
        if cin_g != cin / groups {
            return Err(Error::dim(format!(
                "conv2d: weight expects Cin/groups = {}, got {}",
                cin / groups,
                cin_g
            )));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} must be [{}]",
                    b.shape(),
                    cout
                )));
            }
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive".to_string()));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let cpg = cout / groups;

        let mut data = vec![E::zero(); n * cout * oh * ow];
        {
            let xd = x.data();
            let wdat = w.data();
            let bd = bias.map(|b| b.to_vec());
            for ni in 0..n {
                for co in 0..cout {
                    let gi = co / cpg;
                    let b0 = bd.as_ref().map_or(E::zero(), |b| b[co]);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b0;
                            for ci in 0..cin_g {
                                let xc = gi * cin_g + ci;
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < padding || ix - padding >= wd {
                                            continue;
                                        }
                                        let ix = ix - padding;
                                        acc = acc
                                            + xd[((ni * cin + xc) * h + iy) * wd + ix]
                                                * wdat[((co * cin_g + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                            data[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(data, &[n, cout, oh, ow])?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        if self.tracks(&inputs) {
            out.set_requires_grad(true);
            let (x, w, o) = (x.clone(), w.clone(), out.clone());
            let bias = bias.cloned();
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let xd = x.data();
                let wdat = w.data();
                let mut dx = vec![E::zero(); x.numel()];
                let mut dw = vec![E::zero(); w.numel()];
                let mut db = vec![E::zero(); cout];
                for ni in 0..n {
                    for co in 0..cout {
                        let gi = co / cpg;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = go[((ni * cout + co) * oh + oy) * ow + ox];
                                db[co] = db[co] + g;
                                for ci in 0..cin_g {
                                    let xc = gi * cin_g + ci;
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < padding || iy - padding >= h {
                                            continue;
                                        }
                                        let iy = iy - padding;
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < padding || ix - padding >= wd {
                                                continue;
                                            }
                                            let ix = ix - padding;
                                            let xi = ((ni * cin + xc) * h + iy) * wd + ix;
                                            let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                                            dx[xi] = dx[xi] + g * wdat[wi];
                                            dw[wi] = dw[wi] + g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xd);
                drop(wdat);
                x.accum_grad(&dx);
                w.accum_grad(&dw);
                if let Some(b) = bias {
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Adaptive average pooling to (out_h, out_w); each output cell is the
    /// mean over its bin.
    pub fn adaptive_avg_pool2d(
        &self,
        x: &Tensor<E>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!(
                "adaptive_avg_pool2d expects NCHW, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::dim(format!(
                "adaptive_avg_pool2d: output {}x{} invalid for input {}x{}",
                out_h, out_w, h, w
            )));
        }
        let mut data = vec![E::zero(); n * c * out_h * out_w];
        {
            let xd = x.data();
            for nc in 0..n * c {
                let base = nc * h * w;
                for oy in 0..out_h {
                    let (y0, y1) = pool_bin(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1) = pool_bin(ox, out_w, w);
                        let mut acc = E::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc = acc + xd[base + iy * w + ix];
                            }
                        }
                        let area = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        data[(nc * out_h + oy) * out_w + ox] = acc / area;
                    }
                }
            }
        }
        let out = Tensor::from_vec(data, &[n, c, out_h, out_w])?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let mut dx = vec![E::zero(); x.numel()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for oy in 0..out_h {
                        let (y0, y1) = pool_bin(oy, out_h, h);
                        for ox in 0..out_w {
                            let (x0, x1) = pool_bin(ox, out_w, w);
                            let area = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let g = go[(nc * out_h + oy) * out_w + ox] / area;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dx[base + iy * w + ix] = dx[base + iy * w + ix] + g;
                                }
                            }
                        }
                    }
                }
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Bilinear resize of an NCHW map (half-pixel centers).
    pub fn upsample_bilinear(
        &self,
        x: &Tensor<E>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!(
                "upsample_bilinear expects NCHW, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample_bilinear: empty output".to_string()));
        }
        // Per-axis sample positions: (taps, weights) shared by fwd and bwd.
        let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
                    let i0 = (s.floor() as usize).min(in_len - 1);
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let mut data = vec![E::zero(); n * c * out_h * out_w];
        {
            let xd = x.data();
            for nc in 0..n * c {
                let base = nc * h * w;
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v00 = xd[base + y0 * w + x0].as_f64();
                        let v01 = xd[base + y0 * w + x1].as_f64();
                        let v10 = xd[base + y1 * w + x0].as_f64();
                        let v11 = xd[base + y1 * w + x1].as_f64();
                        let top = v00 * (1.0 - fx) + v01 * fx;
                        let bot = v10 * (1.0 - fx) + v11 * fx;
                        data[(nc * out_h + oy) * out_w + ox] =
                            E::from_f64(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
        let out = Tensor::from_vec(data, &[n, c, out_h, out_w])?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let mut dx = vec![E::zero(); x.numel()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let g = go[(nc * out_h + oy) * out_w + ox].as_f64();
                            let mut put = |iy: usize, ix: usize, wgt: f64| {
                                let i = base + iy * w + ix;
                                dx[i] = dx[i] + E::from_f64(g * wgt);
                            };
                            put(y0, x0, (1.0 - fy) * (1.0 - fx));
                            put(y0, x1, (1.0 - fy) * fx);
                            put(y1, x0, fy * (1.0 - fx));
                            put(y1, x1, fy * fx);
                        }
                    }
                }
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Non-overlapping patchification: [N, C, H, W] -> [N, T, C*p*p] with
    /// T = (H/p)*(W/p). Patch layout is channel-major, row within channel.
    pub fn extract_patches(&self, x: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!(
                "extract_patches expects NCHW, got {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::dim(format!(
                "extract_patches: {}x{} not divisible by patch {}",
                h, w, p
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let d = c * p * p;
        let mut data = vec![E::zero(); n * t * d];
        {
            let xd = x.data();
            for ni in 0..n {
                for ty in 0..gh {
                    for txi in 0..gw {
                        let tok = ty * gw + txi;
                        for ci in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let src =
                                        ((ni * c + ci) * h + ty * p + py) * w + txi * p + px;
                                    let dst = (ni * t + tok) * d + (ci * p + py) * p + px;
                                    data[dst] = xd[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(data, &[n, t, d])?;
        if self.tracks(&[x]) {
            out.set_requires_grad(true);
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(go) = o.grad() else { return };
                let mut dx = vec![E::zero(); x.numel()];
                for ni in 0..n {
                    for ty in 0..gh {
                        for txi in 0..gw {
                            let tok = ty * gw + txi;
                            for ci in 0..c {
                                for py in 0..p {
                                    for px in 0..p {
                                        let src =
                                            ((ni * c + ci) * h + ty * p + py) * w + txi * p + px;
                                        let dst = (ni * t + tok) * d + (ci * p + py) * p + px;
                                        dx[src] = dx[src] + go[dst];
                                    }
                                }
                            }
                        }
                    }
                }
                x.accum_grad(&dx);
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_pointwise_scaling() {
        let g = Graph::<f32>::new();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0f32);
        let y = g.conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), vec![2.0; 9]);
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        // 4x4 ones, 3x3 ones kernel, stride 2, pad 1 -> 2x2; the corner
        // window over the zero-padded input covers four ones.
        let g = Graph::<f32>::new();
        let x = Tensor::full(&[1, 1, 4, 4], 1.0f32);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let y = g.conv2d(&x, &w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let got = y.to_vec();
        assert_eq!(got[0], 4.0);

        // independent sliding-window oracle over the padded input
        let oracle = |oy: usize, ox: usize| -> f32 {
            let mut acc = 0.0;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        acc += 1.0;
                    }
                }
            }
            acc
        };
        for oy in 0..2 {
            for ox in 0..2 {
                assert_eq!(got[oy * 2 + ox], oracle(oy, ox));
            }
        }
    }

    #[test]
    fn conv2d_depthwise_per_channel_scaling() {
        let g = Graph::<f32>::new();
        let x = Tensor::full(&[1, 2, 2, 2], 1.0f32);
        let w = Tensor::from_vec(vec![2.0, 3.0], &[2, 1, 1, 1]).unwrap();
        let y = g.conv2d(&x, &w, None, 1, 0, 2).unwrap();
        let d = y.to_vec();
        assert_eq!(&d[..4], &[2.0; 4]);
        assert_eq!(&d[4..], &[3.0; 4]);
    }

    #[test]
    fn conv2d_rejects_bad_groups() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 1, 1, 1]);
        assert!(g.conv2d(&x, &w, None, 1, 0, 2).is_err());
    }

    #[test]
    fn conv2d_1x1_equals_per_pixel_matmul() {
        // groups=1, 1x1 kernel, stride 1 is a per-pixel channel matmul
        let g = Graph::<f32>::new();
        let x = Tensor::from_vec((0..2 * 3 * 2 * 2).map(|i| i as f32 * 0.25).collect(), &[2, 3, 2, 2]).unwrap();
        let w = Tensor::from_vec((0..4 * 3).map(|i| (i as f32) * 0.1 - 0.5).collect(), &[4, 3, 1, 1]).unwrap();
        let y = g.conv2d(&x, &w, None, 1, 0, 1).unwrap();

        // oracle: tokens [N*H*W, Cin] x W^T [Cin, Cout]
        let tokens = g.permute(&x, &[0, 2, 3, 1]).unwrap();
        let tokens = g.reshape(&tokens, &[2 * 2 * 2, 3]).unwrap();
        let wm = g.reshape(&w, &[4, 3]).unwrap();
        let wt = g.permute(&wm, &[1, 0]).unwrap();
        let my = g.matmul(&tokens, &wt).unwrap();
        let my = g.reshape(&my, &[2, 2, 2, 4]).unwrap();
        let my = g.permute(&my, &[0, 3, 1, 2]).unwrap();
        let (a, b) = (y.to_vec(), my.to_vec());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn pool_preserves_constants_and_identity() {
        let g = Graph::<f32>::new();
        let x = Tensor::full(&[1, 1, 4, 4], 5.0f32);
        let y = g.adaptive_avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0; 4]);

        let x = Tensor::from_vec((0..16).map(|i| i as f32).collect(), &[1, 1, 4, 4]).unwrap();
        let y = g.adaptive_avg_pool2d(&x, 4, 4).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn pool_global_mean() {
        let g = Graph::<f32>::new();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = g.adaptive_avg_pool2d(&x, 1, 1).unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
    }

    #[test]
    fn pool_rejects_upsizing() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(g.adaptive_avg_pool2d(&x, 3, 2).is_err());
    }

    #[test]
    fn pool_mean_preservation_when_divisible() {
        let g = Graph::<f32>::new();
        let x = Tensor::from_vec((0..36).map(|i| (i as f32).sin()).collect(), &[1, 1, 6, 6]).unwrap();
        let y = g.adaptive_avg_pool2d(&x, 3, 2).unwrap();
        let mean_in: f32 = x.to_vec().iter().sum::<f32>() / 36.0;
        let mean_out: f32 = y.to_vec().iter().sum::<f32>() / 6.0;
        assert!((mean_in - mean_out).abs() < 1e-5);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = Graph::<f32>::new();
        let x = Tensor::full(&[1, 2, 3, 3], 7.0f32);
        let y = g.upsample_bilinear(&x, 6, 9).unwrap();
        for v in y.to_vec() {
            assert!((v - 7.0).abs() < 1e-5);
        }
    }

    #[test]
    fn extract_patches_counts_tokens() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let t = g.extract_patches(&x, 8).unwrap();
        assert_eq!(t.shape(), &[1, 16, 3 * 64]);
        assert!(g.extract_patches(&x, 5).is_err());
    }
}
