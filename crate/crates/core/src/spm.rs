//! Spatial perception module: a trainable ConvNet pathway. A stem of two
//! depthwise-separable convolutions keeps full resolution; k stride-2
//! blocks produce multi-scale features; a parameter-free aggregator pools
//! every scale to the smallest map and sums them into the dense context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSet, ParamSpec};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Elem, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpmConfig {
    pub stem_channels: usize,
    pub context_channels: usize,
    pub num_blocks: usize,
    /// Use the tanh GELU approximation instead of the exact Gaussian CDF.
    pub gelu_tanh: bool,
}

impl Default for SpmConfig {
    fn default() -> Self {
        SpmConfig {
            stem_channels: 32,
            context_channels: 64,
            num_blocks: 4,
            gelu_tanh: false,
        }
    }
}

impl SpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_channels == 0 || self.stem_channels == 0 {
            return Err(Error::config("SPM channel counts must be positive".to_string()));
        }
        if self.num_blocks == 0 {
            return Err(Error::config("SPM needs at least one block".to_string()));
        }
        Ok(())
    }

    fn block_in(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_channels
        } else {
            self.context_channels
        }
    }

    /// Stem specs; tiny (a few hundred parameters at the defaults).
    fn stem_specs(&self, in_channels: usize) -> Vec<ParamSpec> {
        let cp = self.stem_channels;
        vec![
            // 1x1 depthwise-separable conv: channel fusion into C'
            ParamSpec::new("stem.dw1.weight", &[in_channels, 1, 1, 1], true, Init::KaimingNormal { fan_in: 1 }),
            ParamSpec::new("stem.dw1.bias", &[in_channels], true, Init::Zeros),
            ParamSpec::new("stem.pw1.weight", &[cp, in_channels, 1, 1], true, Init::KaimingNormal { fan_in: in_channels }),
            ParamSpec::new("stem.pw1.bias", &[cp], true, Init::Zeros),
            // 3x3 depthwise-separable conv: local spatial extraction
            ParamSpec::new("stem.dw2.weight", &[cp, 1, 3, 3], true, Init::KaimingNormal { fan_in: 9 }),
            ParamSpec::new("stem.dw2.bias", &[cp], true, Init::Zeros),
            ParamSpec::new("stem.pw2.weight", &[cp, cp, 1, 1], true, Init::KaimingNormal { fan_in: cp }),
            ParamSpec::new("stem.pw2.bias", &[cp], true, Init::Zeros),
        ]
    }

    fn block_specs(&self, i: usize) -> Vec<ParamSpec> {
        let cin = self.block_in(i);
        let cout = self.context_channels;
        let p = |suffix: &str, shape: &[usize], init: Init| {
            ParamSpec::new(format!("blocks.{i}.{suffix}"), shape, true, init)
        };
        vec![
            p("dw.weight", &[cin, 1, 3, 3], Init::KaimingNormal { fan_in: 9 }),
            p("dw.bias", &[cin], Init::Zeros),
            p("pw.weight", &[cout, cin, 1, 1], Init::KaimingNormal { fan_in: cin }),
            p("pw.bias", &[cout], Init::Zeros),
            p("norm.gamma", &[cout], Init::Ones),
            p("norm.beta", &[cout], Init::Zeros),
        ]
    }

    pub fn param_specs(&self, in_channels: usize, use_blocks: bool) -> Vec<ParamSpec> {
        let mut specs = self.stem_specs(in_channels);
        if use_blocks {
            for i in 0..self.num_blocks {
                specs.extend(self.block_specs(i));
            }
        }
        specs
    }

    /// Closed-form parameter count of one block: depthwise 3x3 (+bias),
    /// pointwise 1x1 (+bias), per-channel norm affine.
    pub fn block_param_count(&self, i: usize) -> u64 {
        let cin = self.block_in(i) as u64;
        let cout = self.context_channels as u64;
        9 * cin + cin + cin * cout + cout + 2 * cout
    }
}

pub struct Spm<E: Elem> {
    cfg: SpmConfig,
    use_blocks: bool,
    params: ParamSet<E>,
}

impl<E: Elem> Spm<E> {
    pub fn new(cfg: &SpmConfig, in_channels: usize, use_blocks: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(seed, "spm"));
        let params = ParamSet::materialize(&cfg.param_specs(in_channels, use_blocks), &mut rng);
        Ok(Spm {
            cfg: cfg.clone(),
            use_blocks,
            params,
        })
    }

    pub fn config(&self) -> &SpmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    /// Two depthwise-separable convolutions; spatial dims preserved.
    pub fn stem_forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let cin = x.dim(1);
        let h = g.conv2d(x, self.params.get("stem.dw1.weight"), Some(self.params.get("stem.dw1.bias")), 1, 0, cin)?;
        let h = g.conv2d(&h, self.params.get("stem.pw1.weight"), Some(self.params.get("stem.pw1.bias")), 1, 0, 1)?;
        let cp = h.dim(1);
        let h = g.conv2d(&h, self.params.get("stem.dw2.weight"), Some(self.params.get("stem.dw2.bias")), 1, 1, cp)?;
        g.conv2d(&h, self.params.get("stem.pw2.weight"), Some(self.params.get("stem.pw2.bias")), 1, 0, 1)
    }

    /// One Pure-ConvNet block: depthwise 3x3 stride 2 -> pointwise 1x1 ->
    /// per-channel norm -> GELU. Halves the spatial dims (ceil for odd).
    pub fn block_forward(&self, g: &Graph<E>, f: &Tensor<E>, i: usize) -> Result<Tensor<E>> {
        if i >= self.cfg.num_blocks || !self.use_blocks {
            return Err(Error::contract(format!("block index {i} out of range")));
        }
        let (h, w) = (f.dim(2), f.dim(3));
        if h < 2 && w < 2 {
            return Err(Error::contract(format!(
                "block {i}: input is already {h}x{w}; the log2 bound on k was violated"
            )));
        }
        let cin = f.dim(1);
        let p = |suffix: &str| self.params.get(&format!("blocks.{i}.{suffix}"));
        let out = g.conv2d(f, p("dw.weight"), Some(p("dw.bias")), 2, 1, cin)?;
        let out = g.conv2d(&out, p("pw.weight"), Some(p("pw.bias")), 1, 0, 1)?;
        let out = g.channel_norm(&out, p("norm.gamma"), p("norm.beta"), E::from_f64(1e-5))?;
        if self.cfg.gelu_tanh {
            g.gelu_tanh(&out)
        } else {
            g.gelu(&out)
        }
    }

    /// Parameter-free aggregation: every feature map is adaptively
    /// average-pooled to the last (smallest) map's size, then summed.
    pub fn aggregate(&self, g: &Graph<E>, features: &[Tensor<E>]) -> Result<Tensor<E>> {
        let last = features
            .last()
            .ok_or_else(|| Error::dim("aggregate of zero features".to_string()))?;
        let c = last.dim(1);
        let (th, tw) = (last.dim(2), last.dim(3));
        let mut acc: Option<Tensor<E>> = None;
        for f in features {
            if f.dim(1) != c {
                return Err(Error::dim(format!(
                    "aggregate: channel mismatch {} vs {}",
                    f.dim(1),
                    c
                )));
            }
            let pooled = g.adaptive_avg_pool2d(f, th, tw)?;
            acc = Some(match acc {
                None => pooled,
                Some(a) => g.add(&a, &pooled)?,
            });
        }
        Ok(acc.expect("non-empty by check above"))
    }

    /// stem -> k blocks -> aggregate. Returns the dense context and the raw
    /// multi-scale features (for the single-/multi-scale strategies).
    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let k = self.cfg.num_blocks;
        let min_side = x.dim(2).min(x.dim(3));
        let bound = (min_side as f64).log2().floor() as usize;
        if k > bound {
            return Err(Error::config(format!(
                "num_blocks {k} exceeds log2 bound {bound} for {}x{} input",
                x.dim(2),
                x.dim(3)
            )));
        }
        let mut f = self.stem_forward(g, x)?;
        let mut features = Vec::with_capacity(k);
        for i in 0..k {
            f = self.block_forward(g, &f, i)?;
            features.push(f.clone());
        }
        let agg = self.aggregate(g, &features)?;
        Ok((agg, features))
    }

    /// Forward when the block chain is ablated: the stem output alone.
    pub fn stem_only_forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.stem_forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spm(k: usize) -> Spm<f32> {
        let cfg = SpmConfig {
            num_blocks: k,
            ..SpmConfig::default()
        };
        Spm::new(&cfg, 3, true, 42).unwrap()
    }

    #[test]
    fn stem_preserves_spatial_dims() {
        let s = spm(2);
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[2, 3, 24, 20]);
        let y = s.stem_forward(&g, &x).unwrap();
        assert_eq!(y.shape(), &[2, 32, 24, 20]);
    }

    #[test]
    fn stem_is_linear_at_zero() {
        let s = spm(1);
        for (name, t) in s.params().iter() {
            if name.contains("bias") {
                t.with_data_mut(|d| d.fill(0.0));
            }
        }
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let y = s.stem_forward(&g, &x).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blocks_halve_spatial_dims() {
        let s = spm(1);
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 32, 64, 64]);
        let y = s.block_forward(&g, &x, 0).unwrap();
        assert_eq!(&y.shape()[2..], &[32, 32]);

        // odd dims round up (ceil division with pad 1)
        let x = Tensor::zeros(&[1, 32, 7, 7]);
        let y = s.block_forward(&g, &x, 0).unwrap();
        assert_eq!(&y.shape()[2..], &[4, 4]);

        let x = Tensor::zeros(&[1, 32, 1, 1]);
        assert!(s.block_forward(&g, &x, 0).is_err());
    }

    #[test]
    fn four_blocks_on_512_give_32x32_context() {
        let cfg = SpmConfig {
            stem_channels: 4,
            context_channels: 4,
            num_blocks: 4,
            ..SpmConfig::default()
        };
        let s: Spm<f32> = Spm::new(&cfg, 3, true, 1).unwrap();
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 3, 512, 512]);
        let (agg, feats) = s.forward(&g, &x).unwrap();
        assert_eq!(feats.len(), 4);
        assert_eq!(agg.shape(), &[1, 4, 32, 32]);
    }

    #[test]
    fn block_param_count_closed_form() {
        // Cin = Cout = 64: depthwise 3*3*64 + 64, pointwise 64*64 + 64,
        // norm 2*64 -> 4,928 per the block structure above.
        let cfg = SpmConfig {
            stem_channels: 64,
            context_channels: 64,
            num_blocks: 1,
            ..SpmConfig::default()
        };
        assert_eq!(cfg.block_param_count(0), 576 + 64 + 4096 + 64 + 128);
        let s: Spm<f32> = Spm::new(&cfg, 3, true, 1).unwrap();
        let counted: u64 = s
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("blocks.0."))
            .map(|(_, t)| t.numel() as u64)
            .sum();
        assert_eq!(counted, cfg.block_param_count(0));
    }

    #[test]
    fn aggregate_identity_and_constant_sum() {
        let s = spm(1);
        let g = Graph::no_grad();
        let single = Tensor::from_vec((0..32).map(|i| i as f32).collect(), &[1, 2, 4, 4]).unwrap();
        let out = s.aggregate(&g, &[single.clone()]).unwrap();
        assert_eq!(out.to_vec(), single.to_vec());

        let a = Tensor::full(&[1, 2, 8, 8], 1.0f32);
        let b = Tensor::full(&[1, 2, 4, 4], 2.0f32);
        let out = s.aggregate(&g, &[a, b]).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4, 4]);
        assert!(out.to_vec().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn aggregate_rejects_channel_mismatch() {
        let s = spm(1);
        let g = Graph::no_grad();
        let a = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let b = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(s.aggregate(&g, &[a, b]).is_err());
    }

    #[test]
    fn aggregate_is_linear() {
        let s = spm(1);
        let g = Graph::no_grad();
        let mk = |scale: f32| {
            vec![
                Tensor::from_vec((0..32).map(|i| scale * (i as f32 * 0.3).sin()).collect(), &[1, 2, 4, 4]).unwrap(),
                Tensor::from_vec((0..8).map(|i| scale * (i as f32 * 0.7).cos()).collect(), &[1, 2, 2, 2]).unwrap(),
            ]
        };
        let one = s.aggregate(&g, &mk(1.0)).unwrap();
        let three = s.aggregate(&g, &mk(3.0)).unwrap();
        for (a, b) in one.to_vec().iter().zip(three.to_vec()) {
            assert!((3.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn aggregator_adds_no_parameters() {
        // trainable count is identical whether or not aggregation runs:
        // it reads no ParamSet entries at all.
        let s = spm(2);
        let before = s.params().trainable_count();
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let _ = s.forward(&g, &x).unwrap();
        assert_eq!(s.params().trainable_count(), before);
        let specs = s.cfg.param_specs(3, true);
        assert!(specs.iter().all(|sp| !sp.name.contains("agg")));
    }

    #[test]
    fn gradient_reaches_every_spm_parameter() {
        let cfg = SpmConfig {
            stem_channels: 4,
            context_channels: 4,
            num_blocks: 2,
            ..SpmConfig::default()
        };
        let s: Spm<f32> = Spm::new(&cfg, 3, true, 9).unwrap();
        let g = Graph::new();
        let x = Tensor::from_vec((0..3 * 16 * 16).map(|i| (i as f32 * 0.13).sin()).collect(), &[1, 3, 16, 16]).unwrap();
        let (agg, _) = s.forward(&g, &x).unwrap();
        let sq = g.mul(&agg, &agg).unwrap();
        let loss = g.sum(&sq).unwrap();
        g.backward(&loss).unwrap();
        for (name, t) in s.params().iter() {
            let grad = t.grad().unwrap_or_else(|| panic!("no grad on {name}"));
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "all-zero grad on {name}"
            );
        }
    }
}
