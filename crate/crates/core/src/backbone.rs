//! A randomly initialized, permanently frozen vision-transformer encoder.
//! Exposes per-layer token features and an injection hook so adapting
//! modules can replace a layer's output before it reaches the next layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSet, ParamSpec};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Elem, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Optional preset name; "toy" or "large-shape". Applies the
    /// (depth, embed_dim, heads) trio, leaving the other fields as given.
    pub preset: Option<String>,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Side length of the (square) input the positional embedding is sized
    /// for.
    pub img_size: usize,
    /// Use the tanh GELU approximation instead of the exact Gaussian CDF.
    pub gelu_tanh: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            preset: None,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            patch_size: 8,
            in_channels: 3,
            img_size: 64,
            gelu_tanh: false,
        }
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig::default()
    }

    /// Matches the published DINOv2-Large shape (depth 24, width 1024),
    /// used for parameter accounting only.
    pub fn large_shape() -> Self {
        BackboneConfig {
            depth: 24,
            embed_dim: 1024,
            heads: 16,
            img_size: 512,
            ..BackboneConfig::default()
        }
    }

    /// Applies the preset (if any) and validates invariants.
    pub fn resolved(&self) -> Result<BackboneConfig> {
        let mut cfg = self.clone();
        if let Some(name) = &self.preset {
            let (depth, d, heads) = match name.as_str() {
                "toy" => (4, 64, 4),
                "large-shape" => (24, 1024, 16),
                other => {
                    return Err(Error::config(format!(
                        "unknown backbone preset \"{other}\" (expected \"toy\" or \"large-shape\")"
                    )))
                }
            };
            cfg.depth = depth;
            cfg.embed_dim = d;
            cfg.heads = heads;
        }
        if cfg.depth < 1 {
            return Err(Error::config("backbone depth must be >= 1".to_string()));
        }
        if cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by heads {}",
                cfg.embed_dim, cfg.heads
            )));
        }
        if cfg.patch_size == 0 || cfg.img_size % cfg.patch_size != 0 {
            return Err(Error::config(format!(
                "img_size {} must be divisible by patch_size {}",
                cfg.img_size, cfg.patch_size
            )));
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.img_size / self.patch_size,
            self.img_size / self.patch_size,
        )
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Every backbone parameter, in materialization order. All frozen.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let ppc = self.patch_size * self.patch_size * self.in_channels;
        let hidden = self.mlp_hidden();
        let mut specs = vec![
            ParamSpec::new(
                "patch_embed.weight",
                &[ppc, d],
                false,
                Init::KaimingNormal { fan_in: ppc },
            ),
            ParamSpec::new("patch_embed.bias", &[d], false, Init::Zeros),
            ParamSpec::new(
                "pos_embed",
                &[self.tokens(), d],
                false,
                Init::Normal { std: 0.02 },
            ),
        ];
        for j in 0..self.depth {
            let p = |suffix: &str, shape: &[usize], init: Init| {
                ParamSpec::new(format!("layers.{j}.{suffix}"), shape, false, init)
            };
            specs.extend([
                p("ln1.gamma", &[d], Init::Ones),
                p("ln1.beta", &[d], Init::Zeros),
                p("qkv.weight", &[d, 3 * d], Init::KaimingNormal { fan_in: d }),
                p("qkv.bias", &[3 * d], Init::Zeros),
                p("proj.weight", &[d, d], Init::KaimingNormal { fan_in: d }),
                p("proj.bias", &[d], Init::Zeros),
                p("ln2.gamma", &[d], Init::Ones),
                p("ln2.beta", &[d], Init::Zeros),
                p("mlp.fc1.weight", &[d, hidden], Init::KaimingNormal { fan_in: d }),
                p("mlp.fc1.bias", &[hidden], Init::Zeros),
                p("mlp.fc2.weight", &[hidden, d], Init::KaimingNormal { fan_in: hidden }),
                p("mlp.fc2.bias", &[d], Init::Zeros),
            ]);
        }
        specs
    }
}

/// Per-layer hook: returns Some(replacement) to feed a modified feature to
/// the next layer, or None to pass the layer output through unchanged.
pub type LayerHook<'a, E> = &'a mut dyn FnMut(usize, &Tensor<E>) -> Result<Option<Tensor<E>>>;

pub struct FrozenBackbone<E: Elem> {
    cfg: BackboneConfig,
    params: ParamSet<E>,
}

impl<E: Elem> FrozenBackbone<E> {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let mut rng = rng_from(derive_seed(seed, "backbone"));
        let params = ParamSet::materialize(&cfg.param_specs(), &mut rng);
        let bb = FrozenBackbone { cfg, params };
        bb.freeze_all();
        Ok(bb)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn freeze_all(&self) {
        self.params.freeze_all();
    }

    pub fn trainable_count(&self) -> u64 {
        self.params.trainable_count()
    }

    fn eps() -> E {
        E::from_f64(1e-5)
    }

    /// Non-overlapping patch projection plus the learned (frozen)
    /// positional embedding: [N, C, H, W] -> [N, T, d].
    pub fn patch_embed(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = (x.dim(2), x.dim(3));
        if h != self.cfg.img_size || w != self.cfg.img_size {
            return Err(Error::dim(format!(
                "backbone built for {0}x{0} inputs, got {h}x{w}",
                self.cfg.img_size
            )));
        }
        let patches = g.extract_patches(x, self.cfg.patch_size)?;
        let tok = g.matmul(&patches, self.params.get("patch_embed.weight"))?;
        let tok = g.add_suffix(&tok, self.params.get("patch_embed.bias"))?;
        g.add_suffix(&tok, self.params.get("pos_embed"))
    }

    /// One pre-norm transformer block: tokens + MHSA(LN(tokens)), then
    /// + MLP(LN(.)). The output is the layer feature F_j.
    pub fn layer_forward(&self, g: &Graph<E>, tokens: &Tensor<E>, j: usize) -> Result<Tensor<E>> {
        if j >= self.cfg.depth {
            return Err(Error::contract(format!(
                "layer index {} out of range (depth {})",
                j, self.cfg.depth
            )));
        }
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let (n, t) = (tokens.dim(0), tokens.dim(1));
        let p = |suffix: &str| self.params.get(&format!("layers.{j}.{suffix}"));

        let x1 = g.layer_norm(tokens, p("ln1.gamma"), p("ln1.beta"), Self::eps())?;
        let qkv = g.matmul(&x1, p("qkv.weight"))?;
        let qkv = g.add_suffix(&qkv, p("qkv.bias"))?;
        let parts = g.split_last(&qkv, 3)?;
        let to_heads = |g: &Graph<E>, x: &Tensor<E>| -> Result<Tensor<E>> {
            let x = g.reshape(x, &[n, t, heads, dh])?;
            g.permute(&x, &[0, 2, 1, 3])
        };
        let q = to_heads(g, &parts[0])?;
        let k = to_heads(g, &parts[1])?;
        let v = to_heads(g, &parts[2])?;
        let kt = g.permute(&k, &[0, 1, 3, 2])?;
        let scores = g.matmul(&q, &kt)?;
        let scores = g.scale(&scores, E::from_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(&scores, 3)?;
        let ctx = g.matmul(&attn, &v)?;
        let ctx = g.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(&ctx, &[n, t, d])?;
        let ctx = g.matmul(&ctx, p("proj.weight"))?;
        let ctx = g.add_suffix(&ctx, p("proj.bias"))?;
        let h = g.add(tokens, &ctx)?;

        let x2 = g.layer_norm(&h, p("ln2.gamma"), p("ln2.beta"), Self::eps())?;
        let m = g.matmul(&x2, p("mlp.fc1.weight"))?;
        let m = g.add_suffix(&m, p("mlp.fc1.bias"))?;
        let m = if self.cfg.gelu_tanh {
            g.gelu_tanh(&m)?
        } else {
            g.gelu(&m)?
        };
        let m = g.matmul(&m, p("mlp.fc2.weight"))?;
        let m = g.add_suffix(&m, p("mlp.fc2.bias"))?;
        g.add(&h, &m)
    }

    /// Runs the full encoder. For each layer j the pre-hook feature F_j is
    /// collected; when the hook returns a replacement it becomes the input
    /// to layer j+1. Returns the final token stream and all pre-hook
    /// features.
    pub fn forward_with_hooks(
        &self,
        g: &Graph<E>,
        x: &Tensor<E>,
        mut hook: LayerHook<'_, E>,
    ) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let mut tokens = self.patch_embed(g, x)?;
        let mut features = Vec::with_capacity(self.cfg.depth);
        for j in 0..self.cfg.depth {
            let fj = self.layer_forward(g, &tokens, j)?;
            features.push(fj.clone());
            tokens = match hook(j, &fj)? {
                Some(replacement) => {
                    if replacement.shape() != fj.shape() {
                        return Err(Error::dim(format!(
                            "hook at layer {} returned shape {:?}, expected {:?}",
                            j,
                            replacement.shape(),
                            fj.shape()
                        )));
                    }
                    replacement
                }
                None => fj,
            };
        }
        Ok((tokens, features))
    }

    /// Hook-free forward.
    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        self.forward_with_hooks(g, x, &mut |_, _| Ok(None))
    }
}

impl FrozenBackbone<f32> {
    pub fn checksum(&self) -> [u8; 32] {
        self.params.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            embed_dim: 8,
            heads: 2,
            img_size: 16,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn patch_embed_token_counts() {
        let cfg = BackboneConfig {
            img_size: 32,
            ..tiny_cfg()
        };
        let bb = FrozenBackbone::<f32>::new(&cfg, 42).unwrap();
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let tok = bb.patch_embed(&g, &x).unwrap();
        assert_eq!(tok.shape(), &[1, 16, 8]);

        let cfg = BackboneConfig {
            img_size: 256,
            patch_size: 16,
            ..tiny_cfg()
        };
        assert_eq!(cfg.tokens(), 256);
    }

    #[test]
    fn zero_image_zero_params_gives_zero_tokens() {
        let bb = FrozenBackbone::<f32>::new(&tiny_cfg(), 42).unwrap();
        for (_, t) in bb.params().iter() {
            t.with_data_mut(|d| d.fill(0.0));
        }
        let g = Graph::no_grad();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let tok = bb.patch_embed(&g, &x).unwrap();
        assert!(tok.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_forward_preserves_shape_and_zeroed_weights_are_identity() {
        let bb = FrozenBackbone::<f32>::new(&tiny_cfg(), 42).unwrap();
        let g = Graph::no_grad();
        let x = Tensor::from_vec((0..2 * 4 * 8).map(|i| (i as f32 * 0.37).sin()).collect(), &[2, 4, 8]).unwrap();
        let y = bb.layer_forward(&g, &x, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(bb.layer_forward(&g, &x, 5).is_err());

        // residual path only: zero every weight (including LN gammas)
        for (_, t) in bb.params().iter() {
            t.with_data_mut(|d| d.fill(0.0));
        }
        let y = bb.layer_forward(&g, &x, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn forward_is_seed_deterministic() {
        let a = FrozenBackbone::<f32>::new(&tiny_cfg(), 7).unwrap();
        let b = FrozenBackbone::<f32>::new(&tiny_cfg(), 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let x = Tensor::from_vec((0..3 * 16 * 16).map(|i| (i as f32 * 0.01).cos()).collect(), &[1, 3, 16, 16]).unwrap();
        let g = Graph::no_grad();
        let (ya, _) = a.forward(&g, &x).unwrap();
        let (yb, _) = b.forward(&g, &x).unwrap();
        assert_eq!(ya.to_vec(), yb.to_vec());
    }

    #[test]
    fn hooks_bypass_and_counting() {
        let cfg = BackboneConfig {
            depth: 24,
            embed_dim: 8,
            heads: 2,
            img_size: 16,
            ..BackboneConfig::default()
        };
        let bb = FrozenBackbone::<f32>::new(&cfg, 3).unwrap();
        let x = Tensor::from_vec((0..3 * 16 * 16).map(|i| (i as f32 * 0.05).sin()).collect(), &[1, 3, 16, 16]).unwrap();
        let g = Graph::no_grad();
        let (plain, feats) = bb.forward(&g, &x).unwrap();
        assert_eq!(feats.len(), 24);

        // identity hook leaves the stream bitwise unchanged
        let (hooked, _) = bb
            .forward_with_hooks(&g, &x, &mut |_, f| Ok(Some(f.clone())))
            .unwrap();
        assert_eq!(plain.to_vec(), hooked.to_vec());

        // a hook on {0, 6, 12, 18} fires exactly four times
        let schedule = [0usize, 6, 12, 18];
        let mut calls = 0usize;
        bb.forward_with_hooks(&g, &x, &mut |j, f| {
            if schedule.contains(&j) {
                calls += 1;
                Ok(Some(f.clone()))
            } else {
                Ok(None)
            }
        })
        .unwrap();
        assert_eq!(calls, 4);
    }

    #[test]
    fn wrong_hook_shape_names_layer() {
        let bb = FrozenBackbone::<f32>::new(&tiny_cfg(), 3).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let g = Graph::no_grad();
        let err = bb
            .forward_with_hooks(&g, &x, &mut |j, _| {
                if j == 1 {
                    Ok(Some(Tensor::zeros(&[1, 2, 8])))
                } else {
                    Ok(None)
                }
            })
            .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn frozen_backbone_has_zero_trainables() {
        let bb = FrozenBackbone::<f32>::new(&tiny_cfg(), 42).unwrap();
        assert_eq!(bb.trainable_count(), 0);
    }

    #[test]
    fn presets_resolve() {
        let cfg = BackboneConfig {
            preset: Some("large-shape".to_string()),
            ..BackboneConfig::default()
        };
        let r = cfg.resolved().unwrap();
        assert_eq!((r.depth, r.embed_dim, r.heads), (24, 1024, 16));
        let bad = BackboneConfig {
            preset: Some("huge".to_string()),
            ..BackboneConfig::default()
        };
        assert!(bad.resolved().is_err());
    }
}
