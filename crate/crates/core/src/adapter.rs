//! The trainable adapting module: single-head cross-attention from frozen
//! backbone tokens (queries) to the flattened SPM context (keys/values),
//! followed by a low-rank output map and a residual add.
//!
//! Parameter layout: the key/value projections of the context are shared
//! across all interaction points (the context itself is the same tensor at
//! every injection), while the query projection and the output map are
//! low-rank pairs, one set per interaction point when `share_weights` is
//! off. This is what keeps the per-interaction cost near 4*d*r and the
//! full-model budget inside the published trainable-parameter envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSet, ParamSpec};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Elem, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Channel width of the SPM context fed as keys/values.
    pub context_channels: usize,
    /// Rank of the query and output low-rank pairs.
    pub rank: usize,
    /// Number of interaction points; None means one per backbone layer.
    pub interaction_count: Option<usize>,
    /// One adapter instance reused at every interaction point (true), or
    /// distinct weights per point (false).
    pub share_weights: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            context_channels: 64,
            rank: 16,
            interaction_count: None,
            share_weights: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, embed_dim: usize, depth: usize) -> Result<usize> {
        if self.rank == 0 || self.rank > embed_dim {
            return Err(Error::config(format!(
                "rank {} must be in 1..={}",
                self.rank, embed_dim
            )));
        }
        let n = self.interaction_count.unwrap_or(depth);
        if n == 0 || n > depth {
            return Err(Error::config(format!(
                "interaction count {} must be in 1..=depth {}",
                n, depth
            )));
        }
        Ok(n)
    }

    fn instances(&self, n_interactions: usize) -> usize {
        if self.share_weights {
            1
        } else {
            n_interactions
        }
    }

    pub fn param_specs(&self, embed_dim: usize, n_interactions: usize) -> Vec<ParamSpec> {
        let d = embed_dim;
        let c = self.context_channels;
        let r = self.rank;
        let mut specs = vec![
            ParamSpec::new("adapter.k_proj.weight", &[c, d], true, Init::KaimingNormal { fan_in: c }),
            ParamSpec::new("adapter.v_proj.weight", &[c, d], true, Init::KaimingNormal { fan_in: c }),
        ];
        for i in 0..self.instances(n_interactions) {
            let p = |suffix: &str, shape: &[usize], init: Init| {
                ParamSpec::new(format!("adapter.{i}.{suffix}"), shape, true, init)
            };
            specs.extend([
                p("q_lr.down", &[d, r], Init::KaimingNormal { fan_in: d }),
                p("q_lr.up", &[r, d], Init::KaimingNormal { fan_in: r }),
                p("out_lr.down", &[d, r], Init::KaimingNormal { fan_in: d }),
                // zero output projection: the adapter starts as the identity
                p("out_lr.up", &[r, d], Init::Zeros),
            ]);
        }
        specs
    }

    /// Closed-form trainable count: shared K/V projections (2*C*d) plus
    /// 4*d*r per distinct instance.
    pub fn param_count(&self, embed_dim: usize, n_interactions: usize) -> u64 {
        let d = embed_dim as u64;
        let c = self.context_channels as u64;
        let r = self.rank as u64;
        2 * c * d + self.instances(n_interactions) as u64 * 4 * d * r
    }
}

pub struct AdaptingModule<E: Elem> {
    cfg: AdapterConfig,
    embed_dim: usize,
    n_interactions: usize,
    params: ParamSet<E>,
}

impl<E: Elem> AdaptingModule<E> {
    pub fn new(cfg: &AdapterConfig, embed_dim: usize, depth: usize, seed: u64) -> Result<Self> {
        let n = cfg.validate(embed_dim, depth)?;
        let mut rng = rng_from(derive_seed(seed, "adapter"));
        let params = ParamSet::materialize(&cfg.param_specs(embed_dim, n), &mut rng);
        Ok(AdaptingModule {
            cfg: cfg.clone(),
            embed_dim,
            n_interactions: n,
            params,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn n_interactions(&self) -> usize {
        self.n_interactions
    }

    fn instance(&self, idx: usize) -> usize {
        if self.cfg.share_weights {
            0
        } else {
            idx
        }
    }

    /// Flattens an [N, C, Hk, Wk] context map into [N, M, C] tokens.
    pub fn context_tokens(&self, g: &Graph<E>, f: &Tensor<E>) -> Result<Tensor<E>> {
        if f.rank() != 4 {
            return Err(Error::dim(format!(
                "context must be NCHW, got {:?}",
                f.shape()
            )));
        }
        let (n, c, h, w) = (f.dim(0), f.dim(1), f.dim(2), f.dim(3));
        let t = g.permute(f, &[0, 2, 3, 1])?;
        g.reshape(&t, &[n, h * w, c])
    }

    /// K and V from context tokens [N, M, C]; shared across interactions.
    pub fn project_kv(&self, g: &Graph<E>, ctx: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        if ctx.dim(ctx.rank() - 1) != self.cfg.context_channels {
            return Err(Error::dim(format!(
                "context channel {} != configured {}",
                ctx.dim(ctx.rank() - 1),
                self.cfg.context_channels
            )));
        }
        let k = g.matmul(ctx, self.params.get("adapter.k_proj.weight"))?;
        let v = g.matmul(ctx, self.params.get("adapter.v_proj.weight"))?;
        Ok((k, v))
    }

    /// Low-rank query projection of backbone tokens for interaction `idx`.
    pub fn project_q(&self, g: &Graph<E>, f_jt: &Tensor<E>, idx: usize) -> Result<Tensor<E>> {
        let i = self.instance(idx);
        let down = g.matmul(f_jt, self.params.get(&format!("adapter.{i}.q_lr.down")))?;
        g.matmul(&down, self.params.get(&format!("adapter.{i}.q_lr.up")))
    }

    /// Full Q/K/V projection from backbone tokens and a 4-D context map.
    pub fn project_qkv(
        &self,
        g: &Graph<E>,
        f_jt: &Tensor<E>,
        f_agg: &Tensor<E>,
        idx: usize,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let q = self.project_q(g, f_jt, idx)?;
        let ctx = self.context_tokens(g, f_agg)?;
        let (k, v) = self.project_kv(g, &ctx)?;
        Ok((q, k, v))
    }

    /// Single-head cross-attention, returning both the output O and the
    /// row-stochastic attention weights S.
    pub fn attention(
        &self,
        g: &Graph<E>,
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let d = q.dim(q.rank() - 1);
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.matmul(q, &kt)?;
        let scores = g.scale(&scores, E::from_f64(1.0 / (d as f64).sqrt()))?;
        let s = g.softmax(&scores, scores.rank() - 1)?;
        let o = g.matmul(&s, v)?;
        Ok((o, s))
    }

    /// O = S * V with S = Softmax(Q K^T / sqrt(d)).
    pub fn cross_attention(
        &self,
        g: &Graph<E>,
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        Ok(self.attention(g, q, k, v)?.0)
    }

    /// Bias-free rank-<=r map: z -> (z W_down) W_up. No activation.
    pub fn low_rank_map(&self, g: &Graph<E>, z: &Tensor<E>, idx: usize) -> Result<Tensor<E>> {
        let i = self.instance(idx);
        let down = g.matmul(z, self.params.get(&format!("adapter.{i}.out_lr.down")))?;
        g.matmul(&down, self.params.get(&format!("adapter.{i}.out_lr.up")))
    }

    /// Full adapt step against precomputed K/V (the model computes K and V
    /// once per forward and reuses them at every interaction point).
    pub fn adapt_with_kv(
        &self,
        g: &Graph<E>,
        f_jt: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        idx: usize,
    ) -> Result<Tensor<E>> {
        let q = self.project_q(g, f_jt, idx)?;
        let o = self.cross_attention(g, &q, k, v)?;
        let m = self.low_rank_map(g, &o, idx)?;
        g.add(&m, f_jt)
    }

    /// The adapted feature for one interaction: project, attend, map,
    /// residual-add onto the backbone feature.
    pub fn adapt(
        &self,
        g: &Graph<E>,
        f_jt: &Tensor<E>,
        f_agg: &Tensor<E>,
        idx: usize,
    ) -> Result<Tensor<E>> {
        let ctx = self.context_tokens(g, f_agg)?;
        let (k, v) = self.project_kv(g, &ctx)?;
        self.adapt_with_kv(g, f_jt, &k, &v, idx)
    }
}
