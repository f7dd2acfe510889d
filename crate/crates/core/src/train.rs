//! Adapter-only optimization: per-pixel cross-entropy, AdamW, the linear
//! warmup + polynomial decay learning-rate schedule, the training loop with
//! periodic validation, and checkpoint persistence.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Summary};
use crate::model::CloudAdapterNet;
use crate::optim::{AdamHyper, AdamW};
use crate::parallel::par_map;
use crate::rng::{derive_seed, rng_from, RngState, SeedRng};
use crate::tensor::ops::argmax_channel;
use crate::tensor::{Elem, Graph, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: u64,
    pub warmup_iters: u64,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub poly_power: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_interval: u64,
    pub seed: u64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: the published iteration counts scaled down
    /// 20x, with the warmup fraction (1/40 of max) and validation cadence
    /// (1/10 of max) preserved.
    fn default() -> Self {
        TrainConfig {
            max_iters: 2_000,
            warmup_iters: 50,
            base_lr: 1e-4,
            warmup_start_lr: 1e-6,
            poly_power: 0.9,
            eta_min: 0.0,
            weight_decay: 0.05,
            batch_size: 4,
            val_interval: 200,
            seed: 42,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    /// The published full-scale schedule constants.
    pub fn paper() -> Self {
        TrainConfig {
            max_iters: 40_000,
            warmup_iters: 1_000,
            val_interval: 4_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters > 0 && self.warmup_iters >= self.max_iters {
            return Err(Error::config(format!(
                "warmup_iters {} must be < max_iters {}",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.base_lr <= 0.0 || self.warmup_start_lr <= 0.0 || self.eta_min < 0.0 {
            return Err(Error::config("learning rates must be positive (eta_min >= 0)".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Learning rate at iteration t: linear from warmup_start_lr to base_lr
/// over the warmup, then polynomial decay toward eta_min.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.max_iters {
        return Err(Error::contract(format!(
            "lr_at({t}) beyond max_iters {}",
            cfg.max_iters
        )));
    }
    if t < cfg.warmup_iters {
        let frac = t as f64 / cfg.warmup_iters as f64;
        return Ok(cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac);
    }
    let span = (cfg.max_iters - cfg.warmup_iters) as f64;
    if span == 0.0 {
        return Ok(cfg.base_lr);
    }
    let progress = (t - cfg.warmup_iters) as f64 / span;
    Ok(cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 - progress).powf(cfg.poly_power))
}

/// Mean per-pixel cross-entropy over scored pixels.
pub fn cross_entropy_loss<E: Elem>(
    g: &Graph<E>,
    logits: &Tensor<E>,
    targets: &[u8],
    ignore: Option<u8>,
) -> Result<Tensor<E>> {
    g.cross_entropy(logits, targets, ignore)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// 1-based training iteration.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Validation mIoU before any step was taken (fresh runs only).
    pub initial_val_miou: Option<f64>,
    pub best_val_miou: Option<f64>,
    pub final_val_miou: Option<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,val_miou\n");
        for r in &self.rows {
            let val = r.val_miou.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.8e},{:.6},{}\n", r.iter, r.lr, r.loss, val));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<TrainLog> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "iter,lr,loss,val_miou" {
                    return Err(Error::data(format!("unexpected trainlog header: {line}")));
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::data(format!("bad trainlog row: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::data(format!("bad number in trainlog: {s}")))
            };
            rows.push(LogRow {
                iter: parts[0]
                    .parse()
                    .map_err(|_| Error::data(format!("bad iter in trainlog: {}", parts[0])))?,
                lr: parse(parts[1])?,
                loss: parse(parts[2])?,
                val_miou: if parts[3].is_empty() {
                    None
                } else {
                    Some(parse(parts[3])?)
                },
            });
        }
        let mut log = TrainLog {
            rows,
            ..TrainLog::default()
        };
        log.final_val_miou = log.rows.iter().rev().find_map(|r| r.val_miou);
        log.best_val_miou = log
            .rows
            .iter()
            .filter_map(|r| r.val_miou)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        Ok(log)
    }
}

/// Batched evaluation: per-image forward + argmax + confusion tally,
/// fanned out over the worker pool, then merged (integer counts, so the
/// reduction order cannot change the result).
pub fn evaluate(
    model: &CloudAdapterNet<f32>,
    samples: &[SceneSample],
    ignore: Option<u8>,
) -> Result<Summary> {
    let classes = model.config().num_classes;
    let per_image: Vec<Result<ConfusionMatrix>> = par_map(samples, |s| {
        let g = Graph::no_grad();
        let (c, h, w) = (s.image.dim(0), s.image.dim(1), s.image.dim(2));
        let x = Tensor::from_vec(s.image.to_vec(), &[1, c, h, w])?;
        let logits = model.forward(&g, &x)?;
        let pred = argmax_channel(&logits)?;
        let mut cm = ConfusionMatrix::new(classes, ignore);
        cm.accumulate(&pred, &s.mask.data)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(classes, ignore);
    for cm in per_image {
        total.merge(&cm?)?;
    }
    total.summarize()
}

/// Predicted mask for one sample.
pub fn predict(model: &CloudAdapterNet<f32>, sample: &SceneSample) -> Result<Vec<u8>> {
    let g = Graph::no_grad();
    let (c, h, w) = (
        sample.image.dim(0),
        sample.image.dim(1),
        sample.image.dim(2),
    );
    let x = Tensor::from_vec(sample.image.to_vec(), &[1, c, h, w])?;
    let logits = model.forward(&g, &x)?;
    argmax_channel(&logits)
}

fn stack_batch(samples: &[&SceneSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples[0];
    let (c, h, w) = (first.image.dim(0), first.image.dim(1), first.image.dim(2));
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::dim(format!(
                "ragged batch: {:?} vs {:?}",
                s.image.shape(),
                first.image.shape()
            )));
        }
        data.extend_from_slice(&s.image.data());
        targets.extend_from_slice(&s.mask.data);
    }
    Ok((
        Tensor::from_vec(data, &[samples.len(), c, h, w])?,
        targets,
    ))
}

/// Fresh training run: builds optimizer and batch RNG from the config seed
/// and runs `start_iter = 0`.
pub fn train(
    model: &CloudAdapterNet<f32>,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    let mut opt = AdamW::new(model.trainable_params(), cfg.adam)?;
    let mut rng = rng_from(derive_seed(cfg.seed, "train.batches"));
    train_loop(model, &mut opt, &mut rng, 0, None, train_set, val_set, cfg, out_dir)
}

/// Continue a loaded run from `start_iter` with restored optimizer and RNG
/// state; produces rows for the remaining iterations only.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &CloudAdapterNet<f32>,
    opt: &mut AdamW<f32>,
    rng: &mut SeedRng,
    start_iter: u64,
    resumed_best: Option<f64>,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty".to_string()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = TrainLog {
        best_val_miou: resumed_best,
        ..TrainLog::default()
    };
    if cfg.max_iters > start_iter && start_iter == 0 && !val_set.is_empty() {
        log.initial_val_miou = Some(evaluate(model, val_set, None)?.miou);
    }
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(5);

    for t in start_iter..cfg.max_iters {
        let lr = lr_at(t, cfg)?;
        let picks: Vec<&SceneSample> = (0..cfg.batch_size)
            .map(|_| &train_set[rng.random_range(0..train_set.len())])
            .collect();
        let (x, targets) = stack_batch(&picks)?;

        let g = Graph::new();
        let logits = model.forward(&g, &x)?;
        let loss = cross_entropy_loss(&g, &logits, &targets, None)?;
        let loss_val = loss.item()?.to_f64();
        if !loss_val.is_finite() {
            let tail: Vec<String> = recent.iter().map(|l| format!("{l:.6}")).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} at iter {t} (lr {lr:.3e}); recent losses [{}]",
                tail.join(", ")
            )));
        }
        if recent.len() == 5 {
            recent.pop_front();
        }
        recent.push_back(loss_val);

        g.backward(&loss)?;
        opt.step(lr, cfg.weight_decay)?;
        opt.zero_grads();

        let iter_1based = t + 1;
        let mut val_miou = None;
        if !val_set.is_empty()
            && (iter_1based % cfg.val_interval == 0 || iter_1based == cfg.max_iters)
        {
            let summary = evaluate(model, val_set, None)?;
            val_miou = Some(summary.miou);
            let improved = log.best_val_miou.is_none_or(|b| summary.miou > b);
            if improved {
                log.best_val_miou = Some(summary.miou);
                if let Some(dir) = out_dir {
                    let state = RngState::capture(rng);
                    save_checkpoint(
                        &dir.join("ckpt_best.cadpt"),
                        model,
                        opt,
                        cfg,
                        iter_1based,
                        &state,
                        log.best_val_miou,
                    )?;
                }
            }
            log.final_val_miou = Some(summary.miou);
        }
        log.rows.push(LogRow {
            iter: iter_1based,
            lr,
            loss: loss_val,
            val_miou,
        });
    }

    if let Some(dir) = out_dir {
        let state = RngState::capture(rng);
        save_checkpoint(
            &dir.join("ckpt_final.cadpt"),
            model,
            opt,
            cfg,
            cfg.max_iters,
            &state,
            log.best_val_miou,
        )?;
        std::fs::write(dir.join("trainlog.csv"), log.to_csv())
            .map_err(|e| Error::io(dir.join("trainlog.csv"), e))?;
    }
    Ok(log)
}

// small convenience used by loss-effect helpers
trait ToF64 {
    fn to_f64(self) -> f64;
}

impl ToF64 for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-6);
        assert_eq!(lr_at(cfg.warmup_iters, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(cfg.max_iters, &cfg).unwrap(), 0.0);
        assert!(lr_at(cfg.max_iters + 1, &cfg).is_err());
    }

    #[test]
    fn lr_mid_decay_closed_form() {
        let cfg = TrainConfig::paper();
        let t = (cfg.warmup_iters + cfg.max_iters) / 2;
        let got = lr_at(t, &cfg).unwrap();
        let expect = 1e-4 * 0.5f64.powf(0.9);
        assert!(((got - expect) / expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn lr_is_continuous_and_nonincreasing_after_warmup() {
        let cfg = TrainConfig::default();
        let left = lr_at(cfg.warmup_iters - 1, &cfg).unwrap();
        let at = lr_at(cfg.warmup_iters, &cfg).unwrap();
        assert!((at - cfg.base_lr).abs() < 1e-15);
        assert!(left < at);
        let mut prev = at;
        for t in cfg.warmup_iters..=cfg.max_iters {
            let lr = lr_at(t, &cfg).unwrap();
            assert!(lr <= prev + 1e-15, "lr increased at t = {t}");
            prev = lr;
        }
    }

    #[test]
    fn trainlog_csv_roundtrip() {
        let log = TrainLog {
            rows: vec![
                LogRow {
                    iter: 1,
                    lr: 1e-6,
                    loss: 1.386294,
                    val_miou: None,
                },
                LogRow {
                    iter: 2,
                    lr: 2e-6,
                    loss: 1.2,
                    val_miou: Some(0.251234),
                },
            ],
            ..TrainLog::default()
        };
        let csv = log.to_csv();
        let back = TrainLog::parse_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].val_miou, Some(0.251234));
        assert_eq!(back.final_val_miou, Some(0.251234));
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let bad = TrainConfig {
            warmup_iters: 2_000,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let zero_iters = TrainConfig {
            max_iters: 0,
            ..ok
        };
        zero_iters.validate().unwrap();
    }
}
