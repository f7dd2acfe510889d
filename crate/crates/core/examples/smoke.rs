use adapter_seg::data::{synth_scene, SceneSample};
use adapter_seg::model::{CloudAdapterNet, ModelConfig};
use adapter_seg::optim::AdamW;
use adapter_seg::rng::{derive_seed, rng_from};
use adapter_seg::train::{cross_entropy_loss, evaluate, train_loop, TrainConfig};
use adapter_seg::{Graph, Tensor};
use std::time::Instant;

fn toy_model_config() -> ModelConfig {
    ModelConfig::default() // toy backbone d=64 depth4 heads4 img64, spm 32/64 k4, adapter r16 shared
}

fn main() {
    let start = Instant::now();
    let model = CloudAdapterNet::<f32>::new(&toy_model_config(), 42).unwrap();
    let r = model.count_params();
    println!("toy model: trainable {} ({} spm, {} adapter, {} head), frozen {}",
        r.trainable, r.module("spm"), r.module("adapter"), r.module("decode_head"), r.frozen);

    // one fixed batch of 4
    let samples: Vec<SceneSample> = (0..4).map(|i| synth_scene(100 + i, 64, 64, 0.5)).collect();
    let refs: Vec<&SceneSample> = samples.iter().collect();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for s in &refs {
        data.extend_from_slice(&s.image.to_vec());
        targets.extend_from_slice(&s.mask.data);
    }
    let x = Tensor::from_vec(data, &[4, 3, 64, 64]).unwrap();

    let mut opt = AdamW::new(model.trainable_params(), Default::default()).unwrap();
    let t0 = Instant::now();
    for step in 0..200 {
        let g = Graph::new();
        let logits = model.forward(&g, &x).unwrap();
        let loss = cross_entropy_loss(&g, &logits, &targets, None).unwrap();
        let lv = loss.item().unwrap();
        if step % 25 == 0 || step == 199 {
            println!("step {step:>3}: CE = {lv:.4}  ({:.2?}/step)", t0.elapsed() / (step as u32 + 1));
        }
        g.backward(&loss).unwrap();
        opt.step(1e-4, 0.05).unwrap();
        opt.zero_grads();
    }

    // now the 500-iter smoke: 200 train / 50 val
    let train_set: Vec<SceneSample> = (0..200).map(|i| {
        let mut rng = rng_from(derive_seed(42, &format!("cover{i}")));
        use rand::Rng;
        let cover: f64 = rng.random_range(0.05..0.95);
        synth_scene(1000 + i, 64, 64, cover)
    }).collect();
    let val_set: Vec<SceneSample> = (0..50).map(|i| {
        let mut rng = rng_from(derive_seed(43, &format!("cover{i}")));
        use rand::Rng;
        let cover: f64 = rng.random_range(0.05..0.95);
        synth_scene(5000 + i, 64, 64, cover)
    }).collect();

    let model2 = CloudAdapterNet::<f32>::new(&toy_model_config(), 42).unwrap();
    let init = evaluate(&model2, &val_set, None).unwrap();
    println!("iteration-0 val mIoU = {:.2}", 100.0 * init.miou);
    let cfg = TrainConfig { max_iters: 500, warmup_iters: 12, val_interval: 100, ..TrainConfig::default() };
    let mut opt2 = AdamW::new(model2.trainable_params(), cfg.adam).unwrap();
    let mut rng = rng_from(derive_seed(cfg.seed, "train.batches"));
    let t1 = Instant::now();
    let log = train_loop(&model2, &mut opt2, &mut rng, 0, None, &train_set, &val_set, &cfg, None).unwrap();
    println!("500 iters in {:.1?}; val trace:", t1.elapsed());
    for row in log.rows.iter().filter(|r| r.val_miou.is_some()) {
        println!("  iter {:>4}: loss {:.4}, val mIoU {:.2}", row.iter, row.loss, 100.0 * row.val_miou.unwrap());
    }
    println!("gain = {:.2} points", 100.0 * (log.final_val_miou.unwrap() - log.initial_val_miou.unwrap()));
    println!("total {:.1?}", start.elapsed());
}
