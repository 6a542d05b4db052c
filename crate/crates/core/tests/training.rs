use nahw_core::lora::LoraConfig;
use nahw_core::model::{ModelConfig, StepOptions, TransformerModel};
use nahw_core::optim::OptimizerKind;
use nahw_core::train::{PackedDataset, Precision, TrainConfig, Trainer};
use nahw_core::{DType, Rng};

fn model_cfg(vocab: usize, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_heads: 4,
        n_layers: layers,
        d_ffn: 4 * d,
        max_seq_len: 64,
        ..ModelConfig::default()
    }
}

fn random_docs(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut s = Rng::new(seed).stream();
    (0..n)
        .map(|_| (0..len).map(|_| s.below(vocab as usize) as u32).collect())
        .collect()
}

fn flat_params(t: &Trainer) -> Vec<f64> {
    t.model.trainable().iter().flat_map(|p| p.data().to_vec()).collect()
}

#[test]
fn single_batch_overfit() {
    let cfg = model_cfg(256, 64, 2);
    let model = TransformerModel::build(&cfg, &LoraConfig::default(), Rng::new(1)).unwrap();
    let docs = random_docs(1, 32, 250, 2);
    let data = PackedDataset::new(docs, 32, 255, 0).unwrap();
    assert_eq!(data.n_windows(), 1);
    let tc = TrainConfig {
        accumulation_steps: 1,
        lr_max: 1e-2,
        warmup_steps: 10,
        total_steps: 500,
        seq_len: 32,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(model, data, tc).unwrap();
    let mut best = f64::INFINITY;
    let mut reached = None;
    while tr.step < 500 {
        let r = tr.train_step().unwrap();
        best = best.min(r.loss);
        if r.loss < 0.05 && reached.is_none() {
            reached = Some(r.step);
        }
    }
    assert!(reached.is_some(), "best loss {best}");
}

#[test]
fn accumulation_equivalence() {
    let cfg = model_cfg(64, 16, 2);
    let model = TransformerModel::build(&cfg, &LoraConfig::default(), Rng::new(4)).unwrap();
    let docs = random_docs(12, 20, 60, 5);
    let run = |micro: usize, acc: usize| {
        let tc = TrainConfig {
            micro_batch: micro,
            accumulation_steps: acc,
            lr_max: 0.05,
            warmup_steps: 2,
            total_steps: 20,
            seq_len: 16,
            precision: Precision::Double,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: 1e9,
            ..TrainConfig::default()
        };
        let data = PackedDataset::new(docs.clone(), 16, 63, 9).unwrap();
        let mut tr = Trainer::new(model.clone(), data, tc).unwrap();
        tr.run(|_, _| Ok(())).unwrap();
        flat_params(&tr)
    };
    let a = run(1, 4);
    let b = run(4, 1);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "max diff {diff}");
    let init: Vec<f64> = model.trainable().iter().flat_map(|p| p.data().to_vec()).collect();
    assert!(a.iter().zip(&init).any(|(x, y)| x != y));
}

#[test]
fn checkpointing_lowers_activation_high_water() {
    let cfg = model_cfg(128, 32, 4);
    let model = TransformerModel::build(&cfg, &LoraConfig::default(), Rng::new(6)).unwrap();
    let toks: Vec<u32> = random_docs(1, 33, 128, 7).remove(0);
    let high_water = |ckpt: bool| {
        let ledger = std::rc::Rc::new(std::cell::RefCell::new(nahw_core::memory::MemoryLedger::new(
            nahw_core::memory::MemoryBudget::unlimited(),
        )));
        let mut opts = StepOptions::new(DType::Full, Rng::new(1));
        opts.checkpointing = ckpt;
        opts.ledger = Some(ledger.clone());
        let (_, g) = model.loss_and_grads(&toks[..32], &toks[1..], &opts).unwrap();
        let l = ledger.borrow();
        assert_eq!(l.current(nahw_core::memory::Category::Activations), 0);
        (l.high_water(nahw_core::memory::Category::Activations), g)
    };
    let (plain, g1) = high_water(false);
    let (ckpt, g2) = high_water(true);
    assert!(ckpt < plain, "{ckpt} vs {plain}");
    assert_eq!(g1, g2);
}

#[test]
fn mixed_precision_keeps_full_master_weights() {
    let cfg = model_cfg(64, 16, 2);
    let model = TransformerModel::build(&cfg, &LoraConfig::default(), Rng::new(8)).unwrap();
    let docs = random_docs(6, 20, 60, 9);
    let tc = TrainConfig {
        micro_batch: 2,
        accumulation_steps: 1,
        total_steps: 5,
        warmup_steps: 1,
        seq_len: 16,
        precision: Precision::Mixed,
        ..TrainConfig::default()
    };
    let data = PackedDataset::new(docs.clone(), 16, 63, 1).unwrap();
    let mut tr = Trainer::new(model, data, tc).unwrap();
    tr.run(|_, _| Ok(())).unwrap();
    for p in tr.model.trainable() {
        assert_eq!(p.dtype(), DType::Full);
        assert!(p.data().iter().any(|&x| x != DType::Reduced.round(x)), "master weights were rounded");
    }
    let logits = tr.model.forward_dtype(&docs[0][..16], DType::Reduced).unwrap();
    assert_eq!(logits.dtype(), DType::Reduced);
    assert!(logits.data().iter().all(|&x| x == DType::Reduced.round(x)));
}
