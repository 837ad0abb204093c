use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub(crate) fn tiny_config(adapter: bool) -> ModelConfig {
    let mut c = ModelConfig::new(1, 2, 8, 6, 3);
    c.d_ff = 32;
    c.max_timesteps = 16;
    c.dropout = 0.0;
    if adapter {
        c.adapter = Some(AdapterConfig {
            n_div: 2,
            rank: 1,
            bottleneck: 4,
        });
    }
    c
}

pub(crate) fn random_batch(size: usize, k: usize, obs_dim: usize, n_actions: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * k;
    let mut mask = vec![true; n];
    // Left-pad the first window.
    for m in mask.iter_mut().take(k / 2) {
        *m = false;
    }
    Batch {
        size,
        k,
        obs_dim,
        states: (0..n * obs_dim).map(|_| rng.random_range(0.0..40.0)).collect(),
        rtg: (0..n).map(|_| rng.random_range(-3000.0..0.0)).collect(),
        actions: (0..n).map(|_| rng.random_range(0..n_actions)).collect(),
        timesteps: (0..n).map(|i| i % k + 2).collect(),
        mask,
    }
}

fn perturb(model: &mut PolicyModel<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..model.store.len() {
        for v in &mut model.store.tensor_mut(id).data {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn probe_loss(model: &PolicyModel<f64>, batch: &Batch, probe: &Array2<f64>) -> f64 {
    (&model.logits(batch).unwrap() * probe).sum()
}

#[test]
fn gradients_match_central_differences() {
    let mut model = PolicyModel::<f64>::init(tiny_config(true), 1).unwrap();
    perturb(&mut model, 0.3, 2);
    let batch = random_batch(2, 3, 6, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probe = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
    let pass = model.forward(&batch, None).unwrap();
    let mut grads = Gradients::for_store(&model.store);
    model.backward(&pass, probe.view(), &mut grads).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for id in 0..model.store.len() {
        let name = model.store.tensor(id).name.clone();
        if name == LOG_TEMPERATURE {
            continue;
        }
        let analytic = grads.get(id).unwrap().to_vec();
        let n = analytic.len();
        // Timestep rows that never occur have zero gradient; sample a spread of entries.
        let idx: Vec<usize> = if n <= 40 { (0..n).collect() } else { (0..40).map(|i| i * n / 40).collect() };
        for i in idx {
            let orig = model.store.data(id)[i];
            model.store.tensor_mut(id).data[i] = orig + h;
            let up = probe_loss(&model, &batch, &probe);
            model.store.tensor_mut(id).data[i] = orig - h;
            let down = probe_loss(&model, &batch, &probe);
            model.store.tensor_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let tol = 1e-3 * a.abs().max(numeric.abs()) + 1e-8;
            assert!((a - numeric).abs() <= tol, "{name}[{i}]: analytic {a} vs numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn future_tokens_do_not_change_present_outputs() {
    for (layers, heads) in [(1, 1), (2, 2), (3, 4)] {
        let mut c = ModelConfig::new(layers, heads, 16, 6, 3);
        c.max_timesteps = 32;
        let model = PolicyModel::<f64>::init(c, 7).unwrap();
        let mut batch = random_batch(1, 5, 6, 3, 8);
        batch.mask = vec![true; 5];
        let base = model.forward(&batch, None).unwrap().hidden;
        // Alter step 3's action token (position 11) and everything after it.
        batch.actions[3] = (batch.actions[3] + 1) % 3;
        batch.states[4 * 6] += 10.0;
        batch.rtg[4] -= 100.0;
        let after = model.forward(&batch, None).unwrap().hidden;
        for pos in 0..15 {
            let same = base.row(pos) == after.row(pos);
            assert_eq!(same, pos < 11, "layers {layers}, position {pos}");
        }
    }
}

#[test]
fn padded_steps_do_not_affect_valid_outputs() {
    let model = PolicyModel::<f64>::init(tiny_config(false), 3).unwrap();
    let mut batch = random_batch(1, 4, 6, 3, 9);
    batch.mask = vec![false, false, true, true];
    let base = model.logits(&batch).unwrap();
    batch.states[0] = 123.0;
    batch.actions[1] = 2;
    batch.rtg[0] = 55.0;
    let after = model.logits(&batch).unwrap();
    assert_eq!(base.row(2), after.row(2));
    assert_eq!(base.row(3), after.row(3));
}

#[test]
fn injected_adapters_are_exact_identity() {
    let mut c = ModelConfig::new(2, 2, 32, 6, 4);
    c.max_timesteps = 16;
    let mut model = PolicyModel::<f32>::init(c, 11).unwrap();
    let batch = random_batch(3, 4, 6, 4, 12);
    let before = model.logits(&batch).unwrap();
    model.inject_adapters(AdapterConfig { n_div: 4, rank: 1, bottleneck: 8 }, 13).unwrap();
    let after = model.logits(&batch).unwrap();
    assert_eq!(before, after);
    assert!(model.inject_adapters(AdapterConfig::default(), 1).is_err());
}

#[test]
fn single_step_window_has_three_tokens() {
    let model = PolicyModel::<f32>::init(tiny_config(false), 0).unwrap();
    let batch = random_batch(1, 1, 6, 3, 0);
    assert_eq!(model.embed_tokens(&batch).unwrap().nrows(), 3);
}

#[test]
fn zero_inputs_embed_to_timestep_vector() {
    let mut model = PolicyModel::<f64>::init(tiny_config(false), 0).unwrap();
    for name in ["embed.state.weight", "embed.rtg.weight", "embed.action.weight"] {
        let id = model.store.id(name).unwrap();
        model.store.tensor_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let batch = Batch {
        size: 1,
        k: 1,
        obs_dim: 6,
        states: vec![0.0; 6],
        rtg: vec![0.0],
        actions: vec![0],
        timesteps: vec![5],
        mask: vec![true],
    };
    let tokens = model.embed_tokens(&batch).unwrap();
    let wt = model.store.view2(model.store.id("embed.timestep.weight").unwrap(), 16);
    for r in 0..3 {
        assert_eq!(tokens.row(r), wt.row(5));
    }
}

#[test]
fn batch_order_is_irrelevant() {
    let model = PolicyModel::<f64>::init(tiny_config(true), 5).unwrap();
    let batch = random_batch(2, 3, 6, 3, 6);
    let logits = model.logits(&batch).unwrap();
    let swap = |v: &[f32], w: usize| [&v[w..], &v[..w]].concat();
    let swapped = Batch {
        states: swap(&batch.states, 18),
        rtg: swap(&batch.rtg, 3),
        actions: [&batch.actions[3..], &batch.actions[..3]].concat(),
        timesteps: [&batch.timesteps[3..], &batch.timesteps[..3]].concat(),
        mask: [&batch.mask[3..], &batch.mask[..3]].concat(),
        ..batch.clone()
    };
    let out = model.logits(&swapped).unwrap();
    for r in 0..3 {
        assert_eq!(out.row(r), logits.row(r + 3));
        assert_eq!(out.row(r + 3), logits.row(r));
    }
}

#[test]
fn out_of_range_timestep_is_rejected() {
    let model = PolicyModel::<f32>::init(tiny_config(false), 0).unwrap();
    let mut batch = random_batch(1, 2, 6, 3, 0);
    batch.timesteps[1] = 16;
    assert!(matches!(model.forward(&batch, None), Err(crate::Error::InvalidParameter(_))));
    batch.timesteps[1] = 1;
    batch.obs_dim = 5;
    assert!(model.forward(&batch, None).is_err());
}

#[test]
fn preset_parameter_budgets() {
    let teacher = PolicyModel::<f32>::init(ModelConfig::teacher(36, 8), 0).unwrap();
    let student = PolicyModel::<f32>::init(
        ModelConfig::student(36, 8).with_adapter(AdapterConfig::default()),
        0,
    )
    .unwrap();
    let t = teacher.count_params(false) as f64;
    let s = student.count_params(false) as f64;
    assert!((t / 19.44e6 - 1.0).abs() < 0.10, "teacher {t}");
    assert!((s / 1.84e6 - 1.0).abs() < 0.10, "student {s}");
    assert!((s / t * 100.0 - 9.47).abs() < 2.0);
    let adapter: usize = student
        .store
        .tensors()
        .iter()
        .filter(|t| t.name.contains("adapter"))
        .map(|t| t.numel())
        .sum();
    assert!((1_000..=4_000).contains(&adapter), "adapter params {adapter}");
}

#[test]
fn finetune_set_is_small_and_freezes_the_rest() {
    let mut model = PolicyModel::<f32>::init(
        ModelConfig::student(36, 8).with_adapter(AdapterConfig::default()),
        0,
    )
    .unwrap();
    model.store.set_trainable(TrainableSet::FinetuneSet);
    let frac = model.count_params(true) as f64 / model.count_params(false) as f64;
    assert!(frac < 0.02, "trainable fraction {frac}");
    for t in model.store.tensors() {
        let expect = t.name.contains("adapter") || t.name.contains(".ln") || t.name.starts_with("head.");
        assert_eq!(t.trainable, expect, "{}", t.name);
    }
}

#[test]
fn optimizer_leaves_frozen_tensors_untouched() {
    let mut model = PolicyModel::<f32>::init(tiny_config(true), 2).unwrap();
    model.store.set_trainable(TrainableSet::FinetuneSet);
    let frozen_before = model.store.frozen_checksum();
    let batch = random_batch(2, 3, 6, 3, 1);
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store, &[]).unwrap();
    let mut grads = Gradients::for_store(&model.store);
    for _ in 0..5 {
        grads.zero();
        let pass = model.forward(&batch, None).unwrap();
        let ones = Array2::ones(pass.logits.raw_dim());
        model.backward(&pass, ones.view(), &mut grads).unwrap();
        opt.step(&mut model.store, &grads);
    }
    assert_eq!(frozen_before, model.store.frozen_checksum());
}

#[test]
fn dropout_only_in_training_mode() {
    let mut c = tiny_config(false);
    c.dropout = 0.5;
    let model = PolicyModel::<f32>::init(c, 4).unwrap();
    let batch = random_batch(1, 3, 6, 3, 4);
    assert_eq!(model.logits(&batch).unwrap(), model.logits(&batch).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = model.forward(&batch, Some(&mut rng)).unwrap().logits;
    assert_ne!(train, model.logits(&batch).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut model = PolicyModel::<f32>::init(tiny_config(true), 9).unwrap();
    model.store.set_trainable(TrainableSet::FinetuneSet);
    let mut ckpt = Checkpoint::new(model);
    ckpt.meta = serde_json::json!({"role": "student"});
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.store, ckpt.model.store);
    assert_eq!(back.model.config, ckpt.model.config);
    assert_eq!(back.meta, ckpt.meta);

    let bin = checkpoint::blob_path(&path);
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(crate::Error::Incompatible(_))));
}

#[test]
fn store_and_config_must_agree() {
    let model = PolicyModel::<f32>::init(tiny_config(false), 0).unwrap();
    let mut other = tiny_config(false);
    other.num_actions = 4;
    assert!(PolicyModel::from_store(other, model.store.clone()).is_err());
    assert!(PolicyModel::from_store(tiny_config(true), model.store).is_err());
}
