use candle_core::{DType, Tensor};
use mega_core::attack::project_linf_t;
use mega_core::dataset::{generate_toy_dataset, mine_triplets_supervised, Dataset, ImageBatch};
use mega_core::meta_trainer::{checkpoint_name, train, MetaTrainer, TrainConfig, TrainMode, TrainOptions};
use mega_core::nets::{build_toy_embedder, load_checkpoint, Embedder, ToyEmbedder};
use mega_core::objectives::{adv_triplet_loss_mean, discriminator_loss_t, FlipMask};
use mega_core::Device;

fn data() -> (Dataset, Dataset) {
    (
        generate_toy_dataset(4, 8, 16, 1).unwrap(),
        generate_toy_dataset(4, 8, 16, 2).unwrap(),
    )
}

fn surrogate() -> ToyEmbedder {
    build_toy_embedder(mega_core::nets::Arch::A, 8, 0).unwrap().frozen()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 1,
        p: 2,
        k: 2,
        generator_width: 4,
        flip_prob: 0.0,
        ..TrainConfig::default()
    }
}

/// First `p` identities of the training pool, `k` samples each.
fn batch(ds: &Dataset) -> ImageBatch {
    let pool = ds.training_pool();
    let mut idx = Vec::new();
    for id in 0..2 {
        idx.extend(pool.iter().copied().filter(|&i| ds.samples()[i].identity == Some(id)).take(2));
    }
    ImageBatch::from_indices(ds, idx)
}

fn values(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn zero_lr_leaves_networks_unchanged_and_still_yields_delta() {
    let (ds, _) = data();
    let f = surrogate();
    let f_hash = f.param_digest().unwrap();
    let mut t = MetaTrainer::new(TrainConfig { lr: 0.0, ..cfg() }, &f, ds.image_shape()).unwrap();
    let (g0, d0) = (t.generator().params().digest().unwrap(), t.discriminator().params().digest().unwrap());
    let b = batch(&ds);
    let step = t.meta_train_step(&b, 0).unwrap();
    assert_eq!(t.generator().params().digest().unwrap(), g0);
    assert_eq!(t.discriminator().params().digest().unwrap(), d0);
    assert_eq!(f.param_digest().unwrap(), f_hash);
    assert_eq!(step.delta.dims(), &[4, 3, 16, 16]);
    let eps = cfg().budget().unwrap().epsilon_f32();
    assert!(values(&step.delta).iter().all(|d| d.abs() <= eps));
    assert!(step.max_perturbation <= eps);
}

#[test]
fn discriminator_step_lowers_its_loss_on_the_same_batch() {
    let (ds, _) = data();
    let f = surrogate();
    let c = TrainConfig { use_mask: false, lr: 1e-4, ..cfg() };
    let eps = c.budget().unwrap().epsilon_f32();
    let mut t = MetaTrainer::new(c, &f, ds.image_shape()).unwrap();
    let b = batch(&ds);
    let x = b.tensor(&Device::Cpu).unwrap();
    let fake = project_linf_t(&t.generator().forward(&x).unwrap(), &x, eps).unwrap().detach();
    let loss = |t: &MetaTrainer| {
        let real = t.discriminator().forward(&x).unwrap();
        let fake = t.discriminator().forward(&fake).unwrap();
        discriminator_loss_t(&real, &fake, &FlipMask::none(4, 4))
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    };
    let before = loss(&t);
    let step = t.meta_train_step(&b, 0).unwrap();
    assert!((step.d_loss - before as f64).abs() < 1e-5, "{} vs {before}", step.d_loss);
    let after = loss(&t);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_delta_reduces_to_clean_triplet_loss() {
    let (ds, ds_a) = data();
    let f = surrogate();
    let mut t = MetaTrainer::new(cfg(), &f, ds.image_shape()).unwrap();
    let b = batch(&ds_a);
    let x = b.tensor(&Device::Cpu).unwrap();
    let loss = t.meta_test_loss(&b, &x.zeros_like().unwrap()).unwrap().to_scalar::<f32>().unwrap() as f64;

    let emb: Vec<Vec<f32>> = f.forward(&x).unwrap().to_vec2().unwrap();
    let wide: Vec<Vec<f64>> = emb.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let trips = mine_triplets_supervised(&emb, b.labels.as_ref().unwrap()).unwrap();
    let refs: Vec<(&[f64], &[f64], &[f64])> = trips
        .iter()
        .map(|t| (&wide[t.anchor][..], &wide[t.negative][..], &wide[t.positive][..]))
        .collect();
    let want = adv_triplet_loss_mean(&refs, cfg().m).unwrap();
    assert!(loss >= 0.0);
    assert!((loss - want).abs() <= 1e-5 * want.max(1.0), "{loss} vs {want}");
}

#[test]
fn meta_gradient_reaches_generator_and_update_follows_its_sign() {
    let (ds, ds_a) = data();
    let f = surrogate();
    let c = TrainConfig { meta_update_per_batch: true, ..cfg() };
    let mut t = MetaTrainer::new(c.clone(), &f, ds.image_shape()).unwrap();
    let step = t.meta_train_step(&batch(&ds), 0).unwrap();
    let loss = t.meta_test_loss(&batch(&ds_a), &step.delta).unwrap();

    let grads = loss.affine(c.lambda, 0.0).unwrap().backward().unwrap();
    let params: Vec<(String, Vec<f32>, Option<Vec<f32>>)> = t
        .generator()
        .params()
        .vars()
        .map(|(n, v)| (n.clone(), values(v.as_tensor()), grads.get(v.as_tensor()).map(values)))
        .collect();
    let total: f32 = params.iter().filter_map(|p| p.2.as_ref()).flatten().map(|g| g.abs()).sum();
    assert!(total > 0.0, "meta-test loss has no gradient path to the generator");
    let d_before = t.discriminator().params().digest().unwrap();

    t.meta_test_update(&loss).unwrap();
    assert_eq!(t.discriminator().params().digest().unwrap(), d_before);
    let mut checked = 0;
    for ((name, before, grad), (_, v)) in params.iter().zip(t.generator().params().vars()) {
        let Some(grad) = grad else { continue };
        for ((b, a), g) in before.iter().zip(values(v.as_tensor())).zip(grad) {
            if g.abs() > 1e-6 {
                // the first Adam step moves every coordinate against its gradient
                assert_eq!((a - b).signum(), -g.signum(), "{name}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_lambda_meta_update_keeps_generator() {
    let (ds, ds_a) = data();
    let f = surrogate();
    let mut t = MetaTrainer::new(TrainConfig { lambda: 0.0, meta_update_per_batch: true, ..cfg() }, &f, ds.image_shape())
        .unwrap();
    let step = t.meta_train_step(&batch(&ds), 0).unwrap();
    let g = t.generator().params().digest().unwrap();
    let d = t.discriminator().params().digest().unwrap();
    let loss = t.meta_test_loss(&batch(&ds_a), &step.delta).unwrap();
    t.meta_test_update(&loss).unwrap();
    assert_eq!(t.generator().params().digest().unwrap(), g);
    assert_eq!(t.discriminator().params().digest().unwrap(), d);
}

#[test]
fn ablation_cells_and_meta_modes_train() {
    let (ds, ds_a) = data();
    let f = surrogate();
    for (use_mask, use_meta, cell) in [(false, false, "l"), (true, false, "l+M"), (false, true, "l+A"), (true, true, "l+M+A")] {
        for per_batch in [false, true] {
            if !use_meta && per_batch {
                continue;
            }
            let c = TrainConfig { use_mask, use_meta, meta_update_per_batch: per_batch, ..cfg() };
            assert_eq!(c.cell_name(), cell);
            let out = train(&ds, Some(&ds_a), &f, &c, &TrainOptions::default()).unwrap();
            assert!(!out.trace.is_empty());
            assert!(out.trace.iter().all(|s| s.meta_loss.is_some() == use_meta), "{cell}");
        }
    }
}

#[test]
fn unsupervised_training_needs_no_labels() {
    let (ds, ds_a) = data();
    let f = surrogate();
    let c = TrainConfig { mode: TrainMode::Unsupervised, ..cfg() };
    let out = train(&ds.without_labels(), Some(&ds_a.without_labels()), &f, &c, &TrainOptions::default()).unwrap();
    assert!(!out.trace.is_empty());
    let supervised = train(&ds.without_labels(), Some(&ds_a), &f, &cfg(), &TrainOptions::default());
    assert!(supervised.is_err());
}

#[test]
fn meta_learning_without_meta_dataset_is_rejected() {
    let (ds, _) = data();
    let f = surrogate();
    assert!(train(&ds, None, &f, &cfg(), &TrainOptions::default()).is_err());
}

#[test]
fn epoch_writes_checkpoint_and_trace_and_resume_is_exact() {
    let (ds, ds_a) = data();
    let f = surrogate();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { epochs: 2, ..cfg() };
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), audit: false };
    let full = train(&ds, Some(&ds_a), &f, &c, &opts).unwrap();
    for name in [checkpoint_name(1), checkpoint_name(2), "attack.ckpt".into(), "trace.csv".into()] {
        assert!(dir.path().join(&name).is_file(), "missing {name}");
    }
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), full.trace.len() + 1);

    let ckpt = load_checkpoint(&dir.path().join(checkpoint_name(1)), None).unwrap().checkpoint;
    let mut t = MetaTrainer::new(c.clone(), &f, ds.image_shape()).unwrap();
    t.restore(&ckpt).unwrap();
    assert_eq!(t.epoch(), 1);
    t.run_epoch(&ds, Some(&ds_a)).unwrap();
    let tail: Vec<_> = full.trace.iter().filter(|s| s.epoch == 1).map(|s| s.losses()).collect();
    let resumed: Vec<_> = t.trace().iter().map(|s| s.losses()).collect();
    assert_eq!(resumed, tail);
    assert_eq!(t.generator().params().digest().unwrap(), full.generator.params().digest().unwrap());

    let other = TrainConfig { lambda: 0.5, ..c };
    let mut t = MetaTrainer::new(other, &f, ds.image_shape()).unwrap();
    assert!(t.restore(&ckpt).is_err());
}
