use t2diff::data::{build_sequences, leave_one_out, load_split, persist_split, synthetic, DatasetSplit, SessionRule};
use t2diff::experiment::{
    ablation_configs, build_model, evaluate, load_run, popularity_baseline, run_dir, save_run, train, AblationAxis,
    EvalOptions, TrainConfig, CHECKPOINT_FILE,
};
use t2diff::numerics::ParamStore;
use t2diff::par::Parallelism;
use t2diff::towers::Variant;
use t2diff::Error;

fn ring() -> DatasetSplit {
    let log = synthetic::ring_log(synthetic::RingLogConfig {
        users: 60,
        items: 40,
        ..Default::default()
    });
    let seqs = build_sequences(&log.interactions, 20, 5);
    leave_one_out(&seqs, log.user_count(), log.item_count(), SessionRule::default())
}

fn tiny(variant: Variant) -> TrainConfig {
    TrainConfig {
        dim: 8,
        attention_hidden: 8,
        batch_size: 32,
        epochs: 2,
        validation_users: 20,
        steps: 8,
        variant,
        ..Default::default()
    }
}

#[test]
fn dataset_file_round_trips() {
    let split = ring();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ring.t2ds");
    persist_split(&split, &path).unwrap();
    assert_eq!(load_split(&path).unwrap(), split);
}

#[test]
fn saved_run_reloads_to_the_same_report() {
    let split = ring();
    let cfg = tiny(Variant::Full);
    let out = train(&split, &cfg, Parallelism::Rayon).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = run_dir(dir.path(), &cfg);
    let manifest = save_run(&run, &cfg, &out, "digest").unwrap();
    assert!(manifest.unet_param_count > 0);
    for f in &manifest.outputs {
        assert!(run.join(f).exists(), "{f}");
    }

    let opts = EvalOptions {
        ks: vec![20, 2],
        ..Default::default()
    };
    let schedule = cfg.noise_schedule().unwrap();
    let before = evaluate(&out.model, &out.store, &split.test, &schedule, &opts, Parallelism::Rayon).unwrap();
    let (cfg2, model, store) = load_run(run.join(CHECKPOINT_FILE), split.item_count as usize).unwrap();
    assert_eq!(cfg2, cfg);
    let after = evaluate(&model, &store, &split.test, &schedule, &opts, Parallelism::Sequential).unwrap();
    assert!(before.same_metrics(&after));
    assert_eq!(before.recall.keys().copied().collect::<Vec<_>>(), [2, 20]);
    assert!(before.recall[&2] <= before.recall[&20]);
}

#[test]
fn mixed_attention_only_has_no_unet_parameters() {
    let split = ring();
    let cfg = TrainConfig {
        epochs: 1,
        max_steps: 3,
        ..tiny(Variant::MixedAttentionOnly)
    };
    let out = train(&split, &cfg, Parallelism::Rayon).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_run(dir.path(), &cfg, &out, "d").unwrap();
    assert_eq!(manifest.unet_param_count, 0);
    assert_eq!(manifest.variant, "mixed_attention_only");
    assert!(out.store.iter().all(|(_, p)| !p.name.starts_with("unet.")));
}

#[test]
fn checkpoint_of_another_variant_is_rejected() {
    let split = ring();
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = build_model(&tiny(Variant::MixedAttentionOnly), split.item_count as usize);
    let mut bytes = Vec::new();
    store.write_checkpoint(&mut bytes).unwrap();
    std::fs::write(dir.path().join(CHECKPOINT_FILE), bytes).unwrap();
    std::fs::write(dir.path().join("config.txt"), tiny(Variant::Full).to_text()).unwrap();
    let err = load_run(dir.path().join(CHECKPOINT_FILE), split.item_count as usize).err().unwrap();
    assert!(matches!(err, Error::Format(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let (_, store) = build_model(&tiny(Variant::Full), 10);
    let mut bytes = Vec::new();
    store.write_checkpoint(&mut bytes).unwrap();
    for cut in [3, 10, bytes.len() - 1] {
        let err = ParamStore::<f32>::read_checkpoint(&bytes[..cut]).err().unwrap();
        assert_eq!(err.exit_code(), 4, "{err}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(ParamStore::<f32>::read_checkpoint(&bad[..]), Err(Error::Format(_))));
    // An absurd shape must be refused, not allocated.
    let mut huge = b"T2PW".to_vec();
    huge.extend([bytes[4], bytes[5]]);
    huge.extend(1u32.to_le_bytes());
    huge.extend(1u32.to_le_bytes());
    huge.push(b'w');
    huge.extend(2u32.to_le_bytes());
    huge.extend(u64::MAX.to_le_bytes());
    huge.extend(u64::MAX.to_le_bytes());
    let err = ParamStore::<f32>::read_checkpoint(&huge[..]).err().unwrap();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn divergence_is_reported_with_its_step() {
    let split = ring();
    let cfg = TrainConfig {
        lr: 1e30,
        epochs: 1,
        ..tiny(Variant::Full)
    };
    let err = train(&split, &cfg, Parallelism::Rayon).err().unwrap();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert!(err.to_string().contains("diverged at step"));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn popularity_baseline_ranks_by_training_frequency() {
    let split = ring();
    let report = popularity_baseline(&split, &split.test, &[1, 40], false).unwrap();
    assert_eq!(report.recall[&40], 1.0);
    assert!(report.recall[&1] <= report.recall[&40]);
}

#[test]
fn step_axis_has_three_points() {
    let labels: Vec<String> = ablation_configs(&TrainConfig::default(), AblationAxis::Steps)
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    assert_eq!(labels, ["T=10", "T=50", "T=200"]);
}
