mod common;

use std::path::Path;

use common::{tiny_config, tiny_data};
use hsonet::checkpoint::Checkpoint;
use hsonet::config::LossKindName;
use hsonet::io::{load_folder, read_mask, write_mask, write_rgb, write_sample};
use hsonet::trainer::{evaluate, predict_batch, train, write_curve, Evaluation, Trainer};
use hsonet::Error;
use hsonet_core::metrics::{confusion, merge, ConfusionCounts};
use hsonet_core::params::ParamStore;
use hsonet_core::raster::{threshold, Grid, HardnessTag};

fn trainable(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.trainable_ids().map(|id| store.get(id).data().to_vec()).collect()
}

fn round_trip(ckpt: &Checkpoint) -> Checkpoint {
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    Checkpoint::read_from(&mut bytes.as_slice(), Path::new("mem")).unwrap()
}

#[test]
fn bce_and_eo_gamma_zero_take_the_same_first_step() {
    let data = tiny_data(4, 0);
    let mut bce = tiny_config();
    bce.loss.kind = LossKindName::Bce;
    let mut eo = tiny_config();
    eo.loss.kind = LossKindName::Eo;
    eo.loss.gamma = 0.0;
    bce.resolve(data.len());
    eo.resolve(data.len());
    let mut a = Trainer::new(bce).unwrap();
    let mut b = Trainer::new(eo).unwrap();
    let (ra, rb) = (a.step(&data).unwrap(), b.step(&data).unwrap());
    assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
    assert_eq!(a.checkpoint().params, b.checkpoint().params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = tiny_data(5, 0);
    let val = tiny_data(2, 100);
    let mut cfg = tiny_config();
    cfg.train.steps = 6;
    cfg.resolve(data.len());

    let mut full = Trainer::new(cfg.clone()).unwrap();
    full.run(&data, None, &mut |_| {}).unwrap();

    let mut first = cfg.clone();
    first.train.steps = 3;
    let mut half = Trainer::new(first).unwrap();
    half.run(&data, None, &mut |_| {}).unwrap();
    let mut ckpt = round_trip(half.checkpoint());
    ckpt.config.train.steps = 6;
    let mut resumed = Trainer::resume(ckpt).unwrap();
    resumed.run(&data, None, &mut |_| {}).unwrap();

    let (a, b) = (full.checkpoint(), resumed.checkpoint());
    assert_eq!(a.t, b.t);
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam, b.adam);
    let ea = evaluate(full.network(), &a.params, &val, &a.config, a.t).unwrap();
    let eb = evaluate(resumed.network(), &b.params, &val, &b.config, b.t).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = tiny_data(2, 0);
    let mut cfg = tiny_config();
    cfg.train.learning_rate = 0.0;
    cfg.train.steps = 2;
    cfg.resolve(data.len());
    let mut t = Trainer::new(cfg).unwrap();
    let before = trainable(&t.checkpoint().params);
    t.run(&data, None, &mut |_| {}).unwrap();
    assert_eq!(trainable(&t.checkpoint().params), before);
}

#[test]
fn zero_epochs_give_an_empty_curve() {
    let data = tiny_data(2, 0);
    let mut cfg = tiny_config();
    cfg.train.epochs = Some(0);
    let ckpt = train(cfg, &data, None, &mut |_| {}).unwrap();
    assert_eq!(ckpt.t, 0);
    assert!(ckpt.history.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_curve(&path, &ckpt.history).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = tiny_data(3, 0);
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    let ckpt = train(cfg, &data, Some(&data[..1]), &mut |_| {}).unwrap();
    let back = round_trip(&ckpt);
    assert_eq!(back, ckpt);
    let pairs: Vec<_> = data.iter().map(|d| &d.pair).collect();
    let before = predict_batch(&ckpt.network().unwrap(), &ckpt.params, &pairs).unwrap();
    let after = predict_batch(&back.network().unwrap(), &back.params, &pairs).unwrap();
    assert_eq!(before, after);
}

#[test]
fn evaluation_counts_match_thresholded_predictions() {
    let data = tiny_data(5, 0);
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    let ckpt = train(cfg, &data, None, &mut |_| {}).unwrap();
    let net = ckpt.network().unwrap();
    let ev = evaluate(&net, &ckpt.params, &data, &ckpt.config, ckpt.t).unwrap();

    let mut expected = ConfusionCounts::ZERO;
    let mut hard = ConfusionCounts::ZERO;
    for lp in &data {
        let probs = predict_batch(&net, &ckpt.params, &[&lp.pair]).unwrap().remove(0);
        let pred = threshold(&probs, ckpt.config.train.threshold);
        expected = merge(expected, confusion(&pred, &lp.mask).unwrap()).unwrap();
        for ((&p, &g), &tag) in pred.pixels().iter().zip(lp.mask.pixels()).zip(lp.hardness.pixels()) {
            if tag.is_hard() {
                hard.record(p != 0, g != 0);
            }
        }
    }
    assert_eq!(ev.overall, expected);
    assert_eq!(ev.hard, hard);

    // shards merge to the whole
    let a = evaluate(&net, &ckpt.params, &data[..2], &ckpt.config, ckpt.t).unwrap();
    let b = evaluate(&net, &ckpt.params, &data[2..], &ckpt.config, ckpt.t).unwrap();
    let m = a.merge(&b).unwrap();
    assert_eq!((m.overall, m.per_tag, m.hard), (ev.overall, ev.per_tag, ev.hard));
    assert!((m.loss - ev.loss).abs() <= 1e-9 * ev.loss.abs().max(1.0));
}

#[test]
fn perfect_prediction_scores_one() {
    let data = tiny_data(3, 0);
    let mut ev = Evaluation::default();
    for lp in &data {
        ev.accumulate(&lp.mask, &lp.mask, &lp.hardness).unwrap();
    }
    let r = ev.report().unwrap();
    for v in r.values() {
        assert_eq!(v, 1.0);
    }
    let tags: usize = ev.per_tag.iter().map(|c| c.total() as usize).sum();
    assert_eq!(tags, 3 * 64 * 64);
}

#[test]
fn load_folder_reads_a_written_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(2, 0);
    write_sample(dir.path(), "00001.png", &data[1]).unwrap();
    write_sample(dir.path(), "00000.png", &data[0]).unwrap();
    let ds = load_folder(dir.path()).unwrap();
    assert_eq!(ds.names, ["00000.png", "00001.png"]);
    assert_eq!(ds.pairs, data);
}

#[test]
fn load_folder_thresholds_labels_at_128() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let lp = &tiny_data(1, 0)[0];
    write_rgb(&root.join("A/x.png"), &lp.pair.t1).unwrap();
    write_rgb(&root.join("B/x.png"), &lp.pair.t2).unwrap();
    std::fs::create_dir_all(root.join("label")).unwrap();
    let levels: Vec<u8> = (0..64 * 64).map(|i| (i % 256) as u8).collect();
    image::GrayImage::from_raw(64, 64, levels.clone())
        .unwrap()
        .save(root.join("label/x.png"))
        .unwrap();
    let ds = load_folder(root).unwrap();
    assert_eq!(ds.len(), 1);
    let expected: Vec<u8> = levels.iter().map(|&v| u8::from(v >= 128)).collect();
    assert_eq!(ds.pairs[0].mask.pixels(), expected.as_slice());
    assert!(ds.pairs[0].hardness.pixels().iter().all(|&t| t == HardnessTag::Easy));

    // {0, 255} masks survive a write/read cycle
    write_mask(&root.join("label/x.png"), &lp.mask).unwrap();
    assert_eq!(read_mask(&root.join("label/x.png")).unwrap(), lp.mask);
}

#[test]
fn load_folder_reports_missing_and_mismatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let lp = &tiny_data(1, 0)[0];
    write_rgb(&root.join("A/x.png"), &lp.pair.t1).unwrap();
    write_rgb(&root.join("B/x.png"), &lp.pair.t2).unwrap();
    let err = load_folder(root).unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
    assert!(err.to_string().contains("label"), "{err}");

    write_mask(&root.join("label/x.png"), &Grid::filled(32, 64, 0)).unwrap();
    let err = load_folder(root).unwrap_err();
    assert!(err.to_string().contains("32x64"), "{err}");
}

#[test]
fn same_seed_runs_agree() {
    let data = tiny_data(4, 0);
    let run = || {
        let mut losses = Vec::new();
        let ckpt = train(tiny_config(), &data, None, &mut |ev| {
            if let hsonet::trainer::Event::Step(r) = ev {
                losses.push(r.loss);
            }
        })
        .unwrap();
        (losses, ckpt.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn constant_half_probability_scores_chance_accuracy() {
    // p = 0.5 everywhere thresholds to all-positive, so OA equals the
    // positive rate: 0.5 in expectation on balanced masks
    use rand::{Rng, SeedableRng};
    let probs = Grid::filled(64, 64, 0.5);
    let pred = threshold(&probs, 0.5);
    for seed in 0..20 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ev = Evaluation::default();
        for _ in 0..4 {
            let gt = Grid::from_fn(64, 64, |_, _| u8::from(rng.random_bool(0.5)));
            ev.accumulate(&pred, &gt, &Grid::filled(64, 64, HardnessTag::Easy)).unwrap();
        }
        // 4 * 4096 Bernoulli(0.5) pixels: sd = 0.0039, band is 5 sd
        let oa = ev.report().unwrap().oa;
        assert!((oa - 0.5).abs() < 0.02, "seed {seed}: OA {oa}");
    }
}
