use hsonet_core::decoder::{branch_diff, fuse_level_diff, skip_concat};
use hsonet_core::encoder::{BackboneConfig, Encoder, FeaturePyramid};
use hsonet_core::fs_relation::FsRelation;
use hsonet_core::nn::{Conv2d, Ctx, Mode};
use hsonet_core::{Error, Graph, HsoNet, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [4, 6, 8, 8],
            blocks: [1, 1, 1, 1],
            pyramid_dim: 8,
        },
        decoder_dim: 6,
        head_dim: 4,
        bn_momentum: 0.1,
    }
}

/// 1x1 convolution by explicit loops.
fn pointwise(store: &ParamStore<f64>, conv: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let w = store.get(conv.weight);
    let (n, c, h, wd) = x.dims4();
    let o = w.shape()[0];
    let mut out = vec![0.0; n * o * h * wd];
    for b in 0..n {
        for oc in 0..o {
            let bias = conv.bias.map_or(0.0, |id| store.get(id).data()[oc]);
            for p in 0..h * wd {
                let mut s = bias;
                for ic in 0..c {
                    s += w.data()[oc * c + ic] * x.data()[(b * c + ic) * h * wd + p];
                }
                out[(b * o + oc) * h * wd + p] = s;
            }
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out).unwrap()
}

fn nearest_up(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for nc in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[nc * 4 * h * w + y * 2 * w + xx] = x.data()[nc * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).unwrap()
}

#[test]
fn stage_strides() {
    for (side, want) in [(256usize, [64usize, 32, 16, 8]), (32, [8, 4, 2, 1])] {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
        let x = cx.graph.input(Tensor::zeros(&[1, 3, side, side]));
        let f = enc.extract_features(&mut cx, x).unwrap();
        let p = enc.build_pyramid(&mut cx, &f).unwrap();
        for i in 0..4 {
            let fs = cx.graph.value(f.levels[i]).shape().to_vec();
            assert_eq!((fs[2], fs[3]), (want[i], want[i]));
            assert_eq!(fs[1], BackboneConfig::default().widths[i]);
            assert_eq!(cx.graph.value(p.levels[i]).shape(), [1, 64, want[i], want[i]]);
        }
    }
}

#[test]
fn indivisible_input_rejected() {
    let (net, store) = HsoNet::init::<f32>(&tiny_config(), 0).unwrap();
    let err = net.predict(&store, Tensor::zeros(&[1, 3, 48, 64]), Tensor::zeros(&[1, 3, 48, 64])).unwrap_err();
    assert!(matches!(err, Error::NotDivisible { height: 48, .. }), "{err:?}");
    let err = net.predict(&store, Tensor::zeros(&[1, 3, 32, 32]), Tensor::zeros(&[1, 3, 64, 64])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn pyramid_recurrence_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny_config().backbone;
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Train);
    let x = cx.graph.input(random_tensor(&mut rng, &[2, 3, 64, 64]));
    let f = enc.extract_features(&mut cx, x).unwrap();
    let p = enc.build_pyramid(&mut cx, &f).unwrap();
    let lat = enc.lateral();
    let mut above = pointwise(&store, &lat[3], g.value(f.levels[3]));
    assert!(above.max_abs_diff(g.value(p.levels[3])) <= 1e-12);
    for i in (0..3).rev() {
        let tau = pointwise(&store, &lat[i], g.value(f.levels[i]));
        above = tau.zip_map(&nearest_up(&above), |a, b| a + b).unwrap();
        assert!(above.max_abs_diff(g.value(p.levels[i])) <= 1e-6, "level {}", i + 1);
    }
}

fn relation_fixture(seed: u64) -> (FsRelation, ParamStore<f64>, [Tensor<f64>; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let rel = FsRelation::new(&mut store, 8, &mut rng);
    let levels = [16, 8, 4, 2].map(|s| random_tensor(&mut rng, &[2, 8, s, s]));
    (rel, store, levels)
}

#[test]
fn relation_pieces_match_oracles() {
    let (rel, store, levels) = relation_fixture(5);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    let vars = levels.clone().map(|t| cx.graph.input(t));
    let out = rel.forward(&mut cx, &FeaturePyramid { levels: vars }).unwrap();

    // pool-then-project scene vector
    let lin = rel.scene_projection();
    let (w, b) = (store.get(lin.weight), store.get(lin.bias));
    let p4 = &levels[3];
    let sv = g.value(out.scene);
    for n in 0..2 {
        for o in 0..8 {
            let mut s = b.data()[o];
            for c in 0..8 {
                let mean: f64 = p4.item(n)[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0;
                s += w.data()[o * 8 + c] * mean;
            }
            assert!((s - sv.data()[n * 8 + o]).abs() < 1e-6);
        }
    }
    for i in 0..4 {
        let q = g.value(out.projected.levels[i]);
        assert!(q.data().iter().all(|&v| v >= 0.0));
        let r = g.value(out.relations.levels[i]);
        let (_, _, h, wd) = q.dims4();
        for n in 0..2 {
            for px in 0..h * wd {
                let dot: f64 = (0..8).map(|c| sv.data()[n * 8 + c] * q.item(n)[c * h * wd + px]).sum();
                assert!((dot - r.item(n)[px]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn gate_limits_and_range() {
    let (rel, store, levels) = relation_fixture(6);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    let p = cx.graph.input(levels[0].clone());
    let eps = rel.reencoder(0).forward(&mut cx, p).unwrap();
    let half = {
        let r = cx.graph.input(Tensor::zeros(&[2, 1, 16, 16]));
        rel.enhance(&mut cx, 0, p, r).unwrap()
    };
    let high = {
        let r = cx.graph.input(Tensor::full(&[2, 1, 16, 16], 60.0));
        rel.enhance(&mut cx, 0, p, r).unwrap()
    };
    let low = {
        let r = cx.graph.input(Tensor::full(&[2, 1, 16, 16], -60.0));
        rel.enhance(&mut cx, 0, p, r).unwrap()
    };
    let e = g.value(eps);
    for (((&ev, &h), &hi), &lo) in e.data().iter().zip(g.value(half).data()).zip(g.value(high).data()).zip(g.value(low).data()) {
        assert_eq!(h, 0.5 * ev);
        assert!((hi - ev).abs() <= 1e-12 * ev.abs().max(1.0));
        assert!(lo.abs() <= 1e-12 * ev.abs().max(1.0));
        assert!(0.0 <= h && h <= ev);
    }
}

#[test]
fn diff_and_concat_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[1, 3, 4, 4]);
    let b = random_tensor(&mut rng, &[1, 3, 4, 4]);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    let (va, vb) = (cx.graph.input(a.clone()), cx.graph.input(b.clone()));
    let ab = branch_diff(&mut cx, va, vb).unwrap();
    let ba = branch_diff(&mut cx, vb, va).unwrap();
    let t = skip_concat(&mut cx, va, vb).unwrap();
    let pa = hsonet_core::fs_relation::RelationEnhancedPyramid { levels: [va; 4] };
    let pb = hsonet_core::fs_relation::RelationEnhancedPyramid { levels: [vb; 4] };
    let c = fuse_level_diff(&mut cx, &pa, &pb).unwrap();
    let oracle = a.zip_map(&b, |x, y| (x - y).abs()).unwrap();
    assert_eq!(g.value(ab), &oracle);
    assert_eq!(g.value(ba), &oracle);
    assert_eq!(g.value(c.levels[2]), &oracle);
    let tv = g.value(t);
    assert_eq!(tv.shape(), [1, 6, 4, 4]);
    assert_eq!(&tv.data()[..48], a.data());
    assert_eq!(&tv.data()[48..], b.data());
}

#[test]
fn siamese_null_on_fifty_images() {
    let (net, store) = HsoNet::init::<f32>(&tiny_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let imgs: Tensor<f32> = random_tensor(&mut rng, &[5, 3, 64, 64]).cast();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &store, mode);
            let a = cx.graph.input(imgs.clone());
            let b = cx.graph.input(imgs.clone());
            let out = net.forward(&mut cx, a, b).unwrap();
            assert!(g.value(out.change).data().iter().all(|&v| v == 0.0));
            for level in out.diff.levels {
                assert!(g.value(level).data().iter().all(|&v| v == 0.0));
            }
            let probs = g.value(out.prediction.probs);
            assert_eq!(probs.shape(), [5, 1, 64, 64]);
            assert!(probs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn resolution_round_trip() {
    let (net, store) = HsoNet::init::<f32>(&tiny_config(), 1).unwrap();
    for (h, w) in [(32, 32), (64, 96), (96, 32)] {
        let p = net.predict(&store, Tensor::zeros(&[1, 3, h, w]), Tensor::full(&[1, 3, h, w], 0.5)).unwrap();
        assert_eq!(p.shape(), [1, 1, h, w]);
    }
}

#[test]
fn aggregate_is_mean_then_pointwise_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let deo = hsonet_core::decoder::Deo::new(&mut store, "d", 8, 6, &mut rng);
    let maps: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[2, 6, 8, 8])).collect();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    let vars = [0, 1, 2, 3].map(|i| cx.graph.input(maps[i].clone()));
    let out = deo.aggregate(&mut cx, vars).unwrap();
    let mut mean = Tensor::zeros(&[2, 6, 8, 8]);
    for m in &maps {
        mean.add_assign(m);
    }
    let mean = mean.map(|v| v / 4.0);
    assert!(pointwise(&store, deo.mix(), &mean).max_abs_diff(g.value(out)) <= 1e-6);

    // level 4 needs three doublings, level 1 none
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    let l4 = cx.graph.input(random_tensor(&mut rng, &[1, 8, 2, 2]));
    let l1 = cx.graph.input(random_tensor(&mut rng, &[1, 8, 16, 16]));
    let u4 = deo.upsample_level(&mut cx, 3, l4).unwrap();
    let u1 = deo.upsample_level(&mut cx, 0, l1).unwrap();
    assert_eq!(g.value(u4).shape(), [1, 6, 16, 16]);
    assert_eq!(g.value(u1).shape(), [1, 6, 16, 16]);
    assert_eq!(deo.level(3).upsamples(), 3);
    assert_eq!(deo.level(0).upsamples(), 0);
}
