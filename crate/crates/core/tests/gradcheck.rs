//! Finite differences against the reverse pass, in double precision.

use hsonet_core::encoder::{BackboneConfig, FeaturePyramid};
use hsonet_core::fs_relation::FsRelation;
use hsonet_core::loss::{compute_loss, eo_loss_fixed, EoLossConfig, LossKind, ScheduleState};
use hsonet_core::nn::{Ctx, Mode};
use hsonet_core::{Graph, HsoNet, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(probe * R_1..R_4)` through the relation module.
fn relation_objective(rel: &FsRelation, store: &ParamStore<f64>, inputs: &[Tensor<f64>; 4], probes: &[Tensor<f64>; 4]) -> f64 {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, Mode::Train);
    let levels = inputs.clone().map(|t| cx.graph.input(t));
    let out = rel.forward(&mut cx, &FeaturePyramid { levels }).unwrap();
    (0..4)
        .map(|i| g.value(out.enhanced.levels[i]).data().iter().zip(probes[i].data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

#[test]
fn relation_gate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let rel = FsRelation::new(&mut store, 6, &mut rng);
    let inputs = [8, 4, 2, 2].map(|s| random_tensor(&mut rng, &[2, 6, s, s]));
    let probes = [8, 4, 2, 2].map(|s| random_tensor(&mut rng, &[2, 6, s, s]));

    let mut g = Graph::new();
    let (vars, out) = {
        let mut cx = Ctx::new(&mut g, &store, Mode::Train);
        let vars = inputs.clone().map(|t| cx.graph.input_with_grad(t));
        let out = rel.forward(&mut cx, &FeaturePyramid { levels: vars }).unwrap();
        (vars, out)
    };
    // the objective is linear in each R_i: one backward per level seeded
    // with its probe, accumulated
    let mut grads_in: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut grads_p: Vec<(hsonet_core::ParamId, Tensor<f64>)> = Vec::new();
    for i in 0..4 {
        let gr = g.clone().backward(out.enhanced.levels[i], probes[i].clone()).unwrap();
        for (k, v) in vars.iter().enumerate() {
            if let Some(t) = gr.wrt(*v) {
                grads_in[k].add_assign(t);
            }
        }
        for (id, t) in gr.params() {
            match grads_p.iter_mut().find(|(j, _)| *j == id) {
                Some((_, acc)) => acc.add_assign(t),
                None => grads_p.push((id, t.clone())),
            }
        }
    }

    let mut checked = 0;
    for k in 0..4 {
        for j in [0, 3, inputs[k].numel() / 2, inputs[k].numel() - 1] {
            let mut up = inputs.clone();
            let mut dn = inputs.clone();
            up[k].data_mut()[j] += H;
            dn[k].data_mut()[j] -= H;
            let fd = (relation_objective(&rel, &store, &up, &probes) - relation_objective(&rel, &store, &dn, &probes)) / (2.0 * H);
            let an = grads_in[k].data()[j];
            assert!(rel_err(fd, an) <= TOL, "input level {k} elem {j}: fd {fd} analytic {an}");
            checked += 1;
        }
    }
    // scene-vector path and projections
    let names = ["relation.scene.weight", "relation.scene.bias", "relation.project4.conv.weight", "relation.project1.conv.weight", "relation.reencode2.conv.weight"];
    for name in names {
        let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let an_t = &grads_p.iter().find(|(j, _)| *j == id).unwrap().1;
        for j in [0, an_t.numel() / 3, an_t.numel() - 1] {
            let mut s_up = store.clone();
            let mut s_dn = store.clone();
            s_up.get_mut(id).data_mut()[j] += H;
            s_dn.get_mut(id).data_mut()[j] -= H;
            let fd = (relation_objective(&rel, &s_up, &inputs, &probes) - relation_objective(&rel, &s_dn, &inputs, &probes)) / (2.0 * H);
            let an = an_t.data()[j];
            assert!(rel_err(fd, an) <= TOL, "{name}[{j}]: fd {fd} analytic {an}");
            checked += 1;
        }
    }
    assert!(checked >= 30);
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [4, 4, 6, 6],
            blocks: [1, 1, 1, 1],
            pyramid_dim: 6,
        },
        decoder_dim: 4,
        head_dim: 4,
        bn_momentum: 0.1,
    }
}

fn toy_probs(net: &HsoNet, store: &ParamStore<f64>, t1: &Tensor<f64>, t2: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, Mode::Train);
    let a = cx.graph.input(t1.clone());
    let b = cx.graph.input(t2.clone());
    let out = net.forward(&mut cx, a, b).unwrap();
    g.value(out.prediction.probs).clone()
}

#[test]
fn toy_network_loss_gradients() {
    let (net, store) = HsoNet::init::<f64>(&toy_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t1 = random_tensor(&mut rng, &[2, 3, 32, 32]);
    let t2 = random_tensor(&mut rng, &[2, 3, 32, 32]);
    let y = Tensor::from_vec(&[2, 1, 32, 32], (0..2048).map(|i| if (i / 7) % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let cfg = EoLossConfig {
        gamma: 2.0,
        step: 100,
        ..Default::default()
    };
    let state = ScheduleState { t: 40 };

    let mut g = Graph::new();
    let probs_var = {
        let mut cx = Ctx::new(&mut g, &store, Mode::Train);
        let a = cx.graph.input(t1.clone());
        let b = cx.graph.input(t2.clone());
        net.forward(&mut cx, a, b).unwrap().prediction.probs
    };
    let probs = g.value(probs_var).clone();
    let out = compute_loss(LossKind::Eo, probs.data(), y.data(), state, &cfg).unwrap();
    let px = out.pixels.as_ref().unwrap();
    let (lambda, z) = (px.lambda, px.z);
    assert!(lambda > 0.0 && lambda < 1.0);
    let grads = g.backward(probs_var, Tensor::from_vec(probs.shape(), out.grad.clone()).unwrap()).unwrap();

    let objective = |s: &ParamStore<f64>| eo_loss_fixed(toy_probs(&net, s, &t1, &t2).data(), y.data(), lambda, z, &cfg).unwrap();
    let groups = ["encoder.stem", "encoder.stage", "encoder.lateral", "relation.", "decoder.branch", "decoder.diff", "head."];
    let mut worst: f64 = 0.0;
    for group in groups {
        let ids: Vec<_> = store
            .trainable_ids()
            .filter(|&id| store.entry(id).name.starts_with(group))
            .collect();
        assert!(!ids.is_empty(), "no parameters under {group}");
        for pick in 0..3 {
            let id = ids[rng.random_range(0..ids.len())];
            let an_t = grads.param(id).unwrap_or_else(|| panic!("no gradient for {}", store.entry(id).name));
            let j = rng.random_range(0..an_t.numel());
            let mut up = store.clone();
            let mut dn = store.clone();
            up.get_mut(id).data_mut()[j] += H;
            dn.get_mut(id).data_mut()[j] -= H;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * H);
            let an = an_t.data()[j];
            let e = rel_err(fd, an);
            worst = worst.max(e);
            assert!(e <= TOL, "{} [{j}] (pick {pick}): fd {fd} analytic {an}", store.entry(id).name);
        }
    }
    println!("worst relative error {worst:.2e}");
}
