use fsaa_core::autodiff::Tape;
use fsaa_core::data::synthetic_shapes_generate;
use fsaa_core::episodic::{episode_losses, forward_episode, sample_episode, EpisodeSpec};
use fsaa_core::gradcheck::{check_gradients, check_op, relative_error, Objective, OPS};
use fsaa_core::model::{Model, ModelConfig, Net, NormMode};
use fsaa_core::{Model64, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn every_op_passes_finite_differences() {
    for op in OPS {
        let report = check_op(op, 2024, 5).unwrap();
        assert!(report.instances >= 5);
        assert!(report.passed(1e-4), "{op}: {}", report.worst_rel_err);
    }
}

#[test]
fn sigmoid_gradient_matches_closed_form() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::scalar(1.0).with_grad());
    let g = tape.backward(x.sigmoid().sum()).unwrap().wrt(x)[0];
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!(relative_error(g, s * (1.0 - s)) < 1e-6);
}

fn micro_model(config: ModelConfig, seed: u64) -> Model64 {
    Model::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Central difference of `loss` w.r.t. trainable coordinate `(tensor, index)`.
/// The whole network has many relu/max-pool kinks; a 1e-3 step crosses
/// them often enough to dominate the error, 1e-4 rarely does.
fn numeric(model: &Model64, tensor: usize, index: usize, loss: &dyn Fn(&Model64) -> f64) -> f64 {
    let mut m = model.clone();
    let p = m.params.trainable_mut()[tensor].data()[index];
    let h = 1e-4 * p.abs().max(1.0);
    m.params.trainable_mut()[tensor].data_mut()[index] = p + h;
    let up = loss(&m);
    m.params.trainable_mut()[tensor].data_mut()[index] = p - h;
    let down = loss(&m);
    (up - down) / (2.0 * h)
}

#[test]
fn full_model_loss_gradient_on_micro_episode() {
    let data = synthetic_shapes_generate(4, 4, 28, 3).unwrap();
    let episode = sample_episode(
        &data,
        &EpisodeSpec::new(2, 1, 1).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let model = micro_model(ModelConfig::grayscale28(), 5);
    let loss = |m: &Model64| {
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let net = Net::new(&m.config, &m.params, &bound);
        let (scores, _) = forward_episode(&net, &tape, &episode, NormMode::Train).unwrap();
        episode_losses(&scores, &episode.query_labels).unwrap().total.scalar()
    };
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (scores, _) = forward_episode(&net, &tape, &episode, NormMode::Train).unwrap();
    let grads = tape
        .backward(episode_losses(&scores, &episode.query_labels).unwrap().total)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let count = bound.vars().len();
    for _ in 0..20 {
        let t = rng.gen_range(0..count);
        let i = rng.gen_range(0..bound.vars()[t].numel());
        let analytic = grads.wrt(bound.vars()[t])[i];
        let n = numeric(&model, t, i, &loss);
        assert!(relative_error(analytic, n) < 1e-3, "tensor {t}[{i}]: {analytic} vs {n}");
    }
}

#[test]
fn pair_score_gradient_reaches_all_four_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = Tensor::<f64>::from_fn(&[2, 1, 28, 28], |_| rng.gen_range(0.0..1.0));
    let model = micro_model(ModelConfig::grayscale28(), 8);
    let d = |m: &Model64| {
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let net = Net::new(&m.config, &m.params, &bound);
        let (f, _) = net
            .extract_features(tape.constant(images.clone()), NormMode::Train)
            .unwrap();
        let w = net.row_weights(f).unwrap();
        net.pair_scores(f, w, &[(0, 1)]).unwrap().sum().scalar()
    };
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (f, _) = net
        .extract_features(tape.constant(images.clone()), NormMode::Train)
        .unwrap();
    let w = net.row_weights(f).unwrap();
    let grads = tape.backward(net.pair_scores(f, w, &[(0, 1)]).unwrap().sum()).unwrap();
    let names: Vec<String> = model.params.named_trainable().into_iter().map(|(n, _)| n).collect();
    for group in ["extractor", "meta_weight_gen", "spatial_attn_gen", "classifier"] {
        let members: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(group)).collect();
        assert!(!members.is_empty(), "{group}");
        let mut nonzero = false;
        for k in 0..5 {
            let t = members[(k * 7) % members.len()];
            let i = rng.gen_range(0..bound.vars()[t].numel());
            let analytic = grads.wrt(bound.vars()[t])[i];
            nonzero |= analytic != 0.0;
            let n = numeric(&model, t, i, &d);
            assert!(
                relative_error(analytic, n) < 1e-3,
                "{}[{i}]: {analytic} vs {n}",
                names[t]
            );
        }
        let total: f64 = members
            .iter()
            .map(|&t| grads.wrt(bound.vars()[t]).iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert!(nonzero || total > 0.0, "{group} receives no gradient");
    }
}

#[test]
fn meta_weight_gradient_wrt_features() {
    let model = micro_model(ModelConfig::grayscale28(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let fs = Tensor::<f64>::from_fn(&[1, 64, 3, 3], |_| rng.sample::<f64, _>(StandardNormal));
    let objective: &Objective<'_> = &|tape, inputs| {
        let bound = model.params.bind(tape);
        let net = Net::new(&model.config, &model.params, &bound);
        Ok(net.meta_weights(inputs[0])?.mean())
    };
    let (worst, probes) = check_gradients(objective, &[fs], &[], &mut rng).unwrap();
    assert!(probes > 0);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let data = synthetic_shapes_generate(5, 6, 28, 11).unwrap();
    let episode = sample_episode(
        &data,
        &EpisodeSpec::new(3, 2, 2).unwrap(),
        &mut ChaCha8Rng::seed_from_u64(12),
    )
    .unwrap();
    let model = micro_model(ModelConfig::grayscale28(), 13);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let net = Net::new(&model.config, &model.params, &bound);
    let (scores, _) = forward_episode(&net, &tape, &episode, NormMode::Train).unwrap();
    let losses = episode_losses(&scores, &episode.query_labels).unwrap();
    let g_total = tape.backward(losses.total).unwrap();
    let g_att = tape.backward(losses.attention).unwrap();
    let g_ce = tape.backward(losses.classification.unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let v = bound.vars()[rng.gen_range(0..bound.vars().len())];
        let i = rng.gen_range(0..v.numel());
        let sum = g_att.wrt(v)[i] + g_ce.wrt(v)[i];
        assert!((g_total.wrt(v)[i] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
    }
}
