use performa::backbone::{train_linear, TrainOptions};
use performa::baselines::{
    no_adaptation_decide, oracle_distribution_decide, oracle_finetune_step, oracle_next_marginals,
    pap_decide, self_consistent_marginals, Anticipation, PapSettings, Strategy,
};
use performa::mechanism::{induced_marginals, ShiftConfig};
use performa::world::{LabeledSample, WorldSpec};
use performa::{
    AdapterNet, Backbone, DecisionRule, FinetuneScope, LabelMarginals, SufficientStatistic,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> WorldSpec {
    WorldSpec::new(4, 1, 3, 1.2, 1.0, 19).unwrap()
}

fn draw(world: &WorldSpec, m: &LabelMarginals, n: usize, seed: u64) -> Vec<LabeledSample> {
    world
        .sample_with_marginals(m, n, None, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

/// A [K, K, K, K] rectifier network computing `softmax(S / tau)` exactly for
/// `S` in `[0, 1]^K`.
fn exact_mechanism(k: usize, tau: f64) -> AdapterNet {
    let mut net = AdapterNet::new(k, &[k, k], 0).unwrap();
    let p = net.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    let layer = k * k + k;
    for l in 0..3 {
        let scale = if l == 2 { 1.0 / tau } else { 1.0 };
        for i in 0..k {
            p[l * layer + i * k + i] = scale;
        }
    }
    net
}

#[test]
fn exact_mechanism_network_is_exact() {
    let net = exact_mechanism(4, -0.2);
    let s = SufficientStatistic::new(vec![0.2, 0.9, 0.5, 0.55]).unwrap();
    let a = net.forward(&s).unwrap();
    let b = induced_marginals(&s, -0.2).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn no_adaptation_is_plain_argmax() {
    let w = world();
    let model = Backbone::bayes_oracle("o", w.clone(), LabelMarginals::uniform(4), None).unwrap();
    for s in draw(&w, &LabelMarginals::uniform(4), 200, 1) {
        let d = no_adaptation_decide(&model, &s.x).unwrap();
        assert_eq!(d, model.predict_probs(&s.x).unwrap().argmax());
    }
    let sym = WorldSpec::from_means(2, 1, 1, 1.0, vec![-1.0, 1.0], vec![1.0], 0).unwrap();
    let m = Backbone::bayes_oracle("s", sym, LabelMarginals::uniform(2), None).unwrap();
    assert_eq!(no_adaptation_decide(&m, &[0.0]).unwrap(), 0);
}

#[test]
fn oracle_distribution_reductions() {
    let w = world();
    let pre = LabelMarginals::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let model = Backbone::bayes_oracle("o", w.clone(), pre.clone(), None).unwrap();
    for s in draw(&w, &LabelMarginals::uniform(4), 200, 2) {
        assert_eq!(
            oracle_distribution_decide(&model, &s.x, &pre).unwrap(),
            no_adaptation_decide(&model, &s.x).unwrap()
        );
    }
    let flat = Backbone::bayes_oracle("o", w.clone(), LabelMarginals::uniform(4), None).unwrap();
    for s in draw(&w, &LabelMarginals::uniform(4), 200, 3) {
        let j = LabelMarginals::one_hot(4, 2);
        assert_eq!(oracle_distribution_decide(&flat, &s.x, &j).unwrap(), 2);
    }
}

#[test]
fn oracle_distribution_reaches_shifted_bayes_accuracy() {
    let w = world();
    let model = Backbone::bayes_oracle("o", w.clone(), LabelMarginals::uniform(4), None).unwrap();
    let shifted = LabelMarginals::new(vec![0.05, 0.15, 0.5, 0.3]).unwrap();
    let test = draw(&w, &shifted, 20_000, 4);
    let ours = test
        .iter()
        .filter(|s| oracle_distribution_decide(&model, &s.x, &shifted).unwrap() == s.y)
        .count();
    let bayes = test
        .iter()
        .filter(|s| w.bayes_posterior(&shifted, &s.x, None).unwrap().argmax() == s.y)
        .count();
    assert_eq!(ours, bayes);
}

#[test]
fn pap_reductions() {
    let w = world();
    let model = Backbone::bayes_oracle("o", w.clone(), LabelMarginals::uniform(4), None).unwrap();
    let stat = SufficientStatistic::new(vec![0.7, 0.4, 0.9, 0.6]).unwrap();
    let mut flat = AdapterNet::new(4, &[8, 8], 1).unwrap();
    flat.zero_output_layer();
    let exact = exact_mechanism(4, -0.15);
    let next = induced_marginals(&stat, -0.15).unwrap();
    for s in draw(&w, &LabelMarginals::uniform(4), 300, 5) {
        assert_eq!(
            pap_decide(&model, &s.x, &flat, &stat).unwrap(),
            no_adaptation_decide(&model, &s.x).unwrap()
        );
        let a = pap_decide(&model, &s.x, &exact, &stat).unwrap();
        assert_eq!(a, oracle_distribution_decide(&model, &s.x, &next).unwrap());
        assert_eq!(a, pap_decide(&model, &s.x, &exact, &stat).unwrap());
    }
}

fn linear(w: &WorldSpec) -> Backbone {
    let data = draw(w, &LabelMarginals::uniform(4), 4000, 6);
    train_linear("lin", 4, &data, 30, 0.1, TrainOptions::default()).unwrap()
}

#[test]
fn finetune_with_zero_epochs_is_no_adaptation() {
    let w = world();
    let base = linear(&w);
    let data = draw(&w, &LabelMarginals::uniform(4), 100, 7);
    let same = oracle_finetune_step(
        &base,
        &data,
        0,
        FinetuneScope::All,
        0.05,
        TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(same, base);
}

#[test]
fn finetune_on_skew_hurts_after_reversal() {
    let w = world();
    let base = linear(&w);
    let skew = LabelMarginals::new(vec![0.85, 0.05, 0.05, 0.05]).unwrap();
    let reversed = LabelMarginals::new(vec![0.02, 0.32, 0.33, 0.33]).unwrap();
    let round = draw(&w, &skew, 1000, 8);
    let tuned = oracle_finetune_step(
        &base,
        &round,
        25,
        FinetuneScope::All,
        0.05,
        TrainOptions::default(),
    )
    .unwrap();
    let next = draw(&w, &reversed, 20_000, 9);
    let frozen = base.accuracy(&DecisionRule::Argmax, &next).unwrap();
    let after = tuned.accuracy(&DecisionRule::Argmax, &next).unwrap();
    assert!(after < frozen, "fine-tuned {after} vs frozen {frozen}");
}

#[test]
fn self_consistent_point_reproduces_itself() {
    let w = WorldSpec::new(6, 1, 4, 1.5, 1.0, 23).unwrap();
    let model = Backbone::bayes_oracle("o", w.clone(), LabelMarginals::uniform(6), None).unwrap();
    let sample = draw(&w, &LabelMarginals::uniform(6), 4000, 10);
    let probs = model.predict_batch(&sample).unwrap();
    let shift = ShiftConfig::new(-0.5).unwrap();
    let start = LabelMarginals::uniform(6);
    let m = oracle_next_marginals(&probs, &sample, &model.lambda_pre, &shift, &start).unwrap();
    let stat = model
        .class_accuracies(&DecisionRule::Adjusted(m.clone()), &sample)
        .unwrap();
    let image = induced_marginals(&stat, -0.5).unwrap();
    let residual: f64 = image
        .as_slice()
        .iter()
        .zip(m.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(residual < 0.02, "residual {residual}");

    let same = self_consistent_marginals(&probs, &sample, &model.lambda_pre, &start, |s| {
        induced_marginals(s, -0.5)
    })
    .unwrap();
    assert_eq!(same, m);
}

#[test]
fn strategies_serialize_and_label() {
    let all = [
        Strategy::NoAdaptation,
        Strategy::OracleDistribution,
        Strategy::oracle_finetune(25, FinetuneScope::LastBiasOnly),
        Strategy::pap(),
        Strategy::Pap(PapSettings {
            anticipation: Anticipation::PreviousStatistic,
            ..PapSettings::default()
        }),
    ];
    let labels: Vec<&str> = all.iter().map(|s| s.label()).collect();
    assert_eq!(labels, ["none", "oracle-dist", "oracle-ft", "pap", "pap"]);
    for s in all {
        let back: Strategy = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
    let d = PapSettings::default();
    assert_eq!(d.hidden, vec![256, 256]);
    assert_eq!(d.lr, 1e-4);
    assert_eq!(d.decay, 0.995);
}
