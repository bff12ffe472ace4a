use performa::backbone::{train_linear, TrainOptions};
use performa::baselines::{PapSettings, Strategy};
use performa::mechanism::{balanced_evaluation, calibrate_tau, induced_marginals, ShiftConfig};
use performa::trajectory::{
    anticipate_accuracy, continue_trajectory, mean_accuracy, post_deployment_accuracy,
    rank_candidates, run_trajectory, run_trajectory_with_state, to_csv_string, TrajectoryConfig,
    TrajectoryState, CSV_HEADER,
};
use performa::world::WorldSpec;
use performa::{AdapterNet, Backbone, Error, FinetuneScope, LabelMarginals, SufficientStatistic};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> WorldSpec {
    WorldSpec::new(5, 1, 4, 1.5, 1.0, 3).unwrap()
}

fn oracle(w: &WorldSpec) -> Backbone {
    Backbone::bayes_oracle(
        "oracle",
        w.clone(),
        LabelMarginals::uniform(w.num_classes()),
        None,
    )
    .unwrap()
}

fn linear(w: &WorldSpec) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = w
        .sample_with_marginals(
            &LabelMarginals::uniform(w.num_classes()),
            5000,
            None,
            &mut rng,
        )
        .unwrap();
    train_linear(
        "linear",
        w.num_classes(),
        &data,
        20,
        0.1,
        TrainOptions::default(),
    )
    .unwrap()
}

fn small_pap() -> Strategy {
    Strategy::Pap(PapSettings {
        hidden: vec![32, 32],
        lr: 1e-3,
        ..PapSettings::default()
    })
}

fn config(strategy: Strategy, tau: f64, seed: u64, rounds: usize) -> TrajectoryConfig {
    let mut c = TrajectoryConfig::new(ShiftConfig::new(tau).unwrap(), strategy, seed);
    c.rounds = rounds;
    c.train_n = 300;
    c.test_n = 500;
    c
}

fn all_strategies() -> Vec<Strategy> {
    vec![
        Strategy::NoAdaptation,
        Strategy::OracleDistribution,
        Strategy::oracle_finetune(3, FinetuneScope::All),
        small_pap(),
    ]
}

#[test]
fn defaults_follow_protocol() {
    let c = TrajectoryConfig::new(ShiftConfig::new(-0.1).unwrap(), Strategy::NoAdaptation, 0);
    assert_eq!(
        (c.rounds, c.train_n, c.test_n, c.alpha),
        (200, 1000, 2000, 100.0)
    );
}

#[test]
fn single_round_is_initial_evaluation() {
    let w = world();
    let recs = run_trajectory(
        w.clone(),
        oracle(&w),
        &config(Strategy::NoAdaptation, -0.2, 0, 1),
    )
    .unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].round, 0);
    assert!(recs[0].adapter_kl.is_none() && recs[0].predicted_marginals.is_none());
}

#[test]
fn reruns_are_bit_identical() {
    let w = world();
    for s in all_strategies() {
        let c = config(s, -0.2, 4, 12);
        let a = to_csv_string(&run_trajectory(w.clone(), linear(&w), &c).unwrap()).unwrap();
        let b = to_csv_string(&run_trajectory(w.clone(), linear(&w), &c).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn csv_layout() {
    let w = world();
    let recs = run_trajectory(w.clone(), oracle(&w), &config(small_pap(), -0.2, 1, 4)).unwrap();
    let text = to_csv_string(&recs).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[3], "");
    let second: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(second[4].split(';').count(), 5);
    assert_eq!(second[5].split(';').count(), 5);
    assert!(second[3].parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn snapshots_resume_bit_exactly() {
    let w = world();
    for s in [
        small_pap(),
        Strategy::oracle_finetune(2, FinetuneScope::All),
    ] {
        let c = config(s, -0.2, 7, 16);
        let full = run_trajectory(w.clone(), linear(&w), &c).unwrap();
        let mut short = c.clone();
        short.rounds = 9;
        let (mut records, state) =
            run_trajectory_with_state(w.clone(), linear(&w), &short, None).unwrap();
        let mut restored = TrajectoryState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(restored, state);
        continue_trajectory(&mut restored, &c, &mut records).unwrap();
        assert_eq!(
            to_csv_string(&records).unwrap(),
            to_csv_string(&full).unwrap()
        );
    }
}

#[test]
fn recorded_marginals_are_sample_frequencies() {
    let w = world();
    let c = config(small_pap(), -0.2, 8, 1);
    let (_, mut state) = run_trajectory_with_state(w.clone(), oracle(&w), &c, None).unwrap();
    for _ in 0..8 {
        let mut rng = state.rng_state.clone();
        let sample = w
            .sample_with_marginals(
                &state.marginals,
                c.train_n,
                state.domain_filter.as_deref(),
                &mut rng,
            )
            .unwrap();
        let want = LabelMarginals::empirical(5, sample.iter().map(|s| s.y)).unwrap();
        let rec = state.run_round(&c).unwrap();
        assert_eq!(rec.true_marginals, want);
        for (a, b) in rec.true_marginals.as_slice().iter().zip(want.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn strategies_share_the_initial_round() {
    let w = world();
    let mut first = Vec::new();
    for s in all_strategies() {
        let recs = run_trajectory(w.clone(), linear(&w), &config(s, -0.2, 9, 3)).unwrap();
        first.push((
            recs[0].accuracy,
            recs[0].stat.clone(),
            recs[0].true_marginals.clone(),
        ));
    }
    assert!(first.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn no_shift_keeps_balanced_accuracy() {
    let w = world();
    let model = oracle(&w);
    let (_, balanced) = balanced_evaluation(&w, &model, 100_000, 1).unwrap();
    for s in [
        Strategy::NoAdaptation,
        Strategy::OracleDistribution,
        small_pap(),
    ] {
        let mut c = config(s, -1e6, 10, 25);
        c.alpha = 1e9;
        c.test_n = 4000;
        let recs = run_trajectory(w.clone(), model.clone(), &c).unwrap();
        let m = mean_accuracy(&recs, 1, 24).unwrap();
        assert!((m - balanced).abs() < 0.01, "{m} vs {balanced}");
    }
}

#[test]
fn no_adaptation_drops_by_the_calibrated_amount() {
    let w = WorldSpec::new(10, 1, 8, 2.0, 1.0, 11).unwrap();
    let model = oracle(&w);
    let cal = calibrate_tau(&w, &model, 0.10, 100_000, 3).unwrap();
    let mut c = TrajectoryConfig::new(
        ShiftConfig::new(cal.tau).unwrap(),
        Strategy::NoAdaptation,
        2,
    );
    c.rounds = 80;
    let recs = run_trajectory(w, model, &c).unwrap();
    let m = mean_accuracy(&recs, 20, 79).unwrap();
    assert!(
        (cal.baseline - m - 0.10).abs() < 0.02,
        "settled at {m}, baseline {}",
        cal.baseline
    );
}

#[test]
fn identity_switch_changes_nothing() {
    let w = world();
    let base = config(Strategy::OracleDistribution, -0.2, 11, 20);
    let mut switched = base.clone();
    switched.switch_schedule = vec![(5, oracle(&w))];
    let a = run_trajectory(w.clone(), oracle(&w), &base).unwrap();
    let b = run_trajectory(w.clone(), oracle(&w), &switched).unwrap();
    assert_eq!(to_csv_string(&a).unwrap(), to_csv_string(&b).unwrap());
}

#[test]
fn switch_validation_and_bookkeeping() {
    let w = world();
    let c = config(small_pap(), -0.2, 12, 1);
    let (_, mut state) = run_trajectory_with_state(w.clone(), oracle(&w), &c, None).unwrap();
    let other = WorldSpec::new(3, 1, 4, 1.0, 1.0, 0).unwrap();
    let wrong = Backbone::bayes_oracle("x", other, LabelMarginals::uniform(3), None).unwrap();
    assert!(matches!(
        state.switch_backbone(wrong),
        Err(Error::InvalidArgument(_))
    ));
    let adapter = state.adapter.clone();
    let better = oracle(&w).with_id("new");
    state.switch_backbone(better).unwrap();
    assert_eq!(state.adapter, adapter);
    assert_eq!(state.run_round(&c).unwrap().model_id, "new");
}

#[test]
fn switching_to_a_cleaner_backbone_helps() {
    let w = WorldSpec::new(6, 1, 4, 1.5, 1.0, 5).unwrap();
    let pre = LabelMarginals::uniform(6);
    let noisy = Backbone::corrupted_oracle("noisy", w.clone(), pre.clone(), 0.8, 1).unwrap();
    let clean = Backbone::bayes_oracle("clean", w.clone(), pre, None).unwrap();
    let mut better = 0;
    for seed in 0..5 {
        let mut c = config(Strategy::OracleDistribution, -0.2, seed, 121);
        c.switch_schedule = vec![(61, clean.clone())];
        let recs = run_trajectory(w.clone(), noisy.clone(), &c).unwrap();
        let before = mean_accuracy(&recs, 1, 60).unwrap();
        let after = mean_accuracy(&recs, 61, 120).unwrap();
        if after > before {
            better += 1;
        }
    }
    assert_eq!(better, 5);
}

#[test]
fn failing_round_keeps_partial_log() {
    let w = world();
    let c = config(Strategy::oracle_finetune(2, FinetuneScope::All), -0.2, 0, 5);
    let err = run_trajectory(w.clone(), oracle(&w), &c).unwrap_err();
    assert_eq!(err.records.len(), 1);
    assert!(matches!(err.source, Error::Unsupported(_)));
}

#[test]
fn anticipation_reference_cases() {
    let mut net = AdapterNet::new(3, &[8, 8], 0).unwrap();
    net.zero_output_layer();
    let s = SufficientStatistic::new(vec![0.2, 0.5, 0.9]).unwrap();
    let accs = SufficientStatistic::new(vec![0.3, 0.6, 0.9]).unwrap();
    assert!((anticipate_accuracy(&net, &s, &accs).unwrap() - 0.6).abs() < 1e-12);

    // Drive the output to one-hot on class 1 through the final bias.
    let n = net.num_params();
    net.params_mut()[n - 2] = 800.0;
    let est = anticipate_accuracy(&net, &s, &accs).unwrap();
    assert!((est - 0.6).abs() < 1e-12);
    net.params_mut()[n - 2] = 0.0;
    net.params_mut()[n - 1] = 800.0;
    assert!((anticipate_accuracy(&net, &s, &accs).unwrap() - 0.9).abs() < 1e-12);
}

#[test]
fn ranking_rules() {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = w
        .sample_with_marginals(&LabelMarginals::uniform(5), 2000, None, &mut rng)
        .unwrap();
    let net = AdapterNet::new(5, &[16, 16], 3).unwrap();
    let a = oracle(&w).with_id("b-model");
    let b = oracle(&w).with_id("a-model");
    let r = rank_candidates(&net, &sample, &[a.clone(), b]).unwrap();
    assert_eq!(r[0].estimate, r[1].estimate);
    assert_eq!(r[0].id, "a-model");
    assert!(rank_candidates(&net, &sample, &[a]).is_err());
}

#[test]
fn dominant_candidate_scores_higher() {
    for seed in 0..20 {
        let net = AdapterNet::new(4, &[16, 16], seed).unwrap();
        let s = SufficientStatistic::new(vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let low = SufficientStatistic::new(vec![0.4, 0.5, 0.6, 0.7]).unwrap();
        let high = SufficientStatistic::new(vec![0.41, 0.55, 0.61, 0.75]).unwrap();
        assert!(
            anticipate_accuracy(&net, &s, &high).unwrap()
                > anticipate_accuracy(&net, &s, &low).unwrap()
        );
    }
}

/// `softmax(S / tau)` as a rectifier network (see the baselines tests).
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
fn exact_mechanism_anticipates_post_deployment_accuracy() {
    let w = WorldSpec::new(10, 1, 8, 2.0, 1.0, 11).unwrap();
    let tau = -0.12;
    let shift = ShiftConfig::new(tau).unwrap();
    let net = exact_mechanism(10, tau);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let current = w
        .sample_with_marginals(&LabelMarginals::uniform(10), 100_000, None, &mut rng)
        .unwrap();
    let candidates: Vec<Backbone> = [0.0, 0.4, 0.8]
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            Backbone::corrupted_oracle(
                format!("c{i}"),
                w.clone(),
                LabelMarginals::uniform(10),
                e,
                9,
            )
            .unwrap()
        })
        .collect();
    for est in rank_candidates(&net, &current, &candidates).unwrap() {
        let c = candidates.iter().find(|c| c.id == est.id).unwrap();
        let truth =
            post_deployment_accuracy(&w, c, &est.class_accuracies, &shift, 100_000, 6).unwrap();
        assert!(
            (est.estimate - truth).abs() < 0.01,
            "{}: {} vs {truth}",
            est.id,
            est.estimate
        );
        let m = induced_marginals(&est.class_accuracies, tau).unwrap();
        assert_eq!(
            net.forward(&est.class_accuracies).unwrap().argmax(),
            m.argmax()
        );
    }
}
