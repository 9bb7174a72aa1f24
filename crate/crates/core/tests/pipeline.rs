use act2goal::harness::{evaluate, fixed_horizon, run_episode, EvalOptions, RunConfig};
use act2goal::msth::MsthParams;
use act2goal::onlinehpr::{online_round, RoundConfig, Strategy};
use act2goal::simenv::{EnvConfig, Variant};
use act2goal::trainkit::{generate_demos, train_stage1, train_stage2, BundleSpec, Dataset, ModelBundle, TrainConfig};
use act2goal::Error;

fn spec(a_max: f64) -> BundleSpec {
    let mut s = BundleSpec::for_schedule(MsthParams::new(12, 4, 2, 2), a_max);
    s.wm.width = 8;
    s.wm.heads = 2;
    s.wm.mlp_hidden = 8;
    s.wm.d_z = 4;
    s.ae.width = 4;
    s.ae.heads = 2;
    s.ae.mlp_hidden = 4;
    s.ae.p_exec = 2;
    s
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn reloaded_dataset_trains_identically() {
    let env = EnvConfig::push();
    let data = generate_demos(&env, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.a2g");
    data.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    let (a, ta) = train_stage1(&data, spec(env.a_max), &quick(3)).unwrap();
    let (b, tb) = train_stage1(&back, spec(env.a_max), &quick(3)).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn stage2_needs_a_stage1_bundle() {
    let env = EnvConfig::push();
    let data = generate_demos(&env, 2, 1).unwrap();
    let mut fresh = ModelBundle::new(spec(env.a_max), 0).unwrap();
    assert!(matches!(train_stage2(&mut fresh, &data, &quick(1)), Err(Error::Precondition(_))));
    let (mut b, _) = train_stage1(&data, spec(env.a_max), &quick(1)).unwrap();
    let trace = train_stage2(&mut b, &data, &quick(2)).unwrap();
    assert_eq!(trace.len(), 2);
    assert!(trace.iter().all(|r| r.l_v.is_nan() && r.total == r.l_a));
}

#[test]
fn bundle_round_trip_keeps_policy_behaviour() {
    let env = EnvConfig::push();
    let data = generate_demos(&env, 2, 2).unwrap();
    let (mut b, _) = train_stage1(&data, spec(env.a_max), &quick(2)).unwrap();
    b.attach_adapters(2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.a2gw");
    b.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.to_bytes(), b.to_bytes());
    assert_eq!(back.base_checksum(), b.base_checksum());
    assert_eq!(run_episode(&env, &b, 9, 3, false).unwrap(), run_episode(&env, &back, 9, 3, false).unwrap());
}

#[test]
fn evaluation_is_deterministic_and_disturbance_is_recorded() {
    let env = EnvConfig::push();
    let data = generate_demos(&env, 2, 3).unwrap();
    let (b, _) = train_stage1(&data, spec(env.a_max), &quick(2)).unwrap();
    let opts = EvalOptions {
        episodes: 3,
        seed: 4,
        max_cycles: 4,
        disturb: true,
    };
    let a = evaluate(&env, &b, &opts).unwrap();
    assert_eq!(a, evaluate(&env, &b, &opts).unwrap());
    assert!(a.reports.iter().all(|r| r.disturbed || r.success || r.cycles <= 2));
    assert_eq!(a.to_csv("fp"), evaluate(&env, &b, &opts).unwrap().to_csv("fp"));
}

#[test]
fn online_rounds_touch_only_adapters_for_every_strategy() {
    let env = EnvConfig::push().with_variant(Variant::Ood);
    let data = generate_demos(&EnvConfig::push(), 2, 5).unwrap();
    let (mut b, _) = train_stage1(&data, spec(env.a_max), &quick(2)).unwrap();
    b.attach_adapters(2, 6).unwrap();
    let base = b.base_checksum();
    for (round, strategy) in [Strategy::All, Strategy::SuccessOnly, Strategy::FailedOnly].into_iter().enumerate() {
        let cfg = RoundConfig {
            buffer: 4,
            epochs: 1,
            minibatch: 2,
            max_cycles: 3,
            strategy,
            ..RoundConfig::default()
        };
        let rep = online_round(&env, &mut b, &cfg, round + 1, 7).unwrap();
        assert_eq!(rep.buffer_after, 0);
        assert!(rep.buffer_used <= 4);
        if rep.buffer_used == 0 {
            assert!(rep.mean_loss.is_nan());
        }
        assert_eq!(b.base_checksum(), base);
    }
}

#[test]
fn fixed_horizon_baseline_drops_only_distal_slots() {
    let cfg = RunConfig::trace();
    let base = fixed_horizon(&cfg.spec);
    assert_eq!(base.msth.distal, 0);
    assert_eq!(base.ae.distal, 0);
    assert_eq!(base.wm.frames, cfg.spec.msth.proximal / cfg.spec.msth.stride);
    assert_eq!(base.wm.width, cfg.spec.wm.width);
    assert_eq!(base.msth.horizon, cfg.spec.msth.horizon);
    base.validate().unwrap();
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::trace();
    cfg.seed = 12;
    cfg.round.strategy = Strategy::FailedOnly;
    cfg.ood.distractors = 2;
    let back = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}
