use hitta_core::backbone::{init_network, ArchConfig, SegNetwork};
use hitta_core::checkpoint::Checkpoint;
use hitta_core::datagen::{Dataset, DatasetConfig};
use hitta_core::feedback_adapt::HeadTag;
use hitta_core::harness::{build_stream, run_stream, MethodName, MethodSettings, MethodSpec, StreamItem, StreamSession};

fn setup() -> (Vec<StreamItem>, SegNetwork, MethodSettings) {
    let mut cfg = DatasetConfig::with_size(32);
    cfg.source_train = 2;
    cfg.source_val = 1;
    cfg.target_count = 2;
    let data = Dataset::generate(&cfg).unwrap();
    let domains: Vec<String> = data.target_domains().into_iter().map(String::from).collect();
    let items = build_stream(&data, &domains, 9, true).unwrap();
    let arch = ArchConfig {
        levels: 2,
        base_width: 4,
        ..ArchConfig::default()
    };
    let mut settings = MethodSettings::default();
    settings.pre.steps = 2;
    settings.post.steps = 2;
    (items, init_network(arch, 1).unwrap(), settings)
}

#[test]
fn streams_are_deterministic() {
    let (items, net, settings) = setup();
    let spec = MethodSpec::resolve(MethodName::Hitta, &settings).unwrap();
    let (a, na) = run_stream(&spec, net.clone(), items.clone(), 4).unwrap();
    let (b, nb) = run_stream(&spec, net, items, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(na.clone().state_hash(), nb.clone().state_hash());
}

#[test]
fn resumed_session_matches_uninterrupted_run() {
    let (items, net, settings) = setup();
    let spec = MethodSpec::resolve(MethodName::Hitta, &settings).unwrap();
    let (full, _) = run_stream(&spec, net.clone(), items.clone(), 4).unwrap();

    let mut s = StreamSession::new(spec.clone(), net, items.clone(), 4).unwrap();
    for _ in 0..3 {
        s.step_oracle().unwrap();
    }
    let report = s.report().clone();
    let (n, h) = s.parts_mut();
    let saved = Checkpoint::capture(n, h).to_json().unwrap();
    drop(s);

    let (net, head) = Checkpoint::from_json(&saved).unwrap().restore().unwrap();
    let mut resumed = StreamSession::resume(spec, net, head, items, 4, report).unwrap();
    assert_eq!(resumed.cursor(), 3);
    while !resumed.is_done() {
        resumed.step_oracle().unwrap();
    }
    assert_eq!(resumed.into_report(), full);
}

#[test]
fn baselines_never_adapt_on_feedback() {
    let (items, net, settings) = setup();
    for method in [MethodName::NoTta, MethodName::Tbn, MethodName::Tent] {
        let spec = MethodSpec::resolve(method, &settings).unwrap();
        let (report, _) = run_stream(&spec, net.clone(), items.clone(), 4).unwrap();
        assert_eq!(report.rows.len(), items.len());
        assert!(report.rows.iter().all(|r| r.post_loss.is_empty() && r.chosen == HeadTag::Main));
    }
    let spec = MethodSpec::resolve(MethodName::NoTta, &settings).unwrap();
    let (report, _) = run_stream(&spec, net.clone(), items, 4).unwrap();
    let hash = net.clone().state_hash();
    assert!(report.rows.iter().all(|r| r.model_hash == hash));
}

#[test]
fn presenting_twice_is_a_conflict_and_commit_needs_a_presentation() {
    let (items, net, settings) = setup();
    let spec = MethodSpec::resolve(MethodName::Hitta, &settings).unwrap();
    let mut s = StreamSession::new(spec, net, items, 4).unwrap();
    assert!(matches!(s.commit(None), Err(hitta_core::Error::Conflict(_))));
    s.present().unwrap();
    assert!(matches!(s.present(), Err(hitta_core::Error::Conflict(_))));
    assert_eq!(s.cursor(), 0);
}
