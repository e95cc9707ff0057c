use std::path::Path;

use caps_core::experiment::{
    fingerprint, parse_config_str, run_experiment, write_report, ExperimentConfig,
};
use caps_core::{GateConfig, PolicySpec, System1Mode};

type Mutation = Box<dyn Fn(&mut ExperimentConfig)>;

fn cfg(text: &str) -> ExperimentConfig {
    parse_config_str(text, Path::new(".")).unwrap()
}

#[test]
fn resolved_defaults_share_a_fingerprint() {
    let a = cfg(r#"{"kind": "ablation"}"#);
    let b = cfg(
        r#"{"kind": "ablation", "trials": 1000, "master_seed": 0, "output_dir": "elsewhere",
                   "caps": {"alpha": 2.0, "n_mcmc": 30}, "grid": {"alpha": [2.0]}}"#,
    );
    assert_eq!(fingerprint(&a), fingerprint(&b));
    assert_ne!(a.output_dir, b.output_dir);
}

#[test]
fn every_semantic_field_moves_the_fingerprint() {
    let base = cfg(r#"{"kind": "ablation"}"#);
    let reference = fingerprint(&base);
    let mutations: Vec<(&str, Mutation)> = vec![
        ("schema_version", Box::new(|c| c.schema_version += 1)),
        (
            "kind",
            Box::new(|c| c.kind = caps_core::ExperimentKind::Episode),
        ),
        (
            "policy",
            Box::new(|c| c.policy = caps_core::ExperimentKind::Flip.default_policy()),
        ),
        ("caps.alpha", Box::new(|c| c.caps.alpha = 3.0)),
        ("caps.n_mcmc", Box::new(|c| c.caps.n_mcmc += 1)),
        ("caps.block_len", Box::new(|c| c.caps.block_len += 1)),
        (
            "caps.proposal_exponent",
            Box::new(|c| c.caps.proposal_exponent = 1.5),
        ),
        (
            "caps.gate.metric",
            Box::new(|c| c.caps.gate = GateConfig::min_prob(0.5)),
        ),
        (
            "caps.gate.threshold",
            Box::new(|c| c.caps.gate.threshold = 0.75),
        ),
        (
            "caps.gate.random_rate",
            Box::new(|c| c.caps.gate.random_rate = 0.3),
        ),
        ("caps.seed", Box::new(|c| c.caps.seed = 9)),
        (
            "caps.system1",
            Box::new(|c| c.caps.system1 = System1Mode::Sample),
        ),
        ("alpha_grid", Box::new(|c| c.alpha_grid.push(4.0))),
        ("n_mcmc_grid", Box::new(|c| c.n_mcmc_grid = vec![1])),
        ("gamma_grid", Box::new(|c| c.gamma_grid = Some(vec![0.9]))),
        ("trials", Box::new(|c| c.trials = 7)),
        ("master_seed", Box::new(|c| c.master_seed = 1)),
        ("horizon.eta", Box::new(|c| c.horizon.eta = 0.25)),
        (
            "horizon.mixing_rate",
            Box::new(|c| c.horizon.mixing_rate = 0.25),
        ),
        (
            "horizon.dist_const",
            Box::new(|c| c.horizon.dist_const = 2.0),
        ),
        (
            "horizon.exact_power",
            Box::new(|c| c.horizon.exact_power = true),
        ),
        ("chain.steps", Box::new(|c| c.chain.steps = 10)),
        ("chain.thin", Box::new(|c| c.chain.thin = 1)),
        (
            "ablation.variants",
            Box::new(|c| c.ablation.variants.pop().map(drop).unwrap_or(())),
        ),
        (
            "gating.trigger_target",
            Box::new(|c| c.gating.trigger_target = 0.5),
        ),
        (
            "episode.trace_trials",
            Box::new(|c| c.episode.trace_trials = 0),
        ),
    ];
    for (name, mutate) in mutations {
        let mut c = base.clone();
        mutate(&mut c);
        assert_ne!(c, base, "{name} mutation was a no-op");
        assert_ne!(fingerprint(&c), reference, "{name}");
    }
    let mut c = base.clone();
    c.output_dir = "moved".into();
    assert_eq!(fingerprint(&c), reference);
}

#[test]
fn empty_grid_writes_headers_only() {
    let mut c = cfg(r#"{"kind": "ablation"}"#);
    c.alpha_grid.clear();
    let report = run_experiment(&c).unwrap();
    assert!(report.rows.is_empty());
    let dir = tempfile::tempdir().unwrap();
    write_report(&report, &c, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("cell,variant,alpha,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 0);
}

#[test]
fn metrics_are_identical_across_thread_counts() {
    let c = cfg(r#"{"kind": "episode", "trials": 50, "master_seed": 3,
                   "grid": {"alpha": [1.0, 2.0], "n_mcmc": [0, 5]}}"#);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_experiment(&c).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.metrics_csv(), four.metrics_csv());
    assert_eq!(one.traces, four.traces);
    assert_eq!(one.rows.len(), 4);
}

#[test]
fn episode_report_files() {
    let c = cfg(r#"{"kind": "episode", "trials": 20, "episode": {"trace_trials": 2}}"#);
    let report = run_experiment(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_report(&report, &c, dir.path()).unwrap();
    let names: Vec<_> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_owned())
        .collect();
    assert_eq!(
        names,
        [
            "report.json",
            "metrics.csv",
            "config.lock.json",
            "traces.jsonl"
        ]
    );

    let traces = std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    // Ten blocks per episode, two traced trials, one cell.
    assert_eq!(traces.lines().count(), 20);
    for line in traces.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["gate_mode"].is_string());
    }

    let lock: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("config.lock.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(lock["fingerprint"], report.fingerprint);
    assert!(matches!(c.policy, PolicySpec::Mixed(_)));
}

#[test]
fn oracle_suite_tracks_the_target() {
    let c = cfg(
        r#"{"kind": "oracle", "grid": {"alpha": [2.0]}, "chain": {"steps": 50000, "thin": 5},
                   "policy": {"kind": "random", "action_count": 3, "horizon": 3, "logit_scale": 1.0, "seed": 5}}"#,
    );
    let report = run_experiment(&c).unwrap();
    let row = &report.rows[0];
    assert!(row["error"].is_null(), "{row:?}");
    let (t, b) = (
        row["tv_target"].as_f64().unwrap(),
        row["tv_base"].as_f64().unwrap(),
    );
    assert!(t < 0.05 && t < b, "tv_target {t} tv_base {b}");
}
