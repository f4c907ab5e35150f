use childgrad::harness::{
    linear_probe_on, make_dataset, replicate_and_aggregate, shuffle_labels, subsample, train_run,
    train_run_detailed, DataSpec, Generator, RunConfig,
};
use childgrad::{
    child_count, init_params, Activation, Dataset, Error, Model, ModelSpec, OptimConfig, OutputKind,
};

const MOONS: &str = r#"
epochs = 4
batch_size = 16

[model]
input_dim = 2
hidden_dims = [12, 12]
activation = "tanh"
output = { kind = "classifier", num_classes = 2 }

[data]
generator = "two_moons"
noise = 0.2
n = 300

[pretrained]
kind = "source"
epochs = 3
data = { generator = "two_moons", noise = 0.1, n = 300, transform = { rotate = 0.5 } }

[method]
name = "vanilla"

[optim]
eta = 0.01
"#;

fn moons(method: &str) -> RunConfig {
    RunConfig::from_toml_str(MOONS, &[format!("method={method}")]).unwrap()
}

#[test]
fn same_config_and_seed_give_the_same_report_bytes() {
    for m in ["{name=\"child_f\",p=0.3}", "{name=\"child_d\",p=0.2}"] {
        let cfg = moons(m);
        let a = serde_json::to_string(&train_run(&cfg).unwrap().canonical()).unwrap();
        let b = serde_json::to_string(&train_run(&cfg).unwrap().canonical()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn full_ratio_child_f_is_vanilla() {
    let v = train_run_detailed(&moons("{name=\"vanilla\"}")).unwrap();
    let f = train_run_detailed(&moons("{name=\"child_f\",p=1.0}")).unwrap();
    assert_eq!(v.final_params, f.final_params);
    assert_eq!(v.state, f.state);
    let (rv, rf) = (v.report.canonical(), f.report.canonical());
    assert_eq!(rv.epochs, rf.epochs);
    assert_eq!(rv.final_metrics, rf.final_metrics);
    assert_eq!(rv.final_params_hash, rf.final_params_hash);
}

#[test]
fn d_variants_freeze_non_child_coordinates() {
    for m in ["child_d", "random_d", "lowest_d", "prune_d"] {
        let p = 0.2;
        let run = train_run_detailed(&moons(&format!("{{name=\"{m}\",p={p}}}"))).unwrap();
        let w0 = run.w0.values();
        let w = run.final_params.values();
        let mut changed = 0;
        for i in 0..w.len() {
            if run.mask.is_positive(i) {
                changed += usize::from(w[i] != w0[i]);
            } else {
                assert_eq!(w[i].to_bits(), w0[i].to_bits(), "{m} coordinate {i}");
                assert_eq!((run.state.m[i], run.state.v[i]), (0.0, 0.0));
            }
        }
        assert!(changed <= child_count(p, run.head.non_head_count()) + run.head.len());
        let summary = &run.report.method.mask;
        assert_eq!(summary.first_step_hash, summary.last_step_hash, "{m}");
        assert_eq!(summary.first_step_hash, run.mask.content_hash());
        assert!(run
            .step_mask_hashes
            .iter()
            .all(|h| *h == summary.first_step_hash));
    }
}

#[test]
fn child_f_draws_a_fresh_mask_each_step() {
    let run = train_run_detailed(&moons("{name=\"child_f\",p=0.5}")).unwrap();
    assert!(run.head.non_head_count() >= 64);
    let h = &run.step_mask_hashes;
    assert!(h.len() > 2);
    assert_ne!(h[0], h[1]);
    assert_eq!(h[0], run.mask.content_hash());
}

#[test]
fn near_separable_gaussians_are_learned() {
    let text = r#"
epochs = 30
batch_size = 16
[model]
input_dim = 2
activation = "tanh"
output = { kind = "classifier", num_classes = 2 }
[data]
generator = "two_gaussians"
d = 2
separation = 10.0
n = 400
[pretrained]
kind = "fresh_seed"
[method]
name = "vanilla"
[optim]
eta = 0.05
"#;
    for seed in 0..3 {
        let mut cfg = RunConfig::from_toml_str(text, &[]).unwrap();
        cfg.seed = seed;
        let r = train_run(&cfg).unwrap();
        assert!(
            r.final_metrics["eval_accuracy"] >= 0.99,
            "seed {seed}: {:?}",
            r.final_metrics
        );
    }
}

#[test]
fn divergence_is_reported_as_numeric() {
    let overrides = [
        "optimizer=\"sgd\"",
        "optim.eta=1e250",
        "optim.clip_max_norm=false",
        "model.output={kind=\"regressor\"}",
        "data.generator=\"linear_regression\"",
        "data.d=2",
        "pretrained={kind=\"fresh_seed\"}",
    ];
    let cfg = RunConfig::from_toml_str(MOONS, &overrides.map(String::from)).unwrap();
    match train_run(&cfg) {
        Err(e) => assert!(e.is_numeric(), "{e}"),
        Ok(r) => panic!("expected divergence, got {:?}", r.final_metrics),
    }
}

#[test]
fn aggregation_ignores_seed_order() {
    let cfg = moons("{name=\"child_d\",p=0.3}");
    let a = replicate_and_aggregate(&cfg, &[3, 1, 2], 1).unwrap();
    let b = replicate_and_aggregate(&cfg, &[2, 3, 1], 2).unwrap();
    let canon = |x: &childgrad::harness::Aggregate| {
        let reports: Vec<_> = x.reports.iter().map(|r| r.canonical()).collect();
        serde_json::to_string(&(reports, &x.metrics)).unwrap()
    };
    assert_eq!(canon(&a), canon(&b));
    assert_eq!(
        a.reports.iter().map(|r| r.seed).collect::<Vec<_>>(),
        [1, 2, 3]
    );
}

fn probe_optim() -> OptimConfig {
    OptimConfig {
        eta: 0.05,
        ..OptimConfig::default()
    }
}

#[test]
fn probe_beats_a_label_shuffled_copy() {
    let run = train_run_detailed(&moons("{name=\"vanilla\"}")).unwrap();
    let (train, eval) = (&run.splits.train, &run.splits.eval);
    let probe = |tr: &Dataset, ev: &Dataset| {
        linear_probe_on(
            &run.model,
            &run.final_params,
            tr,
            ev,
            20,
            16,
            &probe_optim(),
            9,
        )
        .unwrap()
    };
    let real = probe(train, eval);
    let shuffled = probe(
        &shuffle_labels(train, 1).unwrap(),
        &shuffle_labels(eval, 2).unwrap(),
    );
    assert!(!real.used_raw_features);
    assert!(
        real.metric >= shuffled.metric,
        "{} < {}",
        real.metric,
        shuffled.metric
    );
    assert_eq!(real, probe(train, eval));
}

#[test]
fn constant_representations_give_the_majority_rate() {
    let spec = ModelSpec {
        input_dim: 2,
        hidden_dims: vec![5],
        output: OutputKind::Classifier { num_classes: 2 },
        activation: Activation::Tanh,
        bias: true,
    };
    let model = Model::new(spec.clone()).unwrap();
    let frozen = spec.zero_params().unwrap();
    let labels = |n: usize, ones: usize| (0..n).map(|i| usize::from(i < ones)).collect::<Vec<_>>();
    let feats = |n: usize| {
        (0..2 * n)
            .map(|i| (i as f64 * 0.37).sin())
            .collect::<Vec<_>>()
    };
    let train = Dataset::classification(feats(50), 2, labels(50, 15)).unwrap();
    let eval = Dataset::classification(feats(20), 2, labels(20, 7)).unwrap();
    let r = linear_probe_on(&model, &frozen, &train, &eval, 40, 10, &probe_optim(), 3).unwrap();
    assert!((r.metric - 13.0 / 20.0).abs() <= 1e-9, "{}", r.metric);
}

#[test]
fn probe_without_hidden_layers_uses_raw_features() {
    let spec = ModelSpec {
        input_dim: 2,
        hidden_dims: vec![],
        output: OutputKind::Classifier { num_classes: 2 },
        activation: Activation::Tanh,
        bias: true,
    };
    let model = Model::new(spec.clone()).unwrap();
    let splits = make_dataset(
        &DataSpec::new(Generator::TwoGaussians {
            d: 2,
            separation: 6.0,
            n: 200,
        }),
        4,
    )
    .unwrap();
    let frozen = init_params(&spec, 1).unwrap();
    let r = linear_probe_on(
        &model,
        &frozen,
        &splits.train,
        &splits.eval,
        20,
        16,
        &probe_optim(),
        5,
    )
    .unwrap();
    assert!(r.used_raw_features);
    assert!(r.metric > 0.9);
}

#[test]
fn subsample_examples() {
    let splits = make_dataset(
        &DataSpec::new(Generator::TwoMoons { noise: 0.1, n: 500 }),
        8,
    )
    .unwrap();
    let train = &splits.train;
    let mut all = subsample(train, train.len(), 1)
        .unwrap()
        .features()
        .to_vec();
    let mut orig = train.features().to_vec();
    all.sort_by(f64::total_cmp);
    orig.sort_by(f64::total_cmp);
    assert_eq!(all, orig);

    let balanced =
        Dataset::classification(vec![0.0; 40], 1, (0..40).map(|i| i % 2).collect()).unwrap();
    let s = subsample(&balanced, 10, 3).unwrap();
    assert_eq!(s.class_counts().unwrap(), [5, 5]);
    assert_eq!(
        subsample(train, 37, 5).unwrap().features(),
        subsample(train, 37, 5).unwrap().features()
    );
    assert!(matches!(
        subsample(train, train.len() + 1, 5),
        Err(Error::InvalidArgument(_) | Error::Config(_))
    ));
    assert!(subsample(train, 0, 5).is_err());
}
