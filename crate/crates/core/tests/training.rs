use popnet_core::checkpoint;
use popnet_core::data::SceneSample;
use popnet_core::synth::{generate, random_specs, NoiseModel};
use popnet_core::train::{LogEntry, LossToggles, TrainConfig, Trainer};
use popnet_core::{NetConfig, PopError};

fn samples(n: usize) -> Vec<SceneSample> {
    let noise = NoiseModel {
        sigma: 0.02,
        ..NoiseModel::none()
    };
    generate(&random_specs(n, 32, 0.0, noise, 9))
        .unwrap()
        .into_iter()
        .map(|s| s.sample)
        .collect()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        resolution: 32,
        batch_size: 2,
        lr: 1e-3,
        max_steps: Some(steps),
        net: NetConfig::with_width(0.125),
        ..Default::default()
    }
}

#[test]
fn five_steps_log_five_finite_entries() {
    let mut t = Trainer::new(cfg(5), samples(2)).unwrap();
    let mut buf = Vec::new();
    let entries = t.run(&mut buf).unwrap();
    assert_eq!(entries.len(), 5);
    let lines: Vec<LogEntry> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, entries);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e.step, i as u64);
        assert!(e.losses.all_finite());
        assert!(e.lr > 0.0);
    }
}

#[test]
fn logged_total_matches_weighted_components() {
    let mut c = cfg(4);
    c.hyper.alpha1 = 0.7;
    c.hyper.alpha2 = 1.3;
    let a1 = c.hyper.alpha1;
    let a2 = c.hyper.alpha2;
    let mut t = Trainer::new(c, samples(3)).unwrap();
    for e in t.run(&mut std::io::sink()).unwrap() {
        let l = e.losses;
        assert_eq!(l.l_total, l.l_pop + a1 * l.l_sep + a2 * l.l_sem);
        assert!((l.l_pop - (l.l_dep + l.l_loc + l.l_wtv)).abs() < 1e-6);
    }
}

#[test]
fn disabled_terms_log_zero() {
    let mut c = cfg(2);
    c.losses = LossToggles::none();
    let mut t = Trainer::new(c, samples(2)).unwrap();
    for e in t.run(&mut std::io::sink()).unwrap() {
        assert_eq!((e.losses.l_dep, e.losses.l_loc, e.losses.l_wtv, e.losses.l_sep), (0.0, 0.0, 0.0, 0.0));
        assert!(e.losses.l_sem > 0.0);
    }
}

#[test]
fn nan_aborts_with_batch_stems() {
    let mut t = Trainer::new(cfg(3), samples(2)).unwrap();
    let (_, e) = t.state.net.store.iter_mut().find(|(_, e)| e.trainable).unwrap();
    e.value.data_mut()[0] = f32::NAN;
    match t.step() {
        Err(PopError::Numeric(msg)) => assert!(msg.contains("scene_0000"), "{msg}"),
        other => panic!("expected numeric failure, got {other:?}"),
    }
}

#[test]
fn same_seed_gives_same_checkpoint_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut t = Trainer::new(cfg(6), samples(4)).unwrap();
        let log = t.run(&mut std::io::sink()).unwrap();
        (checkpoint::save(&dir.path().join(name), &t.cfg, &t.state).unwrap(), log)
    };
    let (h1, log1) = run("a.safetensors");
    let (h2, _) = run("b.safetensors");
    assert_eq!(h1, h2);

    let mut t = Trainer::new(cfg(6), samples(4)).unwrap();
    t.run_until(3, &mut std::io::sink()).unwrap();
    let mid = dir.path().join("mid.safetensors");
    checkpoint::save(&mid, &t.cfg, &t.state).unwrap();
    let (c, state) = checkpoint::load(&mid).unwrap();
    let mut resumed = Trainer::with_state(c, samples(4), state).unwrap();
    let tail = resumed.run(&mut std::io::sink()).unwrap();
    assert_eq!(tail, log1[3..]);
    let end = dir.path().join("end.safetensors");
    assert_eq!(checkpoint::save(&end, &resumed.cfg, &resumed.state).unwrap(), h1);
}

#[test]
fn different_seed_changes_the_run() {
    let mut a = Trainer::new(cfg(1), samples(2)).unwrap();
    let mut b = Trainer::new(TrainConfig { seed: 1, ..cfg(1) }, samples(2)).unwrap();
    let la = a.run(&mut std::io::sink()).unwrap();
    let lb = b.run(&mut std::io::sink()).unwrap();
    assert_ne!(la[0].losses, lb[0].losses);
}

#[test]
fn config_template_matches_defaults() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.template.toml")).unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), TrainConfig::default());
}

#[test]
fn eval_report_validates_against_schema() {
    use popnet_core::eval::{evaluate, EvalOptions};
    use popnet_core::train::TrainState;
    let schema_text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json")).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&schema_text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let c = cfg(1);
    let mut state = TrainState::new(&c).unwrap();
    let data = samples(3);
    let opts = EvalOptions {
        with_separation: true,
        ..Default::default()
    };
    let r1 = evaluate(&c, &mut state, &data, &opts).unwrap();
    let r2 = evaluate(&c, &mut state, &data, &opts).unwrap();
    assert_eq!(r1, r2);
    let value: serde_json::Value = serde_json::from_str(&r1.to_json()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let ident = evaluate(&c, &mut state, &data, &EvalOptions { identity: true, ..Default::default() }).unwrap();
    let m = ident.mean.unwrap();
    assert_eq!((m.mae, m.max_f), (0.0, 1.0));
    assert!((m.s_measure - 1.0).abs() < 1e-12 && (m.max_e - 1.0).abs() < 1e-12);
    let bad = serde_json::json!({"per_image": [], "mean": {"M": 2.0, "Fm": 0, "Sm": 0, "Em": 0}, "skipped": []});
    assert!(!validator.is_valid(&bad));
}
