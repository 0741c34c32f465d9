use stcast::saa::PriorInit;
use stcast::tmoe::RoutingMode;
use stcast_cli::config::ExperimentConfig;
use stcast_cli::{Command, Overrides};

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for text in ["sed = 1", "[model]\nwidht = 8", "[model.tmoe]\nexpert = 2", "[synth.region]\nx = 1", "[ensemble.noise]\namp = 1.0", "[bogus]"] {
        let e = ExperimentConfig::parse(text).unwrap_err();
        assert_eq!(e.code(), "malformed", "{text}");
    }
}

#[test]
fn partial_tables_keep_defaults() {
    let cfg = ExperimentConfig::parse("seed = 9\n[ensemble.noise]\namplitude = 0.2\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ensemble.noise.amplitude, 0.2);
    assert_eq!(cfg.ensemble.noise.octaves, 3);
    assert_eq!(cfg.model, ExperimentConfig::default().model);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn flags_win_over_config_keys() {
    let mut cfg = ExperimentConfig::parse("seed = 1\nout = \"a\"\n[train]\nsteps = 10\n[regional]\nsteps = 20\n[forecast]\nsteps = 5\n[ensemble]\nmembers = 4\n").unwrap();
    let ov = Overrides {
        seed: Some(2),
        out: Some("b".into()),
        steps: Some(7),
        members: Some(6),
        no_saa: true,
        random_prior: true,
        no_tmoe: true,
        literal_acc: true,
        ..Default::default()
    };
    ov.apply(&mut cfg, Command::TrainGlobal).unwrap();
    assert_eq!((cfg.seed, cfg.ensemble.noise.seed), (2, 2));
    assert_eq!(cfg.out, std::path::PathBuf::from("b"));
    assert_eq!((cfg.train.steps, cfg.regional.steps, cfg.forecast.steps), (7, 20, 5));
    assert_eq!(cfg.ensemble.members, 6);
    assert!(cfg.regional.no_saa && cfg.evaluate.literal_acc);
    assert_eq!(cfg.saa.prior_init, PriorInit::Random);
    assert_eq!(cfg.model.tmoe.mode, RoutingMode::Dense);

    let mut cfg = ExperimentConfig::default();
    Overrides { steps: Some(3), no_month_embedding: true, ..Default::default() }.apply(&mut cfg, Command::Ensemble).unwrap();
    assert_eq!(cfg.forecast.steps, 3);
    assert_eq!(cfg.model.tmoe.mode, RoutingMode::NoMonth);

    let mut cfg = ExperimentConfig::default();
    Overrides { steps: Some(11), ..Default::default() }.apply(&mut cfg, Command::Ablate).unwrap();
    assert_eq!((cfg.ablate.saa.steps, cfg.ablate.tmoe.steps), (11, 11));
}

#[test]
fn validation_checks_paths_and_ranges() {
    let mut cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    cfg.data.global_dir = Some("/definitely/not/here".into());
    assert_eq!(cfg.validate().unwrap_err().code(), "invalid_argument");

    let mut cfg = ExperimentConfig::default();
    cfg.model.n_lat = 8;
    assert!(cfg.validate().is_err());

    let mut cfg = ExperimentConfig::default();
    cfg.ensemble.noise.persistence = 1.5;
    assert!(cfg.validate().is_err());

    let mut cfg = ExperimentConfig::default();
    cfg.cyclone.init_lat = Some(10.0);
    assert!(cfg.validate().is_err());
}
