use volseg::config::{load_model_config, Preset, RunConfig, SCHEMA_VERSION};
use volseg::Error;

#[test]
fn every_preset_round_trips_through_toml() {
    for name in Preset::NAMES {
        let cfg = RunConfig::preset(Preset::parse(name).unwrap());
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg, "{name}");
    }
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    let text = RunConfig::preset(Preset::Micro).to_toml();
    for (anchor, extra) in [
        ("schema_version", "colour = 1\n"),
        ("[model]\n", "dropout_rate = 0.1\n"),
        ("[train]\n", "momentum = 0.9\n"),
        ("[data]\n", "shuffle = true\n"),
    ] {
        let at = text.find(anchor).unwrap()
            + if anchor.starts_with('[') {
                anchor.len()
            } else {
                0
            };
        let bad = format!("{}{extra}{}", &text[..at], &text[at..]);
        let err = RunConfig::from_toml(&bad).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("unknown field")),
            "{anchor}: {err}"
        );
    }
}

#[test]
fn schema_version_must_match() {
    let text = RunConfig::preset(Preset::Micro).to_toml().replace(
        &format!("schema_version = {SCHEMA_VERSION}"),
        "schema_version = 99",
    );
    let err = RunConfig::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("schema_version 99"), "{err}");
}

#[test]
fn missing_sections_are_errors() {
    assert!(RunConfig::from_toml("schema_version = 1\n").is_err());
}

#[test]
fn invalid_training_values_are_rejected() {
    let mut cfg = RunConfig::preset(Preset::Micro);
    cfg.train.base_lr = -1.0;
    assert!(RunConfig::from_toml(&cfg.to_toml()).is_err());
    let mut cfg = RunConfig::preset(Preset::Micro);
    cfg.train.warmup_epochs = cfg.train.total_epochs;
    assert!(RunConfig::from_toml(&cfg.to_toml()).is_err());
}

#[test]
fn data_smaller_than_the_model_input_is_rejected() {
    let mut cfg = RunConfig::preset(Preset::Micro);
    cfg.data.size = [4, 8, 8];
    assert!(cfg.validate().is_err());
}

#[test]
fn unknown_preset_lists_the_choices() {
    let err = Preset::parse("resnet").unwrap_err().to_string();
    assert!(
        err.contains("transbtsv2") && err.contains("ablation-full"),
        "{err}"
    );
}

#[test]
fn model_config_loads_from_a_run_config_or_a_bare_model_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::preset(Preset::Overfit);
    let full = dir.path().join("run.toml");
    std::fs::write(&full, cfg.to_toml()).unwrap();
    assert_eq!(load_model_config(&full).unwrap(), cfg.model);

    let bare = dir.path().join("model.toml");
    std::fs::write(&bare, toml::to_string(&cfg.model).unwrap()).unwrap();
    assert_eq!(load_model_config(&bare).unwrap(), cfg.model);
}
