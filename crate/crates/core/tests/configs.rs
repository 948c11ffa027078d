use std::path::PathBuf;

use missformer::config::RunConfig;
use missformer::model::ModelConfig;

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_load_and_match_presets() {
    let toy = RunConfig::load(&config_dir().join("toy.toml"), &[]).unwrap();
    assert_eq!(toy.model.resolved(), ModelConfig::toy().resolved());
    let reference = RunConfig::load(&config_dir().join("reference.toml"), &[]).unwrap();
    assert_eq!(
        reference.model.resolved(),
        ModelConfig::reference().resolved()
    );
}
