#![allow(dead_code)]

use lstcl::config::ExperimentConfig;

/// A config small enough for a few seconds of pretraining.
pub const TINY: &str = r#"
[corpus]
train_videos = 24
test_videos = 12

[model]
dim = 8
heads = 2
mlp_ratio = 2
depth = 1
proj_dim = 8
head_ratio = 2

[pretrain]
framework = "infonce"
temperature = 0.2
momentum = 0.99
short_stride = 2
long_stride = 8
strategy = "independent"
epochs = 3
warmup_epochs = 1
batch_size = 8
checkpoint_every = 1

[probe]
epochs = 2
clips_per_video = 1

[finetune]
epochs = 2
warmup_epochs = 1
batch_size = 8
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

pub fn tiny_with(extra: &str) -> ExperimentConfig {
    let mut v: toml::Table = toml::from_str(TINY).unwrap();
    let patch: toml::Table = toml::from_str(extra).unwrap();
    for (section, table) in patch {
        let dst = v.entry(section).or_insert_with(|| toml::Value::Table(Default::default()));
        for (k, val) in table.as_table().unwrap() {
            dst.as_table_mut().unwrap().insert(k.clone(), val.clone());
        }
    }
    ExperimentConfig::from_toml(&toml::to_string(&v).unwrap()).unwrap()
}
