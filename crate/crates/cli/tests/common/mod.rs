use std::path::Path;

use deepatrophy_cli::ExperimentConfig;

/// A four-cohort run small enough for the test suite: 16x20x16 volumes,
/// a two-stage encoder and one training epoch.
pub fn tiny_config(out: &Path, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}
out = "{}"

[cohort]
n_per_cohort = 6
sameday_subjects = 1

[cohort.phantom]
dims = [16, 20, 16]

[split]
train_count = 2
val_count = 1

[encoder]
input_dims = [12, 16, 12]
stem_channels = 4
[[encoder.stages]]
channels = 4
blocks = 1
[[encoder.stages]]
channels = 8
blocks = 1

[train]
epochs = 1
batch = 4
quads_per_subject = 3

[train.augmentation]
crop = [12, 16, 12]
tps_points = 4

[eval]
bootstrap_replicates = 200
interval_bins = [90.0, 180.0]
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap().resolve(None, None).unwrap()
}
