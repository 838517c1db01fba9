//! Experiment configurations shipped with the binary.

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// `(name, TOML text)` for every shipped preset.
        pub const PRESETS: &[(&str, &str)] = &[$(($name, include_str!(concat!("../presets/", $name, ".toml")))),*];
    };
}

presets!(
    "figure1b-line",
    "figure1b-circle",
    "figure1b-sinusoid",
    "pca-diag41",
    "pca-diag41-hermite",
    "pca-random6",
    "ring",
    "uniform-cdf-1d",
    "score-limit-gamma10",
    "score-limit-gamma30",
    "score-limit-gamma100",
    "identity",
    "straight-line",
);

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}
