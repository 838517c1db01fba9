pub mod config;
pub mod error;
pub mod presets;
pub mod run;
pub mod svg;
