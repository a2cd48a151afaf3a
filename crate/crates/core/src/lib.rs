pub mod autodiff;
pub mod dataio;
pub mod factor;
pub mod params;
pub mod portfolio;
pub mod tcn;
pub mod metrics;
pub mod netgen;
pub mod train;
