pub mod adam;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod ssim;
pub mod trainer;
