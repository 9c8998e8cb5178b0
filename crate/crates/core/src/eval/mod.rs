//! Image-quality metrics, classical removers and the removal gauntlet.

pub mod gauntlet;
pub mod inpaint;
pub mod metrics;

pub use inpaint::{heat_diffusion_inpaint, BlindThreshold};
pub use metrics::{mse, psnr, psnr_var, ssim, v_metric, Metric, PSNR_CAP};
pub use gauntlet::{run_gauntlet, Arm, GauntletConfig, MetricsReport, RemoverKind};
