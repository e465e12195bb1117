pub mod ablation;
pub mod bank;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod inversion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod training;

pub use error::{GleanError, Result};
pub use glean_autograd;
