//! Foreground-guided, angle-aware feature pyramid neck with a toy oriented
//! detector, losses, evaluation and data handling.

pub mod aamha;
pub mod data;
mod error;
pub mod eval;
pub mod fgfm;
pub mod gradcheck;
pub mod head;
mod level;
pub mod losses;
pub mod model;
pub mod neck;
pub mod params;
pub mod train;

pub use error::{CoreError, Result};
pub use level::Level;
