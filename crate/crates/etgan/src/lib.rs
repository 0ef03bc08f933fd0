//! Cross-domain emotion transfer over Mel-cepstral features: cycle-consistent
//! adversarial training with linguistic, speaker-verifying and
//! gradient-penalty losses, plus transfer learning and objective FAD/MCD
//! evaluation on a synthetic two-domain corpus.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod networks;
pub mod training;

pub use error::{Error, Result};
