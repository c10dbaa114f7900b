//! Desk-scale machinery for insertion-based sequence generation.
//!
//! The crate couples two generative processes over one mixed-modal sequence:
//! a continuous-time Markov chain that builds discrete token sequences purely
//! by insertion, and flow matching over continuous blocks that stand in for
//! image latents. An interleaved time schedule ties the per-image clocks to
//! the text clock so that training corruption and generation see the same
//! joint law.
//!
//! Everything is sized for exact verification: corruption and its posterior
//! statistics can be brute-forced on tiny datasets ([`oracle`]), the sampler
//! can be closed against those exact heads ([`sampler`]), and a small model
//! with in-repo reverse-mode differentiation ([`toymodel`]) trains against
//! the analytically known loss floor.

pub mod corruption;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sequence;
pub mod synthdata;
pub mod tape;
pub mod toymodel;

pub use rng::SplitRng;
pub use schedule::{ExtendedTime, Schedule};
pub use sequence::{Element, ImageBlock, MixedSequence, SeqBounds, Vocabulary};
