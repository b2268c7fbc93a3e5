//! Optimal mixing strategies for two-flow Chaum mixes.
//!
//! * [`mix1`]: two inputs sharing one output link. Anonymity is the entropy
//!   per packet of the output colors seen by an observer who knows the input
//!   colors and the output timing. Closed forms for delay 0, and a
//!   fixed-point solver plus exact policy evaluation for delay 1.
//! * [`mix2`]: two inputs, two outputs, perfect anonymity. The head-of-line
//!   pairing rule under a strict delay and the threshold drop policy that
//!   minimizes mean backlog.
//! * [`sim`]: a seeded slot-level simulator for all of the above, with
//!   plug-in entropy estimates and invariant counters.

pub mod error;
pub mod mix1;
pub mod mix2;
pub mod model;
pub mod sim;

pub use error::{MixError, Result};
pub use model::{
    binary_entropy, fano_error_lower_bound, inverse_binary_entropy, ArrivalSymbol, Color,
    OutputWord, PacketSet, Probability, QueueState, RatePair,
};
