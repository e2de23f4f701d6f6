//! Two-step sentence simplification.
//!
//! Step one rewrites complex words with simpler synonyms taken from a
//! paraphrase table ([`lexsub`]). Step two regenerates the sentence with a GRU
//! encoder-decoder that is forced to contain the substituted words
//! ([`decode`]): tokens before a constraint are produced right-to-left by a
//! backward decoder, the remainder left-to-right by a forward decoder.
//! Multiple constraints are handled one per pass, re-encoding each pass's
//! output as the next pass's input.

pub mod tensor;
pub mod text;
pub mod lexsub;
pub mod model;
pub mod checkpoint;
pub mod decode;
pub mod train;
pub mod metrics;
pub mod pipeline;
