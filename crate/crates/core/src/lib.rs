//! A bijective network between carbon-skeleton bond encodings and binned
//! ¹³C NMR spectrum codes.
//!
//! The forward direction maps a `[4, 16, 16]` bond tensor to a 1024-value
//! latent whose first 128 entries predict the spectrum code; the inverse
//! maps a spectrum code plus 896 free latent values back to a bond tensor.

pub mod chemdata;
pub mod eval;
pub mod gradcheck;
pub mod invnet;
pub mod loss;
pub mod numeric;
pub mod train;
