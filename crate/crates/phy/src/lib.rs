//! The classical separated transmission chain used as a comparison baseline.

pub mod baseline;
pub mod ldpc;
pub mod qam;
pub mod source;
