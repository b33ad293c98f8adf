pub(crate) mod basic;
mod conv;
mod linalg;
pub(crate) mod nn;
