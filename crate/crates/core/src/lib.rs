#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fields;
pub mod io;
pub mod linalg;
pub mod spectral;
pub mod saturation;
pub mod steering;
pub mod synthesis;
