#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod corpus;
pub mod criteria;
pub mod embedstore;
pub mod error;
pub mod generation;
pub mod lexer;
pub mod lifecycle;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod textproto;
pub mod training;

pub use error::{Error, Result};
