#![no_std]
extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autodiff;
pub mod backbone;
pub mod contrastive;
pub mod params;
pub mod tokenizer;
pub mod trainer;
pub mod videogen;
pub mod evaluation;
pub mod error;
pub mod exec;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
