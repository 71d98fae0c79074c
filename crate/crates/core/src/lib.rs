pub mod detection;
pub mod error;
pub mod inference;
pub mod io;
pub mod patterns;
pub mod special;
pub mod states;
pub mod tomography;

pub use error::{Error, Result};

/// A result together with non-fatal diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Warned<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Warned<T> {
    pub fn clean(value: T) -> Self {
        Warned { value, warnings: Vec::new() }
    }
}
