#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod clf3d;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod patcher;
pub mod segnet;
pub mod synthlab;
pub mod gradnet;
pub mod preproc;
pub mod volgrid;

pub use error::{Error, Result};
