pub mod activation;
pub mod arch_space;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod network;
pub mod proxies;
pub mod seeding;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
