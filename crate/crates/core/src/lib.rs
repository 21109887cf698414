pub mod checkpoint;
pub mod corpus;
pub mod curation;
pub mod dualmask;
pub mod encoder;
pub mod error;
pub mod gass;
pub mod jsonl;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod retrieval;
pub mod seeding;
pub mod tape;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
