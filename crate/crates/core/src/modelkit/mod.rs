//! Model contract, the bundled toy model, adapters and checkpoints.

pub mod adapter;
pub mod checkpoint;
pub mod decode;
pub mod reference;
pub mod tokenizer;
pub mod toy;

pub use adapter::{Adapter, AdapterConfig};
pub use decode::{generate, generate_with, DecodeConfig, DecodeSession, ModelInterface, Strategy};
pub use reference::ReferenceOcr;
pub use tokenizer::{TokenId, Tokenizer};
pub use toy::{ToyConfig, ToyModel};
