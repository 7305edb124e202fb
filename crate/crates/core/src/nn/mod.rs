//! Desk-scale neural backbone: autograd, encoder-decoder, optimizer.

pub mod graph;
pub mod model;
pub mod optim;

pub use graph::{Graph, Grads, Mat, Var};
pub use model::{Backbone, ModelConfig, Seq2Seq};
