//! Latent degradation and restoration for domain generalisation.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor`]), the attention building blocks ([`attention`]), an MLP
//! encoder/classifier bundle ([`model`]), the augmentation mechanism itself
//! ([`latentdr`]), synthetic multi-domain and long-tail corpora
//! ([`datagen`]) and representation metrics ([`metrics`]).

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod datagen;
pub mod latentdr;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod textio;

pub use error::{Error, Result};
pub use rng::{RngStreams, StreamRng};
pub use tensor::{Gradients, Graph, ParamId, Parameter, ParameterRegistry, SgdConfig, Tensor, Var};
