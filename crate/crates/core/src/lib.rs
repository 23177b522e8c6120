//! Probing masked language models on function words.
//!
//! The crate covers the whole pipeline: concept [`resources`] are expanded
//! by [`forge`] into probe datasets, a [`gateway`] talks to masked-LM
//! backends, [`analysis`] derives similarity and attention profiles,
//! [`metrics`] computes overlap@k and forbidden@k, and [`service`] runs
//! everything against a persistent [`store`].

pub mod analysis;
pub mod forge;
pub mod gateway;
pub mod metrics;
pub mod resources;
pub mod service;
pub mod store;
