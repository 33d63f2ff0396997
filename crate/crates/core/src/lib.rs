//! ID-aware embedding (IDE) for set-based verification.
//!
//! Every item in an image set is embedded, classified against the training
//! identities, and its classification confidence for the *set* label is used
//! as an ID-aware quality score. Two Gaussian transforms of that score drive
//! training:
//!
//! - feature learning attention weights the image-level cross-entropy towards
//!   medium-hard items ([`quality::fla_score`]);
//! - feature fusion attention weights the items when fusing them into one set
//!   embedding for the contrastive loss ([`quality::ffa_score`]).
//!
//! Both weights are constants during backpropagation. At test time the set
//! embedding is a plain average and sets are matched by cosine distance.
//!
//! The crate is organised bottom-up:
//!
//! | module | contents |
//! |---|---|
//! | [`autodiff`] | define-by-run reverse-mode graph, [`ParamStore`] |
//! | [`model`] | MLP embedder and the identity classifier head |
//! | [`quality`] | confidences, attention weights, weighted set fusion |
//! | [`losses`] | weighted cross-entropy, set contrastive loss, joint objective |
//! | [`data`] | synthetic noisy-set benchmarks and the mini-batch sampler |
//! | [`train`] | the SGD training step and loop |
//! | [`eval`] | cosine retrieval, CMC and mAP |
//! | [`experiment`] | ablation grids, cross-scene runs, sigma sweeps |
//! | [`config`] | strict TOML experiment configuration |
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod quality;
pub mod rng;
pub mod train;

pub use autodiff::{Graph, ParamStore, Shape, Tensor, Var};
pub use error::{Error, Result};
