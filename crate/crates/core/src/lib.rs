//! Simulation laboratory for gradient inversion attacks and defenses in
//! federated learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] dense matrices, one-sided Jacobi SVD, energy truncation and
//!   singular-value entropy.
//! * [`tinynn`] a small MLP classifier with explicit forward/backward passes.
//! * [`data`] synthetic stripe images, class-imbalance and Dirichlet splits.
//! * [`defense`] the entropy-adaptive, channel-weighted truncated SVD defense
//!   plus DP / pruning baselines and the packet wire format.
//! * [`attack`] gradient matching attacks with adaptive modes.
//! * [`flsim`] round-based FedAvg with layer-wise entropy weighting.
//! * [`metrics`] MSE / PSNR / SSIM and communication accounting.
//! * [`report`] CSV and PGM emitters shared by the CLI and tests.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod flsim;
pub mod linalg;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod tinynn;

pub use attack::{AdaptiveMode, AttackConfig, AttackResult, DistanceMetric, LabelMode};
pub use data::{Dataset, Partition};
pub use defense::{ChannelWeights, DefenseConfig, DefenseMethod, DefensePacket};
pub use error::{Error, Result};
pub use flsim::{ClientUpdate, FlConfig, RoundReport};
pub use linalg::{Matrix, SvdFactors, TruncatedFactors};
pub use tinynn::{Example, GradSet, LayerKind, ModelParams};
