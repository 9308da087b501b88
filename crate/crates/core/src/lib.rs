//! Nonlinear system level synthesis for discrete-time systems.
//!
//! Closed-loop maps (CLMs) are causal operators `Ψ = (Ψˣ, Ψᵘ)` from disturbances
//! to state and input trajectories. This crate represents them, checks the CLM
//! equation `Ψˣ = F(Ψ) + I`, realizes them with system level controllers,
//! certifies robustness through small-gain bounds, synthesizes LTV FIR maps in
//! closed form, and builds the cart-pole tracking and saturated anti-windup
//! case studies on top.

pub mod blend;
pub mod cartpole;
pub mod clm;
pub mod error;
pub mod ltv;
pub mod operator;
pub mod runtime;
pub mod stability;

pub use error::{Result, SlsError};
pub use operator::{Causality, LinearCausalKernel, Norm, Operator, Sequence};
