//! Policy-gradient laboratory for finite episodic POMDPs with memoryless
//! softmax policies.
//!
//! The crate is `no_std` with `alloc`. Module map:
//!
//! - [`pomdp`], [`env`], [`random`]: models, sampling, benchmark environments;
//! - [`policy`], [`table`]: tabular softmax policies and parameter tables;
//! - [`oracle`]: exact quantities by trajectory enumeration;
//! - [`estimation`]: Monte Carlo counterparts over sampled batches;
//! - [`trust_region`]: Fisher products, conjugate gradient, compatible weights;
//! - [`update`]: clipped objectives, GTRPO steps, signSGD.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod env;
pub mod estimation;
pub mod oracle;
pub mod policy;
pub mod pomdp;
pub mod random;
pub mod table;
pub mod trust_region;
pub mod update;
