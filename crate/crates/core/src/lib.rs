//! Differentially private synthetic data for k-way marginal workloads.
//!
//! The crate releases a weighted set of records whose answers on a marginal
//! workload track the private dataset. Two families of engines are provided:
//!
//! - [`primal`]: a query player choosing queries with the exponential
//!   mechanism against a follow-the-perturbed-leader data player (FEM and
//!   sepFEM).
//! - [`dual`]: a multiplicative-weights query distribution against a
//!   best-responding data player (DualQuery and its rejection-sampling
//!   variant DQRS).
//!
//! Both call a linear optimization [`oracle`] over one-hot records and charge
//! a zCDP [`privacy::PrivacyLedger`].

pub mod access;
pub mod domain;
pub mod dual;
pub mod harness;
pub mod oracle;
pub mod primal;
pub mod privacy;
pub mod seeds;
pub mod workload;
