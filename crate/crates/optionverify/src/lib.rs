//! Exact verification of option-policy learning on small tabular semi-MDPs.
//!
//! A decision state picks an option with φ(o|s); the option then emits
//! primitive symbols with π(w|o, s), each of which pays r(s, w), is
//! discounted by γ and moves the state by P(·|s, w). The last symbol of the
//! vocabulary ends the option and hands control back to φ.

pub mod error;
pub mod smdp;
pub mod trace;
pub mod value;

pub use error::{Result, VerifyError};
pub use smdp::{random_instance, Instance, TabularPolicies, TabularSmdp};
pub use trace::{fejer_check, run_update_trace, search_witness, Mode, UpdateTrace, Witness};
pub use value::{exact_policy_gradient, exact_value, Level, PolicyGradient};
