//! Optional decomposition of supermartingales.
//!
//! The crate works on two backends. On finite event trees every conditional
//! expectation is an exact finite sum: market characteristics, the numéraire
//! portfolio, local martingale deflators, the optional decomposition
//! `V = V(0) + ∫⟨H, dX⟩ − C` and superhedging prices are all computed to
//! machine precision. On Euler-discretized diffusions ([`mcengine`]) the same
//! objects are estimated from seeded path ensembles.
//!
//! Module map:
//!
//! * [`probtree`]: event trees, adapted/predictable processes, Doob decomposition.
//! * [`characteristics`]: drift/covariance per step and the structure condition `a = cρ`.
//! * [`deflators`]: stochastic exponentials, numéraire portfolio, deflator families.
//! * [`optdecomp`]: the supermartingale test and the two decomposition routes.
//! * [`superhedge`]: Snell envelopes, superhedging prices, portfolio views.
//! * [`mcengine`]: diffusion simulation, pathwise deflators, regression diagnostics.

pub mod characteristics;
pub mod deflators;
pub mod error;
pub mod io;
pub mod linalg;
pub mod lp;
pub mod mcengine;
pub mod model;
pub mod optdecomp;
pub mod probtree;
pub mod superhedge;

pub use error::{OdxError, Result};
pub use model::Market;
pub use probtree::{AdaptedProcess, EventTree, PredictableProcess};
