//! Monte Carlo simulation and analysis of the random interchange and
//! random loop models on the three-dimensional cubic lattice.
//!
//! The model: every nearest-neighbour edge of the `L³` cube carries an
//! independent Poisson point process on the time circle `[0, β)` whose
//! events are crosses (intensity `u`) or double bars (intensity `1 - u`).
//! Trajectories move vertically in time and jump across each event —
//! keeping direction at a cross, reversing at a bar — and close into
//! loops. Above a critical `β` some loops become macroscopic, and the
//! sorted macroscopic loop fractions follow a Poisson-Dirichlet
//! distribution of parameter 1 (`u ∈ {0, 1}`) or ½ (`0 < u < 1`).
//!
//! Module map:
//! - [`lattice`]: cubic geometry, edges, boundary conditions;
//! - [`realisation`]: the marked Poisson process and per-site timelines;
//! - [`looptracer`]: the loop decomposition and its partitions;
//! - [`observables`]: power sums, mixed moments, mass estimators,
//!   percolation projection;
//! - [`poisson_dirichlet`]: GEM / Kingman samplers and exact PD moments;
//! - [`experiment`]: configuration, parallel sample farms, β scans,
//!   critical-point estimation, and result serialisation;
//! - [`rng`]: reproducible per-sample random streams.

pub mod experiment;
pub mod lattice;
pub mod looptracer;
pub mod observables;
pub mod poisson_dirichlet;
pub mod realisation;
pub mod rng;

pub use lattice::{BoundaryCondition, Lattice, LatticeError};
pub use looptracer::{trace_loops, LoopSet, LoopStats, TraceError};
pub use observables::{MomentEstimate, ObservableError, PartitionSample};
pub use realisation::{Event, EventKind, Realisation, RealisationError};
