//! Ground-truth data: stiff mechanisms, the implicit integrator, and dataset assembly.

pub mod dataset;
pub mod integrator;
pub mod mechanism;

pub use dataset::{
    generate_dataset, reconstruct, split_indices, time_decompose, GenerationConfig, GridAxis, IcGridSpec,
    SegmentedDataset, Split, TrajectoryDataset,
};
pub use integrator::{backward_euler_step, integrate, integrate_fixed, integrate_with, IntegratorConfig};
pub use mechanism::{Mechanism, ToyCombustion};
