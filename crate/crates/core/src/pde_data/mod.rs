//! Reference solvers for Darcy flow, shallow water and diffusion-reaction,
//! plus the sample-set container and its file format.

mod dataset;
mod darcy;
mod diffusion_reaction;
mod grf;
mod shallow_water;

pub use darcy::{gen_darcy_coefficient, solve_darcy, solve_darcy_with_forcing, DarcyConfig, CG_TOLERANCE};
pub use dataset::{
    build_sampleset, decode_sampleset, encode_sampleset, read_sampleset, regenerate_sample, sample_seed, split_path,
    write_sampleset, DataConfig, Provenance, Sample, SampleSet, Split, Task, DATASET_VERSION,
};
pub use diffusion_reaction::{
    dr_initial_condition, integrate_diffusion_reaction, reaction_u, reaction_v, simulate_diffusion_reaction, DRConfig,
    BLOW_UP, IC_AMPLITUDE, IC_CUTOFF,
};
pub use grf::{gaussian_random_field, threshold, GrfParams};
pub use shallow_water::{
    dam_radius, run_frames, simulate_shallow_water, Boundary, SWEConfig, ShallowWaterSolver, SWE_HALF_WIDTH,
};
