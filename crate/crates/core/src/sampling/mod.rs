//! Non-uniform Fourier sampling, reconstruction, and their coordinate
//! gradients.

mod nudft;
mod recon;

pub use nudft::{coord_gradient, nudft_adjoint, nudft_forward, nudft_forward_real, NudftPlan, Spectrum};
pub use recon::{
    acquire, density_weights, recon_batch, recon_batch_backward, reconstruct, BatchRecon, Density, KSpaceData,
    ReconConfig, ReconMethod, Reconstruction,
};
