//! Small deterministic tensor/autodiff engine backing the CAD pipeline.
//!
//! Everything runs eagerly in `f64` on CPU. A [`Graph`] records a tape of
//! nodes as operations execute; [`Graph::backward`] replays it in reverse to
//! accumulate gradients. Parameters live in a [`ParamStore`] that is borrowed
//! immutably while a graph is alive, so inference from several threads over
//! frozen weights is safe by construction. Reductions always run in creation
//! order, which keeps results bit-reproducible on a given platform.

pub mod complexity;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod sample;
pub mod store;

pub use graph::{Arr, Gradients, Graph, Mode, NodeId};
pub use store::{ParamId, ParamStore};

/// Seeded RNG used across the workspace. ChaCha keeps streams identical
/// across platforms and rand versions.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
