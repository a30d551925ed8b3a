//! Continuous-variable photonic simulator in a truncated Fock basis and the
//! CV-QNN policy circuit.
//!
//! The policy starts from the pre-squeezed vacuum `S(1/2, π/2)^{⊗M}|0…0⟩`,
//! displacement-encodes the latent vector with `D(f_prep(z_j), π/2)`, then
//! applies trainable layers of interferometer, squeezing, interferometer,
//! displacement and Kerr gates. Actions come from a softmax over the
//! momentum-quadrature expectations `⟨P_j⟩`.
//!
//! Truncation makes gates slightly non-unitary. The circuit reports the
//! probability it retained; callers treat values below `1 − trunc_tolerance`
//! as truncation warnings.

mod circuit;
mod expm;
mod gates;

pub use circuit::{
    cv_action_distribution, cv_policy_gradients, displacement_encode, f_prep, mesh_pairs, prepare_initial,
    run_cv_policy, BoundCircuit, CvCircuit, CvLayerParams, CvOutput, CvPolicyConfig, CvPolicyOp, CvPrep, FockState,
    GradientMethod, INITIAL_SQUEEZE, MAX_FOCK_DIM,
};
pub use expm::{expm, CMat};
pub use gates::{annihilation, gate_matrix, gate_matrix_with, padded_dim, Gate, GateBackend};
