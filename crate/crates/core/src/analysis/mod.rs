//! Permutation-symmetry checks and activation correlation analysis.

pub mod correlation;
pub mod invariance;

pub use correlation::{
    block_structure, collect_activations, correlation_matrix, read_csv, render_heatmap, write_csv,
    ActivationTable, BlockStructureMetric, CorrelationMatrix, Positions, Tap,
};
pub use invariance::{
    attention_maps, check_invariance, decode_symmetry, equivariance_deviation,
    final_position_deviation, DecodeSymmetryReport, PermutationTestReport, Verdict, INVARIANCE_TOL,
    SYMMETRY_BREAK_TOL,
};
