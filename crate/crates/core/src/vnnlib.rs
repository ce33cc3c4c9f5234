//! VNN-LIB-style text export of a verification query.
//!
//! Inputs become `X_i` with box-bound assertions from the region; margins
//! become `Y_j`. The property "all margins positive everywhere" is exported
//! as its negation, the satisfiability target "some margin <= 0", so an
//! external solver's SAT answer corresponds to Falsified here.

use std::fmt::Write;

use crate::encoder::VerificationQuery;

/// Render the query as VNN-LIB text. Output is deterministic for a given
/// query: fixed declaration order, shortest round-trip float formatting.
pub fn export_vnnlib(query: &VerificationQuery) -> String {
    let bounds = query.region.bounds();
    let mut text = String::new();
    let _ = writeln!(text, "; attack kind: {}", query.kind);
    for (j, c) in query.constraints.iter().enumerate() {
        let _ = writeln!(text, "; Y_{j} := {}", c.name);
    }
    text.push('\n');
    for i in 0..bounds.len() {
        let _ = writeln!(text, "(declare-const X_{i} Real)");
    }
    for j in 0..query.constraints.len() {
        let _ = writeln!(text, "(declare-const Y_{j} Real)");
    }
    text.push('\n');
    for i in 0..bounds.len() {
        let _ = writeln!(text, "(assert (>= X_{i} {}))", bounds.lo[i]);
        let _ = writeln!(text, "(assert (<= X_{i} {}))", bounds.hi[i]);
    }
    text.push('\n');
    if query.constraints.len() == 1 {
        let _ = writeln!(text, "(assert (<= Y_0 0))");
    } else {
        let clauses: Vec<String> = (0..query.constraints.len())
            .map(|j| format!("(<= Y_{j} 0)"))
            .collect();
        let _ = writeln!(text, "(assert (or {}))", clauses.join(" "));
    }
    text
}
