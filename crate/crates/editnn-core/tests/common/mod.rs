//! Helpers shared by the integration suites.
#![allow(dead_code)]

use editnn_core::models::{GroupVars, ParamSet, ParamVars};
use editnn_core::{Tensor, Var};

/// All parameter tensors in group order, matching `vars_from_leaves`.
pub fn tensors_of(params: &ParamSet) -> Vec<Tensor> {
    params
        .groups()
        .iter()
        .flat_map(|g| g.tensors.iter().map(|t| t.value.clone()))
        .collect()
}

/// Rebuild the structured parameter view around externally supplied leaves
/// (one per tensor, in `tensors_of` order), as gradient probes require.
pub fn vars_from_leaves(template: &ParamSet, leaves: &[Var]) -> ParamVars {
    let mut it = leaves.iter();
    let groups = template
        .groups()
        .iter()
        .map(|g| GroupVars {
            name: g.name.clone(),
            editable: template.editable().contains(&g.name),
            vars: g
                .tensors
                .iter()
                .map(|t| {
                    let leaf = it.next().expect("one leaf per tensor").clone();
                    (t.name.clone(), leaf)
                })
                .collect(),
        })
        .collect();
    assert!(it.next().is_none(), "leftover leaves");
    ParamVars { groups }
}
