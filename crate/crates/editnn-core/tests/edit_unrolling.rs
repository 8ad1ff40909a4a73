//! Cross-module checks of the edit unroll: differentiating through a
//! multi-step adaptive editor, and mask discipline over arbitrary
//! editable-group subsets.

mod common;

use editnn_core::constraints::{Competitors, EditConstraint};
use editnn_core::editors::{edit, EditMode, EditorConfig, EditorParams};
use editnn_core::models::{cross_entropy, forward, init, Activation, ModelConfig, ParamVars};
use editnn_core::rng::{self, Stream};
use editnn_core::training::edit_loss;
use editnn_core::{check_gradient, Dtype, Tensor, Var};
use proptest::prelude::*;

#[test]
fn unrolled_rmsprop_edit_gradient_matches_finite_differences() {
    let model_cfg = ModelConfig {
        input_dim: 3,
        hidden_dims: vec![4],
        num_classes: 3,
        activation: Activation::Tanh,
        extra_block: None,
        dtype: Dtype::F64,
    };
    let params = init(&model_cfg, 11).unwrap();
    let editor: EditorConfig = serde_json::from_value(serde_json::json!({
        "variant": "rmsprop", "k": 5, "alpha": 1e-3, "beta": 0.9, "trainable": ["alpha"]
    }))
    .unwrap();

    let mut r = rng::stream_rng(77, Stream::Init);
    let edit_x = Tensor::from_f64(vec![3], (0..3).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let batch = Tensor::from_f64(vec![4, 3], (0..12).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let labels = vec![0usize, 1, 2, 0];

    // Pick the worst-scoring class as the target so the constraint stays
    // violated through five small steps: the hinge never leaves its linear
    // region and the competitor maximum never switches, keeping the probed
    // function smooth at this point.
    let logits = forward(
        &model_cfg,
        &ParamVars::constants(&params),
        &Var::constant(edit_x.reshape(vec![1, 3]).unwrap()),
    )
    .unwrap()
    .value()
    .to_f64_vec();
    let y_ref = (0..3).min_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap()).unwrap();
    let mut others: Vec<f64> = (0..3).filter(|&c| c != y_ref).map(|c| logits[c]).collect();
    others.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(others[0] - logits[y_ref] > 1e-2, "constraint must start clearly violated");
    assert!(others[0] - others[1] > 1e-2, "competitor maximum must be isolated");
    let constraint = EditConstraint::new(edit_x, y_ref, Competitors::AllOther).unwrap();

    let mut point = common::tensors_of(&params);
    point.push(Tensor::scalar(Dtype::F64, editor.alpha.ln()));
    let err = check_gradient(
        |leaves| {
            let (model_leaves, alpha_leaf) = leaves.split_at(leaves.len() - 1);
            let pv = common::vars_from_leaves(&params, model_leaves);
            let ep = EditorParams {
                log_alpha: Some(alpha_leaf[0].clone()),
                raw_beta: None,
            };
            let (l_edit, _, trace) = edit_loss(
                &model_cfg,
                &pv,
                &constraint,
                &editor,
                Some(&ep),
                EditMode::Differentiable { second_order: true },
            )?;
            assert_eq!(trace.steps_taken, 5, "early stop would change the probed function");
            let base = cross_entropy(
                &forward(&model_cfg, &pv, &Var::constant(batch.clone()))?,
                &labels,
            )?;
            base.add(&l_edit.scale_const(0.5))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative gradient error {err} through 5 rmsprop steps");
}

fn three_group_model() -> (ModelConfig, editnn_core::models::ParamSet) {
    let model_cfg = ModelConfig {
        input_dim: 4,
        hidden_dims: vec![5, 4],
        num_classes: 3,
        activation: Activation::Tanh,
        extra_block: None,
        dtype: Dtype::F32,
    };
    let params = init(&model_cfg, 23).unwrap();
    (model_cfg, params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn edits_only_touch_the_selected_groups(mask in 1usize..8, seed in 0u64..1000) {
        let (model_cfg, params) = three_group_model();
        let all = ["layer_0", "layer_1", "head"];
        let selected: Vec<&str> = all.iter().enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &n)| n)
            .collect();
        let masked = params.select_editable(&selected).unwrap();

        let mut r = rng::stream_rng(seed, Stream::EvalEdits);
        let x = Tensor::from_f64(vec![4], (0..4).map(|_| rng::normal(&mut r)).collect())
            .unwrap()
            .cast(Dtype::F32);
        let constraint = EditConstraint::new(x, rng::below(&mut r, 3), Competitors::AllOther).unwrap();
        let editor: EditorConfig = serde_json::from_value(
            serde_json::json!({"variant": "gd", "k": 3, "alpha": 0.5})
        ).unwrap();

        let (edited, _) = edit(&model_cfg, &masked, &constraint, &editor).unwrap();
        let (again, _) = edit(&model_cfg, &masked, &constraint, &editor).unwrap();
        prop_assert_eq!(&edited, &again, "editing must be deterministic");

        for (g_before, g_after) in masked.groups().iter().zip(edited.groups()) {
            prop_assert_eq!(&g_before.name, &g_after.name);
            if !selected.contains(&g_before.name.as_str()) {
                for (t_before, t_after) in g_before.tensors.iter().zip(&g_after.tensors) {
                    prop_assert_eq!(
                        &t_before.value, &t_after.value,
                        "frozen group {} changed", g_before.name
                    );
                }
            }
        }
        prop_assert_eq!(edited.editable(), masked.editable());
    }
}
