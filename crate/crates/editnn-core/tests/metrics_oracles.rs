//! Evaluation metrics cross-checked against independent computations: the
//! variance spectrum against a Gram-matrix eigendecomposition, and report
//! aggregates against a from-scratch recount.

use editnn_core::constraints::{Competitors, EditConstraint};
use editnn_core::data_io::gen_blobs;
use editnn_core::editors::{edit, EditorConfig};
use editnn_core::evaluation::{evaluate_edits, explained_variance, ControlSet, EvalOptions};
use editnn_core::models::{forward, init, Activation, ModelConfig, ParamSet, ParamVars};
use editnn_core::rng::{self, Stream};
use editnn_core::{Dtype, Tensor, Var};

#[test]
fn explained_variance_matches_gram_eigendecomposition() {
    // SVD route vs eigenvalues of the centered Gram matrix: the singular
    // values squared of C are exactly the eigenvalues of C * C^T.
    let (n, m) = (50usize, 200usize);
    let mut r = rng::stream_rng(1234, Stream::EvalEdits);
    let data: Vec<f64> = (0..n * m).map(|_| rng::normal(&mut r)).collect();
    let matrix = Tensor::from_f64(vec![n, m], data.clone()).unwrap();

    let mine = explained_variance(&matrix, 10).unwrap();

    let mut centered = data;
    for j in 0..m {
        let mean: f64 = (0..n).map(|i| centered[i * m + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * m + j] -= mean;
        }
    }
    let c = nalgebra::DMatrix::from_row_slice(n, m, &centered);
    let gram = &c * c.transpose();
    let mut eig: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = eig.iter().sum();
    let mut acc = 0.0;
    let oracle: Vec<f64> = eig.iter().take(10).map(|l| {
        acc += l;
        acc / total
    }).collect();

    assert_eq!(mine.len(), oracle.len());
    for (i, (a, b)) in mine.iter().zip(&oracle).enumerate() {
        assert!(
            (a - b).abs() < 1e-8,
            "component {i}: svd route {a} vs gram route {b}"
        );
    }
}

fn desk_setup() -> (ModelConfig, ParamSet, Vec<EditConstraint>, Tensor, Vec<usize>) {
    let model_cfg = ModelConfig {
        input_dim: 4,
        hidden_dims: vec![8],
        num_classes: 3,
        activation: Activation::Tanh,
        extra_block: None,
        dtype: Dtype::F32,
    };
    let params = init(&model_cfg, 17).unwrap().select_editable(&["head"]).unwrap();
    let ds = gen_blobs(3, 40, 4, 0.6, 5).unwrap().split_random(90, 5).unwrap();
    let edits: Vec<EditConstraint> = [3usize, 10, 21, 34, 47, 58]
        .iter()
        .map(|&row| {
            let x = ds
                .features()
                .gather_rows(&[row])
                .unwrap()
                .reshape(vec![4])
                .unwrap()
                .cast(Dtype::F32);
            EditConstraint::new(x, (ds.labels()[row] + 1) % 3, Competitors::AllOther).unwrap()
        })
        .collect();
    let test_idx = ds.test_indices().to_vec();
    let cx = ds.features().gather_rows(&test_idx).unwrap().cast(Dtype::F32);
    let cy: Vec<usize> = test_idx.iter().map(|&i| ds.labels()[i]).collect();
    (model_cfg, params, edits, cx, cy)
}

fn manual_error_rate(model_cfg: &ModelConfig, params: &ParamSet, x: &Tensor, y: &[usize]) -> f64 {
    let logits = forward(model_cfg, &ParamVars::constants(params), &Var::constant(x.clone()))
        .unwrap()
        .value()
        .to_f64_vec();
    let c = model_cfg.num_classes;
    let mut wrong = 0usize;
    for (i, &label) in y.iter().enumerate() {
        let row = &logits[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best != label {
            wrong += 1;
        }
    }
    wrong as f64 / y.len() as f64
}

#[test]
fn report_aggregates_match_a_from_scratch_recount() {
    let (model_cfg, params, edits, cx, cy) = desk_setup();
    let editor: EditorConfig =
        serde_json::from_value(serde_json::json!({"variant": "gd", "k": 10, "alpha": 0.4}))
            .unwrap();
    let control = ControlSet::new(&cx, &cy).unwrap();
    let report = evaluate_edits(&model_cfg, &params, &edits, &editor, control, EvalOptions::default())
        .unwrap();

    let base = manual_error_rate(&model_cfg, &params, &cx, &cy);
    assert_eq!(report.base_error, base);

    let mut abs_sum = 0.0;
    let mut signed_sum = 0.0;
    let mut successes = 0usize;
    let mut steps = 0usize;
    for (i, constraint) in edits.iter().enumerate() {
        let (edited, trace) = edit(&model_cfg, &params, constraint, &editor).unwrap();
        let after = manual_error_rate(&model_cfg, &edited, &cx, &cy);
        assert_eq!(report.per_edit[i].error_after, after, "edit {i}");
        assert_eq!(report.per_edit[i].trace, trace, "edit {i}");
        abs_sum += (after - base).abs();
        signed_sum += after - base;
        steps += trace.steps_taken;
        if trace.satisfied {
            successes += 1;
        }
    }
    let n = edits.len() as f64;
    assert!((report.mean_drawdown - abs_sum / n).abs() < 1e-15);
    assert!((report.mean_drawdown_signed - signed_sum / n).abs() < 1e-15);
    assert_eq!(report.success_rate, successes as f64 / n);
    assert_eq!(report.mean_steps, steps as f64 / n);
}

#[cfg(feature = "parallel")]
#[test]
fn reports_do_not_depend_on_the_worker_count() {
    let (model_cfg, params, edits, cx, cy) = desk_setup();
    let editor: EditorConfig =
        serde_json::from_value(serde_json::json!({"variant": "adam", "k": 10, "alpha": 0.05}))
            .unwrap();
    let control = ControlSet::new(&cx, &cy).unwrap();
    let wide = evaluate_edits(&model_cfg, &params, &edits, &editor, control, EvalOptions::default())
        .unwrap();
    for threads in [1usize, 2, 3] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let narrow = pool
            .install(|| {
                evaluate_edits(&model_cfg, &params, &edits, &editor, control, EvalOptions::default())
            })
            .unwrap();
        assert_eq!(wide, narrow, "report changed under a {threads}-thread pool");
    }
}
