//! Finite-difference audit of the full training gradient.
//!
//! Central differences at f64 over every parameter tensor of the β-mixed
//! objective, on a small model. The analytic gradients come from the real
//! training path; the numeric side only ever calls the forward loss.

use pepe_core::corpus::{Corpus, Triplet};
use pepe_core::model::{ApeModel, Dims};
use pepe_core::train::{batch_gradients, batch_loss, prepare_seq, PreparedSeq, TrainConfig, Variant};
use pepe_core::vocab::Vocabulary;

fn audit_vocab() -> Vocabulary {
    let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..6 {
        toks.push(format!("w{i}"));
    }
    Vocabulary::new(toks).unwrap()
}

fn audit_fixture() -> (ApeModel, Vec<PreparedSeq>, TrainConfig) {
    let vocab = audit_vocab();
    let dims = Dims {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        vocab: vocab.len(),
        users: 3,
        clusters: 3,
        max_len: 16,
        factor_rank: 2,
    };
    let users = vec!["u1".to_string(), "u2".to_string(), "u3".to_string()];
    let mut model = ApeModel::init(dims, users, vocab.digest(), 7, false, false).unwrap();
    // Give the user bias nonzero values so its gradient path is exercised
    // away from the zero point.
    for (i, b) in model.params.user_bias.iter_mut().enumerate() {
        *b = ((i % 7) as f64 - 3.0) * 0.05;
    }

    let triplets = vec![
        Triplet { user_id: "u1".into(), src: vec![6, 7, 8], mt: vec![9, 10], pe: vec![9, 11] },
        Triplet { user_id: "u2".into(), src: vec![8, 6], mt: vec![10, 10, 7], pe: vec![10, 7] },
        Triplet { user_id: "u3".into(), src: vec![11], mt: vec![6], pe: vec![6] },
    ];
    let corpus = Corpus::new(triplets, vocab.clone()).unwrap();
    let labels = [0usize, 2, 1];

    let cfg = TrainConfig {
        variant: Variant::Pepe,
        beta: 0.3,
        k: 3,
        label_smoothing: 0.1,
        dropout: 0.0,
        grl_lambda: 1.0,
        ..TrainConfig::default()
    };
    let seqs: Vec<PreparedSeq> = corpus
        .triplets
        .iter()
        .enumerate()
        .map(|(i, t)| prepare_seq(&model, &vocab, t, Some(labels[i]), cfg.variant).unwrap())
        .collect();
    (model, seqs, cfg)
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let (model, seqs, cfg) = audit_fixture();
    let (_, grads) = batch_gradients(&model, &seqs, &cfg, None).unwrap();

    let h = 1e-5;
    let names: Vec<(String, usize)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();

    let mut worst: (f64, String, usize) = (0.0, String::new(), 0);
    let mut checked = 0usize;
    for (tensor_idx, (name, len)) in names.iter().enumerate() {
        for j in 0..*len {
            let mut plus = model.clone();
            plus.params.tensors_mut()[tensor_idx].1[j] += h;
            let lp = batch_loss(&plus, &seqs, &cfg).unwrap().train;
            let mut minus = model.clone();
            minus.params.tensors_mut()[tensor_idx].1[j] -= h;
            let lm = batch_loss(&minus, &seqs, &cfg).unwrap().train;

            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.tensors()[tensor_idx].1[j];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            if rel > worst.0 {
                worst = (rel, name.clone(), j);
            }
            assert!(
                rel < 1e-4,
                "{name}[{j}]: numeric {numeric} vs analytic {analytic} (rel {rel})"
            );
            checked += 1;
        }
    }
    println!("checked {checked} parameters; worst relative error {} at {}[{}]", worst.0, worst.1, worst.2);
    assert!(checked > 1500);
}

#[test]
fn user_cls_variant_gradient_also_matches_finite_differences() {
    // The user-classification head uses the standard (non-reversed) path;
    // audit a slice of its parameters separately.
    let vocab = audit_vocab();
    let dims = Dims {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        vocab: vocab.len(),
        users: 2,
        clusters: 3,
        max_len: 16,
        factor_rank: 2,
    };
    let users = vec!["u1".to_string(), "u2".to_string()];
    let model = ApeModel::init(dims, users, vocab.digest(), 13, false, true).unwrap();
    let triplets = vec![
        Triplet { user_id: "u1".into(), src: vec![6, 7], mt: vec![9], pe: vec![9] },
        Triplet { user_id: "u2".into(), src: vec![8], mt: vec![10, 7], pe: vec![10] },
    ];
    let cfg = TrainConfig {
        variant: Variant::UserCls,
        beta: 0.3,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let seqs: Vec<PreparedSeq> = triplets
        .iter()
        .map(|t| prepare_seq(&model, &vocab, t, None, cfg.variant).unwrap())
        .collect();
    let (_, grads) = batch_gradients(&model, &seqs, &cfg, None).unwrap();

    let h = 1e-5;
    let names: Vec<String> = model.params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (tensor_idx, name) in names.iter().enumerate() {
        if !(name.starts_with("user_cls.") || name.starts_with("enc0.attn.q") || name == "seg") {
            continue;
        }
        let len = model.params.tensors()[tensor_idx].1.len();
        for j in 0..len {
            let mut plus = model.clone();
            plus.params.tensors_mut()[tensor_idx].1[j] += h;
            let lp = batch_loss(&plus, &seqs, &cfg).unwrap().train;
            let mut minus = model.clone();
            minus.params.tensors_mut()[tensor_idx].1[j] -= h;
            let lm = batch_loss(&minus, &seqs, &cfg).unwrap().train;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.tensors()[tensor_idx].1[j];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{name}[{j}]: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn factor_bias_gradient_matches_finite_differences() {
    let vocab = audit_vocab();
    let dims = Dims {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        vocab: vocab.len(),
        users: 2,
        clusters: 3,
        max_len: 16,
        factor_rank: 2,
    };
    let users = vec!["u1".to_string(), "u2".to_string()];
    let mut model = ApeModel::init(dims, users, vocab.digest(), 17, true, false).unwrap();
    if let Some(f) = &mut model.params.factor {
        for (i, v) in f.user_vec.iter_mut().enumerate() {
            *v = (i as f64 - 1.5) * 0.1;
        }
    }
    let triplets = vec![
        Triplet { user_id: "u1".into(), src: vec![6, 7], mt: vec![9], pe: vec![9, 11] },
        Triplet { user_id: "u2".into(), src: vec![8], mt: vec![10], pe: vec![10] },
    ];
    let cfg = TrainConfig {
        variant: Variant::FactorBias,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let seqs: Vec<PreparedSeq> = triplets
        .iter()
        .map(|t| prepare_seq(&model, &vocab, t, None, cfg.variant).unwrap())
        .collect();
    let (_, grads) = batch_gradients(&model, &seqs, &cfg, None).unwrap();

    let h = 1e-5;
    let names: Vec<String> = model.params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (tensor_idx, name) in names.iter().enumerate() {
        if !name.starts_with("factor.") {
            continue;
        }
        let len = model.params.tensors()[tensor_idx].1.len();
        for j in 0..len {
            let mut plus = model.clone();
            plus.params.tensors_mut()[tensor_idx].1[j] += h;
            let lp = batch_loss(&plus, &seqs, &cfg).unwrap().train;
            let mut minus = model.clone();
            minus.params.tensors_mut()[tensor_idx].1[j] -= h;
            let lm = batch_loss(&minus, &seqs, &cfg).unwrap().train;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.tensors()[tensor_idx].1[j];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{name}[{j}]: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}
