use ztrans_core::autodiff::grad_check_many;
use ztrans_core::corpus::CorpusConfig;
use ztrans_core::model::Bound;
use ztrans_core::train::batch_loss;
use ztrans_core::{DatasetSplits, Model, ModelParams, TaggedExample, Tensor, TrainConfig, TransformerConfig};

fn data() -> DatasetSplits {
    DatasetSplits::build(&CorpusConfig {
        num_languages: 3,
        sentences_per_pair: 12,
        valid_per_pair: 2,
        test_per_pair: 8,
        concept_vocab_size: 10,
        min_len: 2,
        max_len: 5,
        seed: 5,
    })
    .unwrap()
}

fn config(data: &DatasetSplits, d_model: usize) -> TransformerConfig {
    TransformerConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model,
        heads: 2,
        d_ffn: 2 * d_model,
        dropout: 0.0,
        vocab_size: data.languages.vocab_size(),
        num_languages: data.languages.len(),
        max_positions: 16,
        lole_enabled: true,
        d_e: d_model / 2,
        lclr_enabled: true,
        d_h: d_model / 2,
        k: 3,
        ..TransformerConfig::default()
    }
}

/// Mixed-direction batch so LCLR has anchors, positives and negatives.
fn batch(data: &DatasetSplits) -> Vec<&TaggedExample> {
    let mut out = Vec::new();
    for tgt in 0..3 {
        out.extend(data.train.iter().filter(|e| e.tgt_lang == tgt).take(2));
    }
    out
}

#[test]
fn lole_adds_exactly_t_times_d_e_parameters() {
    let d = data();
    let mut cfg = config(&d, 16);
    let with = ModelParams::init(&cfg, 1).unwrap().parameter_count();
    cfg.lole_enabled = false;
    let without = ModelParams::init(&cfg, 1).unwrap().parameter_count();
    assert_eq!(with - without, cfg.num_languages * cfg.d_e);
    // LCLR has no parameters of its own
    cfg.lclr_enabled = false;
    assert_eq!(ModelParams::init(&cfg, 1).unwrap().parameter_count(), without);
}

#[test]
fn zeroed_language_embedding_reproduces_vanilla_bit_for_bit() {
    let d = data();
    let mut cfg = config(&d, 16);
    cfg.lclr_enabled = false;
    let lole = ModelParams::init(&cfg, 4).unwrap();
    cfg.lole_enabled = false;
    let vanilla_tensors: Vec<(String, Tensor)> = lole
        .iter()
        .filter(|(n, _)| !n.starts_with("lole."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let vanilla = ModelParams::from_tensors(cfg, vanilla_tensors).unwrap();
    let examples: Vec<&TaggedExample> = d.test_zero_shot.iter().take(5).collect();
    let a = Model::new(&lole).forward_teacher_forced(&examples, true).unwrap();
    let b = Model::new(&vanilla).forward_teacher_forced(&examples, true).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert_eq!(x.values(), y.values());
    }
    assert_eq!(a.logits.len(), 5);
    for (x, y) in a.encoder.iter().zip(&b.encoder).chain(a.decoder.iter().zip(&b.decoder)) {
        for (p, q) in x.states.iter().zip(&y.states) {
            assert_eq!(p.values(), q.values());
        }
    }
}

#[test]
fn full_objective_matches_finite_differences() {
    let d = data();
    let cfg = config(&d, 8);
    let mut params = ModelParams::init(&cfg, 2).unwrap();
    // move the language embedding and biases off zero so their gradients are exercised
    for (i, v) in params.get_mut("lole.embeddings").unwrap().data_mut().iter_mut().enumerate() {
        *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let points: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let examples = batch(&d);
    let ids: Vec<u64> = (0..examples.len() as u64).collect();
    let train = TrainConfig::default();
    let model = Model::new(&params);
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).step_by(p.len().div_ceil(6)).map(move |j| (i, j)))
        .collect();
    let report = grad_check_many(
        |g, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            Ok(batch_loss(&model, g, &bound, &examples, &ids, &train, 9, None)?.total)
        },
        &points,
        1e-4,
        Some(&coords),
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{report:?} at {}", names[report.worst.0]);
}
