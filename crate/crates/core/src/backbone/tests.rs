use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::dot;

fn small_config() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 40,
        d_model: 16,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        max_query_len: 8,
        max_docid_len: 4,
    }
}

fn model(seed: u64) -> GenIRModel {
    GenIRModel::new(small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn encode_is_deterministic_and_shaped() {
    let m = model(3);
    let a = m.encode_query(&[5, 6, 7]).unwrap();
    let b = model(3).encode_query(&[5, 6, 7]).unwrap();
    assert_eq!(a.shape(), &[3, 16]);
    assert_eq!(a.data(), b.data());
}

#[test]
fn pad_suffix_does_not_change_memory() {
    let m = model(4);
    let a = m.encode_query(&[5, 6, 7]).unwrap();
    let b = m.encode_query(&[5, 6, 7, PAD, PAD]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn empty_query_and_long_prefix_are_contract_errors() {
    let m = model(5);
    assert!(m.encode_query(&[]).is_err());
    assert!(m.encode_query(&[PAD, PAD]).is_err());
    let ctx = m.prepare(&[3]).unwrap();
    assert!(m.decode_step(&[2, 2, 2, 2, 2], &ctx).is_err());
    assert!(m.decode_step(&[2, 2, 2, 2], &ctx).is_ok());
}

#[test]
fn logits_are_tied_to_embedding() {
    let m = model(6);
    let ctx = m.prepare(&[9, 10, 11]).unwrap();
    let (h, logits) = m.decode_step(&[2, 3], &ctx).unwrap();
    let e = m.embedding();
    for t in 0..e.rows() {
        assert!((logits[t] - dot(&h, e.row(t))).abs() <= 1e-12);
    }
    let zero = vec![0.0; h.len()];
    assert!(m.token_logits(&zero, None).iter().all(|&l| l == 0.0));
}

#[test]
fn perturbing_one_embedding_row_only_moves_its_logit_for_fixed_hidden() {
    let mut m = model(7);
    let ctx = m.prepare(&[9, 10]).unwrap();
    let (h, before) = m.decode_step(&[4], &ctx).unwrap();
    m.params_mut().value_mut(EMBED).unwrap().row_mut(12)[0] += 0.5;
    let after = m.token_logits(&h, None);
    for t in 0..before.len() {
        if t == 12 {
            assert!((after[t] - before[t] - 0.5 * h[0]).abs() < 1e-12);
        } else {
            assert_eq!(after[t], before[t]);
        }
    }
}

#[test]
fn zero_init_adapter_is_exact_identity() {
    let base = model(8);
    let mut adapted = base.clone();
    adapted
        .attach_adapter(4, 8.0, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let c1 = base.prepare(&[5, 6, 7]).unwrap();
    let c2 = adapted.prepare(&[5, 6, 7]).unwrap();
    let (h1, l1) = base.decode_step(&[2, 3], &c1).unwrap();
    let (h2, l2) = adapted.decode_step(&[2, 3], &c2).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(l1, l2);
    let cfg = small_config();
    let per_layer_dd = 2 * cfg.d_model * 4;
    let linears_dd = 4 * cfg.encoder_layers + 8 * cfg.decoder_layers;
    let ffn = (cfg.encoder_layers + cfg.decoder_layers) * 2 * (cfg.d_model + cfg.d_ff) * 4;
    assert_eq!(adapted.adapter_param_count(), linears_dd * per_layer_dd + ffn);
    assert!(adapted.attach_adapter(4, 8.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn adapter_training_leaves_base_bytes_unchanged() {
    let mut m = model(9);
    m.attach_adapter(2, 4.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let base_before = m.base_params().digest();
    let adapter_before = m.adapter_params().digest();
    let pairs = vec![SupervisionPair::new(vec![5, 6], vec![3, 4], PairKind::Query2Docid)];
    train_nll(&mut m, None, &pairs, &TrainConfig::adamw(3, 1e-2, 0)).unwrap();
    assert_eq!(m.base_params().digest(), base_before);
    assert_ne!(m.adapter_params().digest(), adapter_before);
}

#[test]
fn uniform_logits_give_log_vocab_nll() {
    let mut m = model(10);
    let e = m.params_mut().value_mut(EMBED).unwrap();
    e.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let pairs = vec![SupervisionPair::new(vec![5, 6], vec![3, 4], PairKind::Query2Docid)];
    let nll = mean_nll(&m, None, &pairs).unwrap();
    assert!((nll - (40f64).ln()).abs() < 1e-12);
}

#[test]
fn single_pair_loss_matches_hand_computation() {
    let m = model(11);
    let query = [7, 8, 9];
    let target = [3, 5, EOS];
    let ctx = m.prepare(&query).unwrap();
    let mut expected = 0.0;
    for k in 0..target.len() {
        let (_, logits) = m.decode_step(&target[..k], &ctx).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        expected -= logits[target[k] as usize] - max - z.ln();
    }
    let pairs = vec![SupervisionPair::new(query.to_vec(), target.to_vec(), PairKind::Query2Docid)];
    let nll = mean_nll(&m, None, &pairs).unwrap() * 3.0;
    assert!((nll - expected).abs() < 1e-10, "{nll} vs {expected}");
    let lp = teacher_forced_logprobs(&m, None, &query, &target).unwrap();
    assert!((-lp.iter().sum::<f64>() - expected).abs() < 1e-10);
}

#[test]
fn memorizes_ten_single_token_docids() {
    let mut m = model(12);
    let pairs: Vec<SupervisionPair> = (0..10)
        .map(|i| SupervisionPair::new(vec![20 + i, 30 + i], vec![2 + i], PairKind::Query2Docid))
        .collect();
    let mut cfg = TrainConfig::adamw(200, 1e-2, 1);
    cfg.batch_size = 10;
    let log = train_nll(&mut m, None, &pairs, &cfg).unwrap();
    assert!(log.epoch_nll.last().unwrap() < &log.epoch_nll[0]);
    for p in &pairs {
        let ctx = m.prepare(&p.query).unwrap();
        let (_, logits) = m.decode_step(&[], &ctx).unwrap();
        // argmax over docid tokens 2..12, lowest id on ties
        let best = (2..12u32)
            .max_by(|&a, &b| logits[a as usize].total_cmp(&logits[b as usize]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(best, p.target[0]);
    }
}

#[test]
fn config_text_round_trip() {
    let cfg = small_config();
    assert_eq!(BackboneConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(BackboneConfig::from_text("vocab_size = 3\nbogus = 1").is_err());
}
