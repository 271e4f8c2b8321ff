use super::*;
use crate::error::Error;
use crate::numerics::{finite_diff_gradient, DenseMatrix, RngState};

fn small_config(attention: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_head: 8,
        max_seq: 16,
        mlp_hidden: 24,
        attention,
        rope_base: 10000.0,
        tie_embeddings: false,
    }
}

fn random_tokens(rng: &mut RngState, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(vocab as u64) as u32).collect()
}

fn random_example(rng: &mut RngState, seq: usize, vocab: usize) -> TrainExample {
    let input = random_tokens(rng, seq, vocab);
    let targets = random_tokens(rng, seq, vocab);
    let mut loss_positions: Vec<usize> = (0..seq).filter(|_| rng.below(2) == 0).collect();
    if loss_positions.is_empty() {
        loss_positions.push(0);
    }
    let w = rng.uniform(0.5, 3.0);
    TrainExample {
        input,
        loss_positions,
        targets,
        weights: vec![w; seq],
    }
}

#[test]
fn causal_attention_is_lower_triangular() {
    let cfg = small_config(AttentionMode::Causal);
    let p = init_params::<f32>(&cfg, &RngState::new(1)).unwrap();
    let toks = random_tokens(&mut RngState::new(2), 9, cfg.vocab_size);
    let out = forward(&p, &toks, true, None).unwrap();
    for a in out.attention.unwrap() {
        for i in 0..9 {
            for j in i + 1..9 {
                assert_eq!(a.scores.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn capture_is_observational() {
    let cfg = small_config(AttentionMode::Bidirectional);
    let p = init_params::<f32>(&cfg, &RngState::new(1)).unwrap();
    let toks = random_tokens(&mut RngState::new(3), 7, cfg.vocab_size);
    let on = forward(&p, &toks, true, None).unwrap();
    let off = forward(&p, &toks, false, None).unwrap();
    assert!(off.attention.is_none());
    assert_eq!(
        on.attention.as_ref().unwrap().len(),
        cfg.n_layers * cfg.n_heads
    );
    assert_eq!(on.logits, off.logits);
}

#[test]
fn rows_are_stochastic_and_forward_is_deterministic() {
    for mode in [AttentionMode::Bidirectional, AttentionMode::Causal] {
        let cfg = small_config(mode);
        let p = init_params::<f32>(&cfg, &RngState::new(5)).unwrap();
        let toks = random_tokens(&mut RngState::new(6), 12, cfg.vocab_size);
        let a = forward(&p, &toks, true, None).unwrap();
        let b = forward(&p, &toks, true, None).unwrap();
        assert_eq!(a, b);
        for t in a.attention.unwrap() {
            for i in 0..12 {
                let s: f32 = t.scores.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn override_zeroes_masked_columns() {
    let cfg = small_config(AttentionMode::Bidirectional);
    let p = init_params::<f32>(&cfg, &RngState::new(7)).unwrap();
    let toks = random_tokens(&mut RngState::new(8), 10, cfg.vocab_size);
    let ov = LogitOverride::mask_keys(&[0, 4]);
    let out = forward(&p, &toks, true, Some(&ov)).unwrap();
    assert!(out.fallbacks.is_empty());
    for t in out.attention.unwrap() {
        for i in 0..10 {
            assert_eq!(t.scores.get(i, 0), 0.0);
            assert_eq!(t.scores.get(i, 4), 0.0);
            let s: f32 = t.scores.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
    let empty = forward(&p, &toks, true, Some(&LogitOverride::default())).unwrap();
    assert_eq!(empty, forward(&p, &toks, true, None).unwrap());
}

#[test]
fn override_out_of_range_rejected() {
    let cfg = small_config(AttentionMode::Bidirectional);
    let p = init_params::<f32>(&cfg, &RngState::new(7)).unwrap();
    let toks = vec![1, 2, 3];
    let ov = LogitOverride::mask_keys(&[3]);
    assert!(matches!(
        forward(&p, &toks, false, Some(&ov)),
        Err(Error::InvalidOverride(_))
    ));
    let ov = LogitOverride {
        rules: vec![OverrideRule {
            layer: Some(2),
            head: None,
            queries: None,
            keys: vec![0],
        }],
    };
    assert!(matches!(
        forward(&p, &toks, false, Some(&ov)),
        Err(Error::InvalidOverride(_))
    ));
}

#[test]
fn keep_one_fallback_on_causal_first_row() {
    let cfg = small_config(AttentionMode::Causal);
    let p = init_params::<f32>(&cfg, &RngState::new(9)).unwrap();
    let toks = random_tokens(&mut RngState::new(1), 5, cfg.vocab_size);
    let out = forward(&p, &toks, true, Some(&LogitOverride::mask_keys(&[0]))).unwrap();
    // query 0 sees only key 0 in every layer/head
    assert_eq!(out.fallbacks.len(), cfg.n_layers * cfg.n_heads);
    assert!(out
        .fallbacks
        .iter()
        .all(|f| f.query == 0 && f.kept_key == 0));
    for t in out.attention.unwrap() {
        assert_eq!(t.scores.get(0, 0), 1.0);
        for i in 1..5 {
            assert_eq!(t.scores.get(i, 0), 0.0);
        }
    }
}

/// Scalar re-implementation of a single-layer, single-head attention map.
fn scalar_attention(p: &Parameters<f32>, toks: &[u32]) -> Vec<Vec<f64>> {
    let d = p.config.d_model;
    let s = toks.len();
    let l = &p.layers[0];
    let mut q = vec![vec![0.0f64; d]; s];
    let mut k = vec![vec![0.0f64; d]; s];
    for i in 0..s {
        let x: Vec<f64> = p
            .embedding
            .row(toks[i] as usize)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-5).sqrt();
        let n: Vec<f64> = (0..d)
            .map(|c| x[c] / rms * l.attn_norm.get(0, c) as f64)
            .collect();
        for c in 0..d {
            q[i][c] = (0..d).map(|r| n[r] * l.wq.get(r, c) as f64).sum();
            k[i][c] = (0..d).map(|r| n[r] * l.wk.get(r, c) as f64).sum();
        }
        for m in 0..d / 2 {
            let th = i as f64 * (p.config.rope_base as f64).powf(-2.0 * m as f64 / d as f64);
            for v in [&mut q[i], &mut k[i]] {
                let (a, b) = (v[2 * m], v[2 * m + 1]);
                v[2 * m] = a * th.cos() - b * th.sin();
                v[2 * m + 1] = a * th.sin() + b * th.cos();
            }
        }
    }
    (0..s)
        .map(|i| {
            let logits: Vec<f64> = (0..s)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            logits.iter().map(|x| x.exp() / z).collect()
        })
        .collect()
}

#[test]
fn single_head_attention_matches_scalar_oracle() {
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_head: 4,
        max_seq: 3,
        mlp_hidden: 8,
        ..ModelConfig::default()
    };
    let p = init_params::<f32>(&cfg, &RngState::new(21)).unwrap();
    let toks = [5, 1, 6];
    let got = forward(&p, &toks, true, None).unwrap().attention.unwrap();
    let expect = scalar_attention(&p, &toks);
    for i in 0..3 {
        for j in 0..3 {
            assert!((got[0].scores.get(i, j) as f64 - expect[i][j]).abs() < 1e-5);
        }
    }
}

fn gradient_relative_error(cfg: &ModelConfig, seed: u64, seq: usize, batch: usize) -> f64 {
    let p32 = init_params::<f32>(cfg, &RngState::new(seed)).unwrap();
    let p = p32.cast::<f64>();
    let mut rng = RngState::new(seed + 100);
    let examples: Vec<TrainExample> = (0..batch)
        .map(|_| random_example(&mut rng, seq, cfg.vocab_size))
        .collect();
    let (_, grads) = loss_and_grads(&p, &examples).unwrap();
    let analytic = grads.to_flat();
    let mut scratch = p.clone();
    let numeric = finite_diff_gradient(
        |x: &[f64]| {
            scratch.load_flat(x).unwrap();
            loss(&scratch, &examples).unwrap()
        },
        &p.to_flat(),
        1e-5,
    );
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn)
}

#[test]
fn gradients_match_finite_differences() {
    for mode in [AttentionMode::Bidirectional, AttentionMode::Causal] {
        let err = gradient_relative_error(&small_config(mode), 31, 6, 2);
        assert!(err < 1e-3, "{mode:?}: relative error {err}");
    }
    let tied = ModelConfig {
        tie_embeddings: true,
        ..small_config(AttentionMode::Bidirectional)
    };
    let err = gradient_relative_error(&tied, 32, 5, 2);
    assert!(err < 1e-3, "tied: relative error {err}");
}

#[test]
fn zero_weight_positions_contribute_no_gradient() {
    let cfg = small_config(AttentionMode::Bidirectional);
    let p = init_params::<f64>(&cfg, &RngState::new(4)).unwrap();
    let mut rng = RngState::new(5);
    let base = random_example(&mut rng, 6, cfg.vocab_size);
    let mut extra = base.clone();
    let spare = (0..6)
        .find(|i| !base.loss_positions.contains(i))
        .unwrap_or(5);
    if !extra.loss_positions.contains(&spare) {
        extra.loss_positions.push(spare);
    }
    extra.weights[spare] = 0.0;
    // keep the other weights equal so only the spare position changes
    let (la, ga) = loss_and_grads(&p, &[base.clone()]).unwrap();
    let (lb, gb) = loss_and_grads(&p, &[extra]).unwrap();
    if base.loss_positions.contains(&spare) {
        return;
    }
    assert!((la - lb).abs() < 1e-12);
    for (a, b) in ga.to_flat().iter().zip(gb.to_flat()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn initial_loss_is_near_ln_vocab() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, &RngState::new(11)).unwrap();
    let mut rng = RngState::new(12);
    let batch: Vec<_> = (0..8)
        .map(|_| random_example(&mut rng, 10, cfg.vocab_size))
        .collect();
    let l = loss(&p, &batch).unwrap();
    let ln_v = (cfg.vocab_size as f32).ln();
    assert!((l - ln_v).abs() < 0.1, "{l} vs {ln_v}");
}

#[test]
fn sequence_longer_than_max_seq_rejected() {
    let cfg = small_config(AttentionMode::Bidirectional);
    let p = init_params::<f32>(&cfg, &RngState::new(1)).unwrap();
    assert!(forward(&p, &[1; 17], false, None).is_err());
    let _ = DenseMatrix::<f32>::zeros(1, 1);
}
