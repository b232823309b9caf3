use proptest::prelude::*;
use simpleformer::blocks::BlockKind;
use simpleformer::checkpoint::{self, FORMAT_VERSION, MAGIC};
use simpleformer::model::{inventory, matmul_flops_analytic, param_count_analytic, sinusoidal_pe, ModelConfig, TransformerLM};
use simpleformer::numerics::{Graph, NormKind, SeqLayout, Tensor};
use simpleformer::params::{gaussian, tensor_rng};
use simpleformer::{Error, Model32, Model64};

fn paper_config(kind: BlockKind) -> ModelConfig {
    ModelConfig::new(kind, 18, 768, 12, 3072, 50000, 128)
}

fn small(kind: BlockKind) -> ModelConfig {
    ModelConfig::new(kind, 3, 16, 4, 32, 11, 8).with_seed(5)
}

fn perturb(model: &mut Model64, seed: u64) {
    let store = model.store_mut();
    for i in 0..store.len() {
        let spec = store.spec(i).clone();
        if spec.role.is_trainable() {
            store.value_mut(i).add_assign(&gaussian(&spec.shape, 0.2, &mut tensor_rng(seed, &spec.name)));
        }
    }
}

// ── positional encoding ─────────────────────────────────────────────

#[test]
fn positional_encoding_examples() {
    let pe = sinusoidal_pe::<f64>(6, 8).unwrap();
    for c in 0..4 {
        assert_eq!(pe.get(0, 2 * c), 0.0);
        assert_eq!(pe.get(0, 2 * c + 1), 1.0);
    }
    assert!((pe.get(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-15);
    assert!((pe.get(1, 1) - 1f64.cos()).abs() < 1e-15);
    assert!((pe.get(3, 2) - (3.0 * 10000f64.powf(-0.25)).sin()).abs() < 1e-15);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn positional_encoding_rejects_odd_width() {
    assert!(matches!(sinusoidal_pe::<f64>(4, 7), Err(Error::Shape { .. })));
    let mut cfg = small(BlockKind::PreLn);
    cfg.d = 15;
    cfg.heads = 3;
    cfg.block.d = 15;
    cfg.block.heads = 3;
    assert!(matches!(TransformerLM::<f64>::new(cfg), Err(Error::Config(_))));
}

// ── configuration ───────────────────────────────────────────────────

#[test]
fn config_validation() {
    let mut cfg = small(BlockKind::PreLn);
    cfg.vocab = 1;
    assert!(cfg.validate().is_err());
    let mut cfg = small(BlockKind::PreLn);
    cfg.max_seq_len = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small(BlockKind::PreLn);
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = small(BlockKind::PreLn);
    cfg.block.d_ff = 64;
    assert!(cfg.validate().is_err());
}

#[test]
fn digest_ignores_seed_but_not_architecture() {
    let a = small(BlockKind::Sas);
    assert_eq!(a.digest(), a.clone().with_seed(99).digest());
    let mut b = a.clone();
    b.tie_embeddings = false;
    assert_ne!(a.digest(), b.digest());
    assert_ne!(a.digest(), small(BlockKind::SasP).digest());
}

#[test]
fn final_norm_is_kept_without_block_norms() {
    assert_eq!(small(BlockKind::SasPNoNorm).final_norm(), NormKind::Rms);
    let mut cfg = small(BlockKind::PreLn);
    cfg.block.norm = NormKind::Layer;
    assert_eq!(cfg.final_norm(), NormKind::Layer);
}

// ── forward ─────────────────────────────────────────────────────────

#[test]
fn zero_layer_model_matches_hand_pipeline() {
    let cfg = ModelConfig::new(BlockKind::PreLn, 0, 8, 2, 16, 7, 5).with_seed(3);
    let mut model = Model64::new(cfg).unwrap();
    let gain = gaussian::<f64>(&[8], 1.0, &mut tensor_rng(4, "gain"));
    *model.store_mut().get_mut("final_norm.gain").unwrap() = gain.clone();
    let tokens = [6, 0, 3, 3, 1];
    let logits = model.forward_logits(&tokens, 1, 5).unwrap();

    let embed = model.store().get("embed").unwrap().clone();
    let pe = sinusoidal_pe::<f64>(5, 8).unwrap();
    for (t, &tok) in tokens.iter().enumerate() {
        let x: Vec<f64> = (0..8).map(|c| embed.get(tok, c) + pe.get(t, c)).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
        let h: Vec<f64> = x.iter().zip(gain.data()).map(|(v, g)| v / rms * g).collect();
        for v in 0..7 {
            let want: f64 = (0..8).map(|c| h[c] * embed.get(v, c)).sum();
            assert!((logits.data()[t * 7 + v] - want).abs() < 1e-13);
        }
    }
}

#[test]
fn untied_model_uses_separate_unembedding() {
    let mut cfg = ModelConfig::new(BlockKind::PreLn, 0, 4, 1, 8, 5, 3);
    cfg.tie_embeddings = false;
    let mut model = Model64::new(cfg).unwrap();
    let before = model.forward_logits(&[1, 2, 3], 1, 3).unwrap();
    *model.store_mut().get_mut("unembed").unwrap() = Tensor::zeros(&[5, 4]);
    let after = model.forward_logits(&[1, 2, 3], 1, 3).unwrap();
    assert!(before.max_abs() > 0.0);
    assert_eq!(after.max_abs(), 0.0);
}

#[test]
fn identical_sequences_give_identical_logits() {
    for kind in BlockKind::ALL {
        let mut model = Model64::new(small(kind)).unwrap();
        perturb(&mut model, 1);
        let seq = [3, 1, 4, 1, 5, 9];
        let tokens: Vec<usize> = seq.iter().chain(&seq).chain(&seq).copied().collect();
        let logits = model.forward_logits(&tokens, 3, 6).unwrap();
        let n = 6 * 11;
        assert_eq!(logits.data()[..n], logits.data()[n..2 * n]);
        assert_eq!(logits.data()[..n], logits.data()[2 * n..]);
    }
}

#[test]
fn forward_is_deterministic_for_a_seed() {
    let a = Model64::new(small(BlockKind::Sas)).unwrap().forward_logits(&[1, 2, 3, 4], 1, 4).unwrap();
    let b = Model64::new(small(BlockKind::Sas)).unwrap().forward_logits(&[1, 2, 3, 4], 1, 4).unwrap();
    assert_eq!(a, b);
    let c = Model64::new(small(BlockKind::Sas).with_seed(6)).unwrap().forward_logits(&[1, 2, 3, 4], 1, 4).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bad_tokens_and_lengths_are_rejected() {
    let model = Model64::new(small(BlockKind::PreLn)).unwrap();
    assert!(matches!(model.forward_logits(&[0, 11], 1, 2), Err(Error::OutOfRange { index: 11, bound: 11, .. })));
    assert!(matches!(model.forward_logits(&[0; 9], 1, 9), Err(Error::Shape { .. })));
    assert!(matches!(model.forward_logits(&[0; 5], 2, 3), Err(Error::Shape { .. })));
}

#[test]
fn loss_at_init_is_near_uniform() {
    let model = Model64::new(small(BlockKind::Sas)).unwrap();
    let inputs: Vec<usize> = (0..16).map(|i| i % 11).collect();
    let targets: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 11).collect();
    let loss = model.loss(&inputs, &targets, 2, 8).unwrap();
    assert!((loss - (11f64).ln()).abs() < 0.05, "{loss}");
}

#[test]
fn single_precision_model_tracks_double() {
    let cfg = small(BlockKind::SasP);
    let a = Model64::new(cfg.clone()).unwrap().forward_logits(&[1, 2, 3, 4], 1, 4).unwrap();
    let b = Model32::new(cfg).unwrap().forward_logits(&[1, 2, 3, 4], 1, 4).unwrap();
    assert!(a.max_abs_diff(&b.cast()) < 1e-4);
}

#[test]
fn hidden_states_report_every_layer() {
    let model = Model64::new(small(BlockKind::PreLn)).unwrap();
    let layout = SeqLayout::new(1, 4);
    let x = model.embed_tokens(&[1, 2, 3, 4], layout).unwrap();
    let (states, err) = model.hidden_states(&x, layout);
    assert!(err.is_none());
    assert_eq!(states.len(), 3);
    assert!(states.iter().all(|s| s.shape() == [4, 16]));
    let (states, err) = model.hidden_states(&Tensor::zeros(&[3, 16]), layout);
    assert!(states.is_empty() && matches!(err, Some(Error::Shape { .. })));
}

#[test]
fn sequence_grads_sum_to_batch_gradient() {
    let mut model = Model64::new(small(BlockKind::Sas)).unwrap();
    perturb(&mut model, 2);
    let inputs = [1, 2, 3, 4, 5, 6, 7, 8];
    let targets = [2, 3, 4, 5, 6, 7, 8, 9];
    let mut acc = model.zero_grads();
    model.accumulate_grads(&inputs, &targets, 4, 8.0, &mut acc, None).unwrap();
    assert!((acc.loss - model.loss(&inputs, &targets, 2, 4).unwrap()).abs() < 1e-14);

    let mut g = Graph::new();
    let (logits, leaves) = model.build(&mut g, &inputs, SeqLayout::new(2, 4)).unwrap();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    for (slot, leaf) in leaves.iter().enumerate() {
        if let Some(want) = grads.get(*leaf) {
            assert!(acc.grads[slot].max_abs_diff(want) < 1e-13, "{}", model.store().spec(slot).name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn logits_are_causal(kind_index in 0usize..6, pos in 0usize..7, seed in any::<u64>()) {
        let kind = BlockKind::ALL[kind_index];
        let mut model = Model64::new(small(kind)).unwrap();
        perturb(&mut model, seed);
        let a: Vec<usize> = (0..8).map(|i| (seed as usize / (i + 1)) % 11).collect();
        let mut b = a.clone();
        for t in b.iter_mut().skip(pos + 1) {
            *t = (*t + 5) % 11;
        }
        let (la, lb) = (model.forward_logits(&a, 1, 8).unwrap(), model.forward_logits(&b, 1, 8).unwrap());
        prop_assert_eq!(&la.data()[..(pos + 1) * 11], &lb.data()[..(pos + 1) * 11]);
    }
}

// ── accounting ──────────────────────────────────────────────────────

#[test]
fn paper_scale_parameter_counts() {
    let pre = param_count_analytic(&paper_config(BlockKind::PreLn)).unwrap().total;
    let sas = param_count_analytic(&paper_config(BlockKind::Sas)).unwrap().total;
    assert!((165_000_000..=168_000_000).contains(&pre), "{pre}");
    assert!((144_000_000..=147_000_000).contains(&sas), "{sas}");
    let reduction = 1.0 - sas as f64 / pre as f64;
    assert!((reduction - 0.13).abs() <= 0.01, "{reduction}");
}

#[test]
fn tiny_preln_count_by_hand() {
    // embed 3·2, two norms 2+2, four 2×2 attention weights, MLP 2·4 + 4 + 4·2 + 2, final norm 2
    let cfg = ModelConfig::new(BlockKind::PreLn, 1, 2, 1, 4, 3, 4);
    let count = param_count_analytic(&cfg).unwrap();
    assert_eq!(count.total, 6 + 4 + 16 + 22 + 2);
    assert_eq!(Model64::new(cfg).unwrap().num_parameters() as u64, count.total);
}

#[test]
fn simplified_count_matches_removed_and_restored_tensors() {
    for (layers, d, heads, d_ff, vocab) in [(18, 768, 12, 3072, 50000), (4, 16, 4, 32, 11), (2, 8, 2, 16, 5)] {
        let pre = param_count_analytic(&ModelConfig::new(BlockKind::PreLn, layers, d, heads, d_ff, vocab, 8)).unwrap();
        let sas = param_count_analytic(&ModelConfig::new(BlockKind::Sas, layers, d, heads, d_ff, vocab, 8)).unwrap();
        let (l, d, h) = (layers as u64, d as u64, heads as u64);
        let scalars = sas
            .sum_where(|n| n.ends_with("alpha") || n.ends_with("beta") || n.ends_with("gamma") || n.ends_with("_sa") || n.ends_with("_ff"));
        assert_eq!(scalars, 2 + (3 * h + 2) * l);
        assert_eq!(sas.sum_where(|n| n.contains("wv") || n.contains("wp")), d * d + 2);
        assert_eq!(pre.sum_where(|n| n.contains("wv") || n.contains("wp")), 2 * d * d * l);
        assert_eq!(sas.total, pre.total - 2 * d * d * l + d * d + 2 + (3 * h + 2) * l);
    }
}

#[test]
fn instantiated_counts_match_analytic() {
    for kind in BlockKind::ALL {
        for cfg in [ModelConfig::new(kind, 1, 2, 1, 4, 3, 4), small(kind), ModelConfig::new(kind, 2, 32, 4, 128, 64, 16)] {
            let analytic = param_count_analytic(&cfg).unwrap();
            let model = Model64::new(cfg.clone()).unwrap();
            assert_eq!(model.num_parameters() as u64, analytic.total, "{kind}");
            let names: Vec<&str> = analytic.breakdown.iter().map(|(n, _, _)| n.as_str()).collect();
            let trainable: Vec<&str> = model.store().specs().iter().filter(|s| s.role.is_trainable()).map(|s| s.name.as_str()).collect();
            assert_eq!(names, trainable);
        }
        let paper = param_count_analytic(&paper_config(kind)).unwrap();
        assert!(paper.total > 10_000_000);
        assert_eq!(paper.total, paper.breakdown.iter().map(|(_, s, _)| s.iter().product::<usize>() as u64).sum::<u64>());
    }
}

#[test]
fn inventory_is_a_pure_function_of_config() {
    let (a, _) = inventory(&small(BlockKind::VSkipInit)).unwrap();
    let (b, _) = inventory(&small(BlockKind::VSkipInit).with_seed(77)).unwrap();
    assert_eq!(a, b);
    let names: std::collections::HashSet<&str> = a.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names.len(), a.len());
}

#[test]
fn flop_accounting() {
    let t = 128u64;
    let pre = matmul_flops_analytic(&paper_config(BlockKind::PreLn), t as usize).unwrap();
    let sas = matmul_flops_analytic(&paper_config(BlockKind::Sas), t as usize).unwrap();
    let d = 768u64;
    let b = pre.blocks[0];
    assert_eq!(b.attention_weight_matmuls, 4);
    assert_eq!(b.attention_weights, 4 * 2 * t * d * d);
    assert_eq!(b.attention_mixing, 2 * 2 * t * t * d);
    assert_eq!(b.mlp, 2 * 2 * t * d * 3072);
    assert_eq!(pre.unembedding, 2 * t * d * 50000);
    assert_eq!(pre.total, 18 * b.total() + pre.unembedding);

    assert_eq!(sas.blocks[0].attention_weight_matmuls, 3);
    for (p, s) in pre.blocks.iter().zip(&sas.blocks).skip(1) {
        assert_eq!(2 * s.attention_weight_matmuls, p.attention_weight_matmuls);
        assert_eq!(2 * s.attention_weights, p.attention_weights);
        assert_eq!(s.attention_mixing, p.attention_mixing);
    }
    assert!(sas.attention_share() < pre.attention_share());
    let single = matmul_flops_analytic(&ModelConfig::new(BlockKind::PreLn, 0, 4, 1, 8, 3, 4), 4).unwrap();
    assert_eq!(single.total, 2 * 4 * 4 * 3);
}

// ── checkpoints ─────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in BlockKind::ALL {
        let mut model = Model64::new(small(kind)).unwrap();
        perturb(&mut model, 3);
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        checkpoint::save(&model, &p1).unwrap();
        let loaded: Model64 = checkpoint::load(model.config(), &p1).unwrap();
        checkpoint::save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let tokens = [1, 2, 3, 4, 5];
        assert_eq!(model.forward_logits(&tokens, 1, 5).unwrap(), loaded.forward_logits(&tokens, 1, 5).unwrap());
    }
}

#[test]
fn checkpoint_header_layout() {
    let model = Model32::new(small(BlockKind::PreLn)).unwrap();
    let bytes = checkpoint::encode(&model);
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(bytes[12..44], model.config().digest());
    assert_eq!(u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize, model.store().len());
}

#[test]
fn checkpoint_with_wrong_config_is_a_shape_error() {
    let model = Model64::new(small(BlockKind::PreLn)).unwrap();
    let bytes = checkpoint::encode(&model);
    let mut wider = small(BlockKind::PreLn);
    wider.d_ff = 48;
    wider.block.d_ff = 48;
    assert!(matches!(checkpoint::decode::<f64>(&wider, &bytes), Err(Error::Shape { .. })));
    assert!(matches!(checkpoint::decode::<f64>(&small(BlockKind::Sas), &bytes), Err(Error::Shape { .. })));
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = Model64::new(small(BlockKind::Sas)).unwrap();
    let bytes = checkpoint::encode(&model);
    let cfg = model.config();
    assert!(matches!(checkpoint::decode::<f64>(cfg, &bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(checkpoint::decode::<f64>(cfg, &bytes[..30]).is_err());
    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(checkpoint::decode::<f64>(cfg, &version), Err(Error::Checkpoint(_))));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(checkpoint::decode::<f64>(cfg, &magic), Err(Error::Checkpoint(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(checkpoint::decode::<f64>(cfg, &trailing), Err(Error::Checkpoint(_))));
    assert!(checkpoint::decode::<f32>(cfg, &bytes).is_err());
    assert!(checkpoint::load::<f64>(cfg, std::path::Path::new("/nonexistent/model.ckpt")).is_err());
}
