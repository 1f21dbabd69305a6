use depthadapt::adapters::trainable_param_count;
use depthadapt::model::PATCH;
use depthadapt::stage2::{memory_footprint, MemoryMode};
use depthadapt::{classify_layers, AdapterSet, ModelConfig, ParamStage, SubspaceKind, ToyDepthModel};
use proptest::prelude::*;

/// `(id, kind, rows, cols)` of every adaptable weight, walked from the
/// configuration alone.
fn shape_walk(cfg: &ModelConfig) -> Vec<(String, SubspaceKind, usize, usize)> {
    let c = cfg.base_channels;
    let mut out = vec![
        ("stem.conv1".to_string(), SubspaceKind::Conv, c, 3 * 4 * 4),
        ("stem.conv2".to_string(), SubspaceKind::Conv, c, c * 4 * 4),
    ];
    for b in 0..cfg.attention_blocks {
        out.push((format!("attn{b}.qkv"), SubspaceKind::Attention, 3 * c, c));
        out.push((format!("attn{b}.out"), SubspaceKind::Attention, c, c));
    }
    let mut fan_in = c;
    for i in 0..cfg.mlp_layers {
        let rows = if i + 1 == cfg.mlp_layers { PATCH * PATCH } else { cfg.mlp_hidden };
        out.push((format!("head.fc{}", i + 1), SubspaceKind::Mlp, rows, fan_in));
        fan_in = rows;
    }
    out
}

fn config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..4, 1usize..3, 1usize..4, 4usize..24).prop_map(|(heads, per_head, blocks, mlp_layers, hidden)| {
        ModelConfig {
            input_height: 16,
            input_width: 16,
            base_channels: heads * per_head * 4,
            attention_heads: heads,
            attention_blocks: blocks,
            mlp_hidden: hidden,
            mlp_layers,
            ..ModelConfig::default()
        }
    })
}

#[test]
fn default_registry_counts_and_shapes() {
    let cfg = ModelConfig::default();
    let reg = classify_layers(&ToyDepthModel::<f32>::build(&cfg).unwrap()).unwrap();
    assert_eq!(reg.counts(), (2, 2, 2));
    let got: Vec<(String, usize, usize)> = reg.layers().iter().map(|d| (d.layer_id.clone(), d.rows, d.cols)).collect();
    let want: Vec<(String, usize, usize)> = shape_walk(&cfg).into_iter().map(|(id, _, m, n)| (id, m, n)).collect();
    assert_eq!(got, want);
}

#[test]
fn default_stage_param_counts() {
    let cfg = ModelConfig::default();
    let model = ToyDepthModel::<f32>::build(&cfg).unwrap();
    let reg = classify_layers(&model).unwrap();
    let adapters = AdapterSet::<f32>::attach(&reg, 4, 0).unwrap();
    let one = trainable_param_count(&adapters, &reg, ParamStage::One);
    // 4·(32+48) + 4·(32+512) + 4·(96+32) + 4·(32+32) + 4·(64+32) + 4·(16+64)
    assert_eq!(one.adapter_params, 320 + 2176 + 512 + 256 + 384 + 320);
    assert_eq!(one.base_params, 1536 + 16384 + 3072 + 1024 + 2048 + 1024);
    assert_eq!(one.total, one.base_params + one.adapter_params);
    let none = AdapterSet::<f32>::from_parts(reg.clone(), Vec::new()).unwrap();
    let two = trainable_param_count(&none, &reg, ParamStage::Two { projection_rank: 4 });
    assert_eq!(two.adapter_params, one.adapter_params + 6 * 2);
    assert_eq!(one.formatted_millions, "0.0");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn registry_matches_the_shape_walk(cfg in config()) {
        let reg = classify_layers(&ToyDepthModel::<f32>::build(&cfg).unwrap()).unwrap();
        let walk = shape_walk(&cfg);
        prop_assert_eq!(reg.len(), walk.len());
        for (id, kind, m, n) in &walk {
            let d = reg.get(id).unwrap();
            prop_assert_eq!((d.kind, d.rows, d.cols), (*kind, *m, *n));
        }
    }

    #[test]
    fn param_counts_follow_the_shape_walk(cfg in config(), rank in 1usize..4, proj in 1usize..4) {
        let reg = classify_layers(&ToyDepthModel::<f32>::build(&cfg).unwrap()).unwrap();
        let walk = shape_walk(&cfg);
        let adapters = AdapterSet::<f32>::attach(&reg, rank, 3).unwrap();
        let one = trainable_param_count(&adapters, &reg, ParamStage::One);
        let lora: usize = walk.iter().map(|(_, _, m, n)| rank * (m + n)).sum();
        let base: usize = walk.iter().map(|(_, _, m, n)| m * n).sum();
        prop_assert_eq!(one.adapter_params, lora);
        prop_assert_eq!(one.base_params, base);
        let two = trainable_param_count(&adapters, &reg, ParamStage::Two { projection_rank: proj });
        let extra: usize = walk.iter().map(|(_, _, m, n)| 2 + proj * (m + n)).sum();
        prop_assert_eq!(two.adapter_params, lora + extra);
    }

    #[test]
    fn footprints_follow_the_shape_walk(cfg in config(), rank in 1usize..4) {
        let reg = classify_layers(&ToyDepthModel::<f32>::build(&cfg).unwrap()).unwrap();
        let walk = shape_walk(&cfg);
        let full = memory_footprint(&reg, MemoryMode::FullAdam, rank).unwrap();
        let proj = memory_footprint(&reg, MemoryMode::Projected, rank).unwrap();
        prop_assert_eq!(full.total_floats, walk.iter().map(|(_, _, m, n)| 2 * m * n).sum::<usize>());
        prop_assert_eq!(proj.total_floats, walk.iter().map(|(_, _, m, n)| m * rank + 2 * rank * n + 2).sum::<usize>());
    }

    #[test]
    fn subspace_selection_adapts_only_selected_layers(cfg in config(), mask in 1u8..8) {
        let reg = classify_layers(&ToyDepthModel::<f32>::build(&cfg).unwrap()).unwrap();
        let kinds: std::collections::BTreeSet<SubspaceKind> = [SubspaceKind::Conv, SubspaceKind::Mlp, SubspaceKind::Attention]
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, k)| k)
            .collect();
        let sel = reg.select_subspaces(&kinds).unwrap();
        let adapters = AdapterSet::<f32>::attach(&sel, 1, 0).unwrap();
        let expected = shape_walk(&cfg).iter().filter(|(_, k, _, _)| kinds.contains(k)).count();
        prop_assert_eq!(adapters.len(), expected);
        prop_assert!(adapters.iter().all(|a| kinds.contains(&reg.get(&a.layer_id).unwrap().kind)));
    }
}
