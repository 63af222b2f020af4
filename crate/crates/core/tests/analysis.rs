mod common;

use common::toy;
use hollownet::analysis::{early_repeat_flops, flops_estimate, full_ft_flops, memory_estimate, Stage};
use hollownet::hollow::{parse_plan, HollowPlan};
use hollownet::lora::init_adapters;
use hollownet::model::{build_unet_graph, ArchConfig, BlockGraph, Route, TIME_EMBED};
use hollownet::trainer::TrainMode;

const SD21_PLANS: [&str; 7] = [
    "5-1,5-2",
    "4-2,5-1,5-2,6-1",
    "4-1,4-2,5-1,5-2,6-1,6-2",
    "3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4",
    "3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1",
    "3-1,3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1,7-2",
    "2-3,3-1,3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1,7-2,7-3,7-4",
];

fn sd21() -> (BlockGraph, Vec<HollowPlan>) {
    let g = BlockGraph::new(&ArchConfig::sd21_shaped()).unwrap();
    let plans = SD21_PLANS.iter().map(|l| parse_plan(&g, l).unwrap()).collect();
    (g, plans)
}

#[test]
fn memory_orders_modes_and_fractions() {
    let (g, plans) = sd21();
    let full = memory_estimate(&g, None, 128, TrainMode::FullFt).unwrap();
    let lora = memory_estimate(&g, None, 128, TrainMode::LoraFt).unwrap();
    let mut last = lora.training_bytes();
    for p in &plans {
        let h = memory_estimate(&g, Some(p), 128, TrainMode::Hollowed).unwrap();
        assert!(h.training_bytes() < last, "{}", p.label_list());
        last = h.training_bytes();
    }
    assert!(full.training_bytes() > lora.training_bytes());
    // params + grads + two moments
    assert_eq!(
        full.param_bytes + full.grad_bytes + full.optimizer_bytes,
        16 * full.total_params
    );

    let h = memory_estimate(&g, Some(&plans[3]), 128, TrainMode::Hollowed).unwrap();
    let ratio = h.retained_params as f64 / h.total_params as f64;
    assert!((ratio / (527.0 / 866.0) - 1.0).abs() < 0.02, "{ratio}");
    assert!(memory_estimate(&g, None, 128, TrainMode::Hollowed).is_err());
}

#[test]
fn finetune_and_inference_flops() {
    let (g, plans) = sd21();
    let lora = flops_estimate(&g, None, Stage::Finetune, 128).unwrap();
    assert!(full_ft_flops(&g).unwrap() > flops_estimate(&g, None, Stage::InferencePlain, 128).unwrap());
    for p in &plans {
        assert!(flops_estimate(&g, Some(p), Stage::Finetune, 128).unwrap() < lora);
        let plain = flops_estimate(&g, Some(p), Stage::InferencePlain, 128).unwrap();
        let two = flops_estimate(&g, Some(p), Stage::InferenceTwoPath, 128).unwrap();
        assert_eq!(two - plain, early_repeat_flops(&g, p).unwrap());
    }
    assert!(flops_estimate(&g, None, Stage::Precompute, 128).is_err());
}

#[test]
fn flops_add_up_over_blocks() {
    let g = toy();
    let plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
    let set = init_adapters(&g, Some(&plan), 4, 1).unwrap();
    let full = build_unet_graph(&g, Route::Full, Some(&set), 1, &[]).unwrap().graph;
    let by_block = full.flops_by_block();
    assert_eq!(by_block.values().sum::<u64>(), full.flops());
    assert_eq!(by_block.get("").copied().unwrap_or(0), 0);
    assert!(by_block[TIME_EMBED] > 0);
    let removed: u64 = plan.removed.iter().map(|l| by_block[l]).sum();
    let hollowed = build_unet_graph(&g, Route::Hollowed(&plan), Some(&set), 1, &[])
        .unwrap()
        .graph;
    assert_eq!(hollowed.flops(), full.flops() - removed);
    // repeated calls agree
    let a = memory_estimate(&g, Some(&plan), 4, TrainMode::Hollowed).unwrap();
    assert_eq!(a, memory_estimate(&g, Some(&plan), 4, TrainMode::Hollowed).unwrap());
}
