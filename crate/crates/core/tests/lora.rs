//! Adapter application, merging and transfer on the toy network.

mod common;

use std::collections::BTreeSet;

use common::{latent, random_cond, timestep, toy};
use hollownet::hollow::parse_plan;
use hollownet::lora::{init_adapters, merge_adapters, transfer_adapters, transfer_back, Provenance};
use hollownet::model::{unet_forward, ParamStore};
use hollownet::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fresh_adapters_change_nothing() {
    let g = toy();
    let params = ParamStore::init(&g, 3);
    let set = init_adapters(&g, None, 4, 1).unwrap();
    let z = latent(&g, 1, 1);
    let c = random_cond(&g, 2);
    let (plain, _) = unet_forward(&g, &params, &z, &[99], &c, None, &[]).unwrap();
    let (with, _) = unet_forward(&g, &params, &z, &[99], &c, Some(&set), &[]).unwrap();
    assert!(plain.bit_eq(&with));
    let merged = merge_adapters(&params, &set).unwrap();
    for (name, t) in params.iter() {
        assert!(merged.get(name).unwrap().bit_eq(t), "{name}");
    }
}

#[test]
fn merged_weights_match_dynamic_adapters() {
    let g = toy();
    let params = ParamStore::init(&g, 3);
    let mut set = init_adapters(&g, None, 4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut values = set.tensors();
    for t in values.values_mut() {
        *t = Tensor::from_fn(t.dims(), |_| rng.gen_range(-0.2..0.2));
    }
    set.set_tensors(&values).unwrap();
    let merged = merge_adapters(&params, &set).unwrap();
    assert!(merge_adapters(&merged, &set).is_err());
    for case in 0..10 {
        let z = latent(&g, 1, 100 + case);
        let c = random_cond(&g, 200 + case);
        let t = [timestep(case)];
        let (dynamic, _) = unet_forward(&g, &params, &z, &t, &c, Some(&set), &[]).unwrap();
        let (baked, _) = unet_forward(&g, &merged, &z, &t, &c, None, &[]).unwrap();
        let err = baked.max_rel_diff(&dynamic);
        assert!(err < 1e-5, "case {case}: {err:e}");
    }
}

#[test]
fn transfer_covers_exactly_the_retained_projections() {
    let g = toy();
    let plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
    let mut trained = init_adapters(&g, Some(&plan), 4, 1).unwrap();
    trained.provenance = Provenance::TrainedOnHollowed;
    let moved = transfer_adapters(&trained, &g, &plan).unwrap();
    assert_eq!(moved.provenance, Provenance::Transferred);
    let got: BTreeSet<&str> = moved.targets().collect();
    let want: BTreeSet<String> = g
        .attn_projections()
        .into_iter()
        .filter(|p| !plan.removes(&p.block))
        .map(|p| p.id)
        .collect();
    assert_eq!(got, want.iter().map(String::as_str).collect());
    let back = transfer_back(&moved, &g, &plan).unwrap();
    assert_eq!(back, trained);
}
