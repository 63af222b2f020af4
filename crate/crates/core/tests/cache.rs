mod common;

use common::{cond, latent, toy};
use hollownet::cache::{
    draw_keys, precompute, record_header_bytes, replay, write_cache, ActivationCache, CacheKey, SampleKind, SampleSet,
};
use hollownet::hollow::parse_plan;
use hollownet::model::{tap_forward, NoiseSchedule, ParamStore};
use hollownet::Error;

fn sets(g: &hollownet::model::BlockGraph) -> (SampleSet, SampleSet) {
    let inst = SampleSet {
        kind: SampleKind::Instance,
        latents: (0..3).map(|i| latent(g, 1, 100 + i)).collect(),
        prompt_id: 0,
        cond: cond(g, "circle", true),
    };
    let prior = SampleSet {
        kind: SampleKind::Prior,
        latents: (0..2).map(|i| latent(g, 1, 200 + i)).collect(),
        prompt_id: 1,
        cond: cond(g, "circle", false),
    };
    (inst, prior)
}

#[test]
fn precompute_is_byte_identical_and_replays() {
    let g = toy();
    let params = ParamStore::init(&g, 5);
    let plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
    let schedule = NoiseSchedule::default();
    let (inst, prior) = sets(&g);
    let key = CacheKey::new(&g, &params, &plan, &schedule);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a.hnac", "b.hnac"] {
        let recs = precompute(&g, &params, &plan, &schedule, &inst, Some(&prior), 20, 4, 9).unwrap();
        let path = dir.path().join(name);
        write_cache(&path, key, &recs).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let cache = ActivationCache::open(&dir.path().join("a.hnac")).unwrap();
    assert_eq!(cache.len(), 24);
    cache.check(&key).unwrap();
    let rec = cache.read_record(17).unwrap();
    assert_eq!(rec.kind, SampleKind::Instance);
    let again = replay(&g, &params, &plan, &schedule, &inst, &rec).unwrap();
    assert!(again.bit_eq(&rec.tap));
    for i in cache.indices_of(SampleKind::Prior).unwrap() {
        let rec = cache.read_record(i).unwrap();
        assert!(replay(&g, &params, &plan, &schedule, &prior, &rec)
            .unwrap()
            .bit_eq(&rec.tap));
    }
    assert!(cache.read_record(24).is_err());

    // record keys are the shared draws
    let keys = draw_keys(&inst, 20, &schedule, 9);
    assert_eq!(cache.read_record(3).unwrap().key(), keys[3]);

    // the tap is the clean partial forward of the record's inputs
    let (z_t, _) = rec.key().inputs(&inst, &schedule).unwrap();
    let tap = tap_forward(&g, &params, &plan, &z_t, &[rec.timestep as usize], &inst.cond).unwrap();
    assert!(tap.batch_item(0).unwrap().data() == rec.tap.data());
}

#[test]
fn storage_follows_record_formula() {
    let g = toy();
    let params = ParamStore::init(&g, 5);
    let schedule = NoiseSchedule::default();
    let (inst, _) = sets(&g);
    for list in ["3-1,3-2", "2-2,3-1,3-2,4-1"] {
        let plan = parse_plan(&g, list).unwrap();
        let n = 40;
        let recs = precompute(&g, &params, &plan, &schedule, &inst, None, n, 0, 1).unwrap();
        let tap_bytes: usize = plan.tap_dims.iter().product::<usize>() * 4;
        let want = n * (tap_bytes + record_header_bytes(plan.tap_dims.len()));
        let got = hollownet::cache::to_bytes(CacheKey::new(&g, &params, &plan, &schedule), &recs).len();
        let rel = (got as f64 - want as f64).abs() / want as f64;
        assert!(rel < 0.01, "{list}: {got} bytes against {want}");
    }
}

#[test]
fn changed_configuration_is_refused() {
    let g = toy();
    let params = ParamStore::init(&g, 5);
    let plan = parse_plan(&g, "3-1,3-2").unwrap();
    let schedule = NoiseSchedule::default();
    let (inst, _) = sets(&g);
    let key = CacheKey::new(&g, &params, &plan, &schedule);
    let recs = precompute(&g, &params, &plan, &schedule, &inst, None, 4, 0, 1).unwrap();
    let cache = ActivationCache::from_bytes(hollownet::cache::to_bytes(key, &recs)).unwrap();

    let other_plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
    let other_params = ParamStore::init(&g, 6);
    let other_schedule = NoiseSchedule::linear(1000, 1e-4, 0.03);
    for k in [
        CacheKey::new(&g, &params, &other_plan, &schedule),
        CacheKey::new(&g, &other_params, &plan, &schedule),
        CacheKey::new(&g, &params, &plan, &other_schedule),
    ] {
        assert!(matches!(cache.check(&k), Err(Error::Mismatch(_))));
    }
}

#[test]
fn precompute_rejects_bad_inputs() {
    let g = toy();
    let params = ParamStore::init(&g, 5);
    let plan = parse_plan(&g, "3-1,3-2").unwrap();
    let schedule = NoiseSchedule::default();
    let (mut inst, _) = sets(&g);
    assert!(precompute(&g, &params, &plan, &schedule, &inst, None, 2, 1, 1).is_err());
    inst.latents.clear();
    assert!(precompute(&g, &params, &plan, &schedule, &inst, None, 2, 0, 1).is_err());
}
