//! Parameter accounting against closed-form counts and the published anchors.

use hollownet::hollow::{count_params, make_plan_from_labels};
use hollownet::lora::{adapter_param_count, init_adapters};
use hollownet::model::{build_unet, ArchConfig};

fn res(cin: usize, cout: usize, temb: usize) -> usize {
    let short = if cin != cout { cin * cout + cout } else { 0 };
    2 * cin + 9 * cin * cout + cout + temb * cout + cout + 2 * cout + 9 * cout * cout + cout + short
}

fn transformer(c: usize, ctx: usize) -> usize {
    let norms = 2 * c + 3 * 2 * c;
    let proj = 2 * (c * c + c);
    let self_attn = 4 * c * c + c;
    let cross_attn = 2 * c * c + 2 * c * ctx + c;
    let ff = (8 * c * c + 8 * c) + (4 * c * c + c);
    norms + proj + self_attn + cross_attn + ff
}

fn conv3(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

#[test]
fn toy16_matches_hand_count() {
    let (b, t, ctx) = (16, 64, 32);
    let stem = conv3(3, b) + (b * t + t) + (t * t + t);
    let down = res(b, b, t)
        + transformer(b, ctx)
        + res(b, b, t)
        + transformer(b, ctx)
        + conv3(b, b)
        + res(b, 2 * b, t)
        + transformer(2 * b, ctx)
        + res(2 * b, 2 * b, t)
        + transformer(2 * b, ctx);
    let mid = res(2 * b, 2 * b, t) + transformer(2 * b, ctx) + res(2 * b, 2 * b, t);
    // skip channels popped by stage 4: 2-2, 2-1, 1-3 outputs (32, 32, 16)
    let up4 = res(64, 32, t) + res(64, 32, t) + res(48, 32, t) + 3 * transformer(32, ctx) + conv3(32, 32);
    // stage 5 pops 1-2, 1-1, conv_in outputs (16 each)
    let up5 = res(48, 16, t) + res(32, 16, t) + res(32, 16, t) + 3 * transformer(16, ctx);
    let head = 2 * b + conv3(b, 3);
    let want = stem + down + mid + up4 + up5 + head;

    let g = build_unet(&ArchConfig::toy16()).unwrap();
    assert_eq!(g.total_params(), want);
}

#[test]
fn sd21_anchors() {
    let g = build_unet(&ArchConfig::sd21_shaped()).unwrap();
    assert_eq!(g.total_params(), 865_910_724);
    let plan = make_plan_from_labels(&g, &["3-3", "4-1", "4-2", "5-1", "5-2", "6-1", "6-2", "6-3", "6-4"]).unwrap();
    assert_eq!(count_params(&g, Some(&plan)).retained, 528_952_004);
    assert_eq!(adapter_param_count(&g, None, 128), 26_558_464);
    assert_eq!(adapter_param_count(&g, Some(&plan), 128), 24_002_560);
    assert_eq!(adapter_param_count(&g, None, 1), 207_488);
}

#[test]
fn adapter_count_formula_matches_counting() {
    let g = build_unet(&ArchConfig::toy16()).unwrap();
    for rank in [1, 4, 8] {
        let set = init_adapters(&g, None, rank, 0).unwrap();
        assert_eq!(set.num_params(), adapter_param_count(&g, None, rank));
    }
}
