//! Branch-free `exp` for `f32` slices.
//!
//! Range reduction to `2^n · e^r` with a degree-6 polynomial on
//! `|r| ≤ ln2/2`; about 2 ulp. Only plain IEEE add/mul and integer bit
//! tricks are used, so the loop vectorizes and the result does not depend on
//! which instruction set runs it.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
const LO: f32 = -87.336_54;
const HI: f32 = 88.0;

#[inline(always)]
fn exp1(x: f32) -> f32 {
    let x = x.max(LO).min(HI);
    let shifted = x * LOG2E + ROUND;
    // the low mantissa bits of `shifted` hold round(x·log2 e)
    let ni = shifted.to_bits().wrapping_sub(ROUND.to_bits()) as i32;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_2e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 0.166_666_65;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    let bits = (ni.wrapping_add(127) as u32) << 23;
    y * f32::from_bits(bits)
}

#[inline(always)]
fn exp_loop(xs: &mut [f32]) {
    for v in xs.iter_mut() {
        *v = exp1(*v);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn exp_loop_avx2(xs: &mut [f32]) {
    exp_loop(xs)
}

pub fn exp_f32_in_place(xs: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        unsafe { exp_loop_avx2(xs) };
        return;
    }
    exp_loop(xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn close_to_libm() {
        let mut worst = 0.0f64;
        let mut xs: Vec<f32> = (0..20_000).map(|i| -80.0 + i as f32 * 0.008).collect();
        let want: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        exp_f32_in_place(&mut xs);
        for (g, w) in xs.iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs() / w);
        }
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn saturates() {
        let mut xs = [-1e4f32, 0.0, 1e4];
        exp_f32_in_place(&mut xs);
        assert!(xs[0] >= 0.0 && xs[0] < 1e-37);
        assert_eq!(xs[1], 1.0);
        assert!(xs[2].is_finite());
    }
}
