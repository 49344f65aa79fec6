//! Per-phase constants: the phase cap `L_k`, the quantization grid `kappa_l`
//! and the confidence radius `gamma_l`.

/// `L_k = max(ceil(log_4(k / d)), 0)`, computed with integer comparisons
/// against powers of four.
pub fn max_phase(k: u64, d: u64) -> u32 {
    assert!(k >= 1 && d >= 1, "max_phase needs k, d >= 1");
    let (k, d) = (k as u128, d as u128);
    let mut level = 0u32;
    while d << (2 * level) < k {
        level += 1;
    }
    level
}

/// `kappa_l = 0.01 * 2^{-4l} / d`.
pub fn kappa(l: u32, d: usize) -> f64 {
    assert!(l >= 1, "phases start at 1");
    0.01 * (-4.0 * l as f64).exp2() / d as f64
}

/// Smallest `c` with `2^c >= n`, for `n >= 1`.
fn ceil_log2(n: u64) -> u64 {
    debug_assert!(n >= 1);
    u64::from(64 - (n - 1).leading_zeros()) * u64::from(n > 1)
}

/// `c * 5 (l + 20 + ceil(log2(l d))) d H sqrt(log2(16 l d H / delta))`.
pub fn gamma(l: u32, d: usize, horizon: usize, delta: f64, scale: f64) -> f64 {
    assert!(l >= 1, "phases start at 1");
    assert!(delta > 0.0 && delta < 0.25, "delta must lie in (0, 1/4)");
    assert!(scale > 0.0, "gamma scale must be positive");
    let (lf, df, hf) = (l as f64, d as f64, horizon as f64);
    let offset = ceil_log2(u64::from(l) * d as u64) as f64;
    scale * 5.0 * (lf + 20.0 + offset) * df * hf * (16.0 * lf * df * hf / delta).log2().sqrt()
}
