/// Rounds every entry to the nearest multiple of `kappa`, ties away from zero.
pub fn quantize_value(x: f64, kappa: f64) -> f64 {
    debug_assert!(kappa > 0.0);
    kappa * (x / kappa).round()
}

pub fn quantize(values: &[f64], kappa: f64) -> Vec<f64> {
    assert!(kappa > 0.0, "quantization step must be positive");
    values.iter().map(|&x| quantize_value(x, kappa)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_values() {
        assert_eq!(quantize(&[0.0], 0.25), vec![0.0]);
        assert_eq!(quantize(&[0.3], 0.25), vec![0.25]);
        assert_eq!(quantize(&[0.375, -0.375], 0.25), vec![0.5, -0.5]);
        assert_eq!(quantize(&[0.0625], 7.8125e-5), vec![0.0625]);
    }

    proptest! {
        #[test]
        fn residue_is_half_step(x in -10.0f64..10.0, exp in 1u32..20) {
            let kappa = 0.01 * (-(exp as f64)).exp2();
            let q = quantize_value(x, kappa);
            prop_assert!((q - x).abs() <= kappa / 2.0 * (1.0 + 1e-12));
            let m = q / kappa;
            prop_assert!((m - m.round()).abs() <= 1e-15 * m.abs().max(1.0));
        }

        #[test]
        fn symmetric_stays_symmetric(vals in proptest::collection::vec(-1.0f64..1.0, 6)) {
            // 3x3 symmetric matrix from its upper triangle
            let idx = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];
            let m: Vec<f64> = (0..9).map(|i| vals[idx[i / 3][i % 3]]).collect();
            let q = quantize(&m, 1e-3);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(q[i * 3 + j], q[j * 3 + i]);
                }
            }
        }
    }
}
