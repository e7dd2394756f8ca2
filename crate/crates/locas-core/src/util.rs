//! Small shared utilities: seed derivation and number formatting.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 — used to derive independent sub-seeds from one run seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for a (seed, stream-tag) pair. All randomness in a run
/// derives from the single run seed through this function.
pub fn rng_for(seed: u64, tag: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)))
}

/// Format with 6 significant digits, `%g`-style: plain decimal for moderate
/// exponents, scientific otherwise. Deterministic across platforms.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        // Trim trailing zeros (and a dangling point) like %g does.
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.5e}", x);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig6_cases() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(5.545177444479562), "5.54518");
        assert_eq!(fmt_sig6(19.04), "19.04");
        assert_eq!(fmt_sig6(1024.0), "1024");
        assert_eq!(fmt_sig6(0.00012345678), "0.000123457");
        assert_eq!(fmt_sig6(123456789.0), "1.23457e8");
        assert_eq!(fmt_sig6(-2.5), "-2.5");
    }

    #[test]
    fn rng_for_is_deterministic() {
        use rand::RngCore;
        let mut a = rng_for(42, 1);
        let mut b = rng_for(42, 1);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = rng_for(42, 2);
        assert_ne!(a.next_u64(), c.next_u64());
    }
}
