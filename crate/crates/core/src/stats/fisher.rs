//! Fisher's exact test for 2×2 tables.

/// Tables up to this total are evaluated in exact integer arithmetic.
const EXACT_MAX_N: u64 = 120;

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Two-sided p-value for the table `[[a, b], [c, d]]`: the total
/// hypergeometric probability of tables (same margins) no more likely than
/// the observed one. All-zero tables give `1.0`.
pub fn fisher_exact_2x2(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let n = a + b + c + d;
    if n == 0 {
        return 1.0;
    }
    let r1 = a + b;
    let c1 = a + c;
    let lo = r1.saturating_sub(n - c1);
    let hi = r1.min(c1);
    if n <= EXACT_MAX_N {
        let weight = |x: u64| binomial(c1, x) * binomial(n - c1, r1 - x);
        let observed = weight(a);
        let tail: u128 = (lo..=hi).map(weight).filter(|&w| w <= observed).sum();
        return (tail as f64 / binomial(n, r1) as f64).min(1.0);
    }
    fisher_log(a, n, r1, c1, lo, hi)
}

fn fisher_log(a: u64, n: u64, r1: u64, c1: u64, lo: u64, hi: u64) -> f64 {
    let (n, r1, c1) = (n as usize, r1 as usize, c1 as usize);
    let lf = ln_factorials(n);
    let ln_p = |x: usize| -> f64 {
        lf[c1] - lf[x] - lf[c1 - x] + lf[n - c1] - lf[r1 - x] - lf[n - c1 - (r1 - x)] - (lf[n] - lf[r1] - lf[n - r1])
    };
    let cutoff = ln_p(a as usize) + 1e-7;
    let p: f64 = (lo as usize..=hi as usize).map(ln_p).filter(|&lp| lp <= cutoff).map(f64::exp).sum();
    p.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_five() {
        assert!((fisher_exact_2x2(5, 0, 0, 5) - 2.0 / 252.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_is_one() {
        assert_eq!(fisher_exact_2x2(2, 2, 2, 2), 1.0);
        assert_eq!(fisher_exact_2x2(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn log_path_agrees_with_exact_path() {
        for &(a, b, c, d) in &[(40u64, 20, 20, 40), (3, 9, 12, 2), (30, 30, 29, 31), (0, 7, 50, 20)] {
            let (n, r1, c1) = (a + b + c + d, a + b, a + c);
            let lo = r1.saturating_sub(n - c1);
            let logp = fisher_log(a, n, r1, c1, lo, r1.min(c1));
            let exact = fisher_exact_2x2(a, b, c, d);
            assert!((logp - exact).abs() <= 1e-9 * exact.max(1e-300), "{a} {b} {c} {d}: {logp} vs {exact}");
        }
    }

    #[test]
    fn strong_association_in_large_table() {
        assert!(fisher_exact_2x2(500, 0, 0, 500) < 1e-100);
        assert!((fisher_exact_2x2(250, 250, 250, 250) - 1.0).abs() < 1e-9);
    }
}
