#![allow(dead_code)]

pub mod criteria;

use num::{BigRational, Signed, ToPrimitive, Zero};

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

/// Pearson correlation with every sum computed exactly; only the final
/// square root is taken in floating point.
pub fn pearson_exact(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = BigRational::from_integer(x.len().into());
    let xs: Vec<BigRational> = x.iter().map(|&v| rational(v)).collect();
    let ys: Vec<BigRational> = y.iter().map(|&v| rational(v)).collect();
    let mx = xs.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = ys.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (a, b) in xs.iter().zip(&ys) {
        let (dx, dy) = (a - &mx, b - &my);
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    let r2 = (&sxy * &sxy) / (sxx * syy);
    let r = r2.to_f64().unwrap().sqrt();
    if sxy.is_negative() {
        -r
    } else {
        r
    }
}

fn permutations(n: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, p: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            visit(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, visit);
            p.swap(k, i);
        }
    }
    rec(0, &mut (0..n).collect(), visit);
}

/// Ranks (1-based) averaged over every strict ordering consistent with the
/// values, found by enumerating all `n!` rank assignments.
pub fn brute_force_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut sum = vec![0u64; n];
    let mut count = 0u64;
    permutations(n, &mut |rank| {
        let consistent = (0..n).all(|i| (0..n).all(|j| v[i] >= v[j] || rank[i] < rank[j]));
        if consistent {
            count += 1;
            for i in 0..n {
                sum[i] += rank[i] as u64 + 1;
            }
        }
    });
    sum.iter().map(|&s| s as f64 / count as f64).collect()
}

pub fn srocc_brute_force(x: &[f64], y: &[f64]) -> f64 {
    pearson_exact(&brute_force_ranks(x), &brute_force_ranks(y))
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Prints one aligned verdict line and returns whether it passed. The line
/// goes straight to the process stdout so it is visible without
/// `--nocapture`.
pub fn verdict(name: &str, passed: bool, detail: impl std::fmt::Display) -> bool {
    use std::io::Write;
    let line = format!("[{}] {name:<28} {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    passed
}
