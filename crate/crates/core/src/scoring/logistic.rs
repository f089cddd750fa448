use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::{ScoreBatch, ScoringError};

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-8;

/// Four-parameter monotone logistic
/// `f(x) = b2 + (b1 − b2) / (1 + exp(−(x − b3) / |b4|))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl LogisticParams {
    fn from_vec(v: &Vector4<f64>) -> Self {
        Self {
            b1: v[0],
            b2: v[1],
            b3: v[2],
            b4: v[3],
        }
    }

    fn to_vec(self) -> Vector4<f64> {
        Vector4::new(self.b1, self.b2, self.b3, self.b4)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.b2 + (self.b1 - self.b2) * sigmoid((x - self.b3) / self.b4.abs())
    }

    /// Value and gradient with respect to `(b1, b2, b3, b4)`.
    fn eval_grad(&self, x: f64) -> (f64, Vector4<f64>) {
        let s4 = self.b4.abs();
        let z = (x - self.b3) / s4;
        let sg = sigmoid(z);
        let d = self.b1 - self.b2;
        let ds = sg * (1.0 - sg);
        let sign = if self.b4 < 0.0 { -1.0 } else { 1.0 };
        let grad = Vector4::new(sg, 1.0 - sg, -d * ds / s4, -d * ds * z / s4 * sign);
        (self.b2 + d * sg, grad)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: LogisticParams,
    pub iterations: usize,
    /// Sum of squared residuals at the initial guess.
    pub initial_sse: f64,
    pub sse: f64,
}

impl LogisticFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.params.eval(x)
    }

    /// `points` samples of the fitted curve over `[lo, hi]`.
    pub fn curve(&self, lo: f64, hi: f64, points: usize) -> Vec<(f64, f64)> {
        let steps = points.max(2) - 1;
        (0..=steps)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / steps as f64;
                (x, self.predict(x))
            })
            .collect()
    }
}

fn sse(p: &LogisticParams, x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| (p.eval(a) - b).powi(2)).sum()
}

fn spread(v: &[f64]) -> (f64, f64, f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    (lo, hi, mean, sd)
}

/// Least-squares fit of predictions to MOS by damped Gauss-Newton
/// (Levenberg-Marquardt), starting from `b1 = max(gt)`, `b2 = min(gt)`,
/// `b3 = mean(pred)`, `b4 = sd(pred)`.
pub fn logistic_fit(batch: &ScoreBatch) -> Result<LogisticFit, ScoringError> {
    let (x, y) = (&batch.pred, &batch.gt);
    let (ylo, yhi, _, ysd) = spread(y);
    let (_, _, xmean, xsd) = spread(x);
    if ysd <= 1e-12 || xsd <= 1e-12 {
        return Err(ScoringError::DegenerateVariance);
    }
    let mut p = LogisticParams {
        b1: yhi,
        b2: ylo,
        b3: xmean,
        b4: xsd,
    };
    let initial_sse = sse(&p, x, y);
    let mut cur = initial_sse;
    let mut lambda = 1e-3;
    for iter in 1..=MAX_ITERATIONS {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&a, &b) in x.iter().zip(y) {
            let (f, g) = p.eval_grad(a);
            jtj += g * g.transpose();
            jtr += g * (f - b);
        }
        if jtr.amax() <= TOLERANCE * (1.0 + cur) {
            return Ok(finish(p, iter, initial_sse, cur));
        }
        let mut damped = jtj;
        for i in 0..4 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let Some(step) = damped.lu().solve(&(-jtr)) else {
            lambda *= 10.0;
            continue;
        };
        let cand = LogisticParams::from_vec(&(p.to_vec() + step));
        let next = sse(&cand, x, y);
        if next.is_finite() && next <= cur {
            let small_step = step.norm() <= TOLERANCE * (p.to_vec().norm() + TOLERANCE);
            let small_gain = cur - next <= TOLERANCE * (cur + TOLERANCE);
            p = cand;
            cur = next;
            lambda = (lambda / 10.0).max(1e-12);
            if small_step || small_gain {
                return Ok(finish(p, iter, initial_sse, cur));
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent direction left at machine precision.
                return Ok(finish(p, iter, initial_sse, cur));
            }
        }
    }
    Err(ScoringError::NoConvergence {
        iterations: MAX_ITERATIONS,
        sse: cur,
    })
}

fn finish(mut p: LogisticParams, iterations: usize, initial_sse: f64, sse: f64) -> LogisticFit {
    p.b4 = p.b4.abs();
    LogisticFit {
        params: p,
        iterations,
        initial_sse,
        sse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_curve() {
        let truth = LogisticParams {
            b1: 4.6,
            b2: 1.2,
            b3: 0.45,
            b4: 0.12,
        };
        let x: Vec<f64> = (0..60).map(|i| 0.05 + 0.85 * i as f64 / 59.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
        let fit = logistic_fit(&ScoreBatch::new(x, y).unwrap()).unwrap();
        let got = fit.params;
        for (a, b) in [(got.b1, truth.b1), (got.b2, truth.b2), (got.b3, truth.b3), (got.b4, truth.b4)] {
            assert!((a - b).abs() < 1e-4, "{got:?}");
        }
        assert!(fit.sse <= fit.initial_sse);
    }

    #[test]
    fn constant_gt_is_degenerate() {
        let b = ScoreBatch::new(vec![0.1, 0.2, 0.3], vec![2.0; 3]).unwrap();
        assert!(matches!(logistic_fit(&b), Err(ScoringError::DegenerateVariance)));
    }

    #[test]
    fn gradient_matches_differences() {
        let p = LogisticParams {
            b1: 3.0,
            b2: -1.0,
            b3: 0.2,
            b4: -0.7,
        };
        let (_, g) = p.eval_grad(0.9);
        let h = 1e-6;
        for i in 0..4 {
            let mut up = p.to_vec();
            up[i] += h;
            let mut dn = p.to_vec();
            dn[i] -= h;
            let fd = (LogisticParams::from_vec(&up).eval(0.9) - LogisticParams::from_vec(&dn).eval(0.9)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
