use crate::numerics::{NumericsError, Scalar, Session, Tensor, Var};

use super::{ScoreBatch, ScoringError};

/// Guard added inside each square root of the PLCC loss.
pub const VARIANCE_EPS: f64 = 1e-12;

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, ScoringError> {
    let (xc, yc) = (centered(x), centered(y));
    let n = x.len() as f64;
    let (sxx, syy) = (dot(&xc, &xc), dot(&yc, &yc));
    if sxx / n <= VARIANCE_EPS || syy / n <= VARIANCE_EPS {
        return Err(ScoringError::DegenerateVariance);
    }
    Ok((dot(&xc, &yc) / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation of predictions against ground truth.
pub fn plcc(batch: &ScoreBatch) -> Result<f64, ScoringError> {
    pearson(&batch.pred, &batch.gt)
}

/// 1-based ranks; tied values share the mean of their rank range.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // Positions i..j hold ranks i+1..=j.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn srocc(batch: &ScoreBatch) -> Result<f64, ScoringError> {
    pearson(&average_ranks(&batch.pred), &average_ranks(&batch.gt))
}

/// `1 − PLCC` with `VARIANCE_EPS` inside each square root. Constant
/// predictions give a loss of 1 instead of an error.
pub fn plcc_loss(batch: &ScoreBatch) -> f64 {
    let (xc, yc) = (centered(&batch.pred), centered(&batch.gt));
    let den = (dot(&xc, &xc) + VARIANCE_EPS).sqrt() * (dot(&yc, &yc) + VARIANCE_EPS).sqrt();
    1.0 - dot(&xc, &yc) / den
}

/// Differentiable `1 − PLCC` of `pred` (`N` or `N×1`) against constants `gt`.
pub fn plcc_loss_graph<T: Scalar>(s: &mut Session<T>, pred: Var, gt: &[f64]) -> Result<Var, NumericsError> {
    let n = s.graph.value(pred).numel();
    if n != gt.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "plcc_loss",
            lhs: s.graph.shape(pred).to_vec(),
            rhs: vec![gt.len()],
        });
    }
    if n < 2 {
        return Err(NumericsError::DegenerateAxis { op: "plcc_loss", len: n });
    }
    let x = s.graph.reshape(pred, &[n])?;
    let mean = s.graph.mean_axes(x, &[0])?;
    let xc = s.graph.sub(x, mean)?;
    let yc = centered(gt);
    let syy = dot(&yc, &yc);
    let yv = s.graph.constant(Tensor::from_vec(yc.iter().map(|&v| T::of(v)).collect()));
    let xy = s.graph.mul(xc, yv)?;
    let num = s.graph.sum_axes(xy, &[0])?;
    let xx = s.graph.mul(xc, xc)?;
    let sxx = s.graph.sum_axes(xx, &[0])?;
    let sxx = s.graph.add_scalar(sxx, T::of(VARIANCE_EPS))?;
    let inv = s.graph.pow(sxx, T::of(-0.5))?;
    let r = s.graph.mul(num, inv)?;
    let r = s.graph.scale(r, T::of(-1.0 / (syy + VARIANCE_EPS).sqrt()))?;
    s.graph.add_scalar(r, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn batch(p: &[f64], g: &[f64]) -> ScoreBatch {
        ScoreBatch::new(p.to_vec(), g.to_vec()).unwrap()
    }

    #[test]
    fn plcc_basics() {
        let x = [0.1, 0.5, 0.2, 0.9];
        assert!((plcc(&batch(&x, &x)).unwrap() - 1.0).abs() < 1e-15);
        let up: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -0.5 * v + 4.0).collect();
        assert!((plcc(&batch(&x, &up)).unwrap() - 1.0).abs() < 1e-12);
        assert!((plcc(&batch(&x, &down)).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(plcc(&batch(&[1.0, 1.0], &[1.0, 2.0])), Err(ScoringError::DegenerateVariance)));
    }

    #[test]
    fn srocc_basics() {
        assert!((srocc(&batch(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!((srocc(&batch(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_share_the_mean_rank() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0, 5.0]), vec![4.0, 1.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn srocc_equals_plcc_on_ranks() {
        let p = [3.0, 1.0, 4.0, 2.0, 5.0];
        let g = [2.0, 5.0, 1.0, 3.0, 4.0];
        let b = batch(&p, &g);
        assert_eq!(srocc(&b).unwrap(), plcc(&b).unwrap());
    }

    #[test]
    fn loss_endpoints() {
        let x = [0.0, 1.0, 2.0, 5.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(plcc_loss(&batch(&x, &x)).abs() < 1e-12);
        assert!((plcc_loss(&batch(&x, &neg)) - 2.0).abs() < 1e-12);
        assert_eq!(plcc_loss(&batch(&[0.3; 4], &x)), 1.0);
    }

    #[test]
    fn graph_loss_matches_eager() {
        let p = [0.2, 0.7, 0.1, 0.4, 0.9];
        let g = [1.0, 4.0, 1.5, 2.5, 3.0];
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, true);
        let pv = s.graph.input(Tensor::new(vec![5, 1], p.to_vec()).unwrap());
        let l = plcc_loss_graph(&mut s, pv, &g).unwrap();
        assert!((s.graph.value(l).item() - plcc_loss(&batch(&p, &g))).abs() < 1e-14);
        assert!(s.graph.backward(l).is_ok());
    }
}
