//! Single-layer softmax classifier over embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `K x d` weights plus a length-`K` bias; probabilities via row softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearParams {
    /// Zero initialization (the objective is convex; start is immaterial
    /// and zeros keep runs deterministic).
    pub fn zeros(d: usize, k: usize) -> Self {
        Self { w: Matrix::zeros(k, d), b: vec![0.0; k] }
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn k(&self) -> usize {
        self.w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        x.linear(&self.w, &self.b)
    }

    /// Row-wise stable softmax of the logits; rows sum to 1 within 1e-9.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut logits = self.logits(x)?;
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(logits)
    }

    /// Argmax class per row; ties resolve to the lowest class id.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<u32>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i)) as u32).collect())
    }

    /// Mean cross-entropy and its flat gradient `[W row-major | b]`.
    pub fn cross_entropy_and_grad(&self, x: &Matrix, y: &[u32]) -> Result<(f64, Vec<f64>)> {
        let n = x.rows();
        if n == 0 || y.len() != n {
            return Err(Error::Shape(format!(
                "cross entropy: {n} rows with {} labels",
                y.len()
            )));
        }
        let k = self.k();
        let d = self.d();
        let logits = self.logits(x)?;
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; k * d + k];
        let (dw, db) = grad.split_at_mut(k * d);
        for i in 0..n {
            let yi = y[i] as usize;
            if yi >= k {
                return Err(Error::Data(format!("label {yi} out of range for {k} classes")));
            }
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += (lse - row[yi]) * inv_n;
            let xi = x.row(i);
            for c in 0..k {
                let p = (row[c] - lse).exp();
                let delta = inv_n * (p - f64::from(c == yi));
                if delta != 0.0 {
                    for (wv, &xv) in dw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                        *wv += delta * xv;
                    }
                    db[c] += delta;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("cross entropy non-finite".into()));
        }
        Ok((loss, grad))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w.data().to_vec();
        out.extend_from_slice(&self.b);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "linear set_from_flat: expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let wn = self.w.rows() * self.w.cols();
        self.w.data_mut().copy_from_slice(&flat[..wn]);
        self.b.copy_from_slice(&flat[wn..]);
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{gaussian_sample, Purpose, RngStream, StreamId};

    #[test]
    fn uniform_when_untrained() {
        let p = LinearParams::zeros(4, 3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
        let probs = p.predict_proba(&x).unwrap();
        for &v in probs.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Ties resolve to the lowest class id.
        assert_eq!(p.predict(&x).unwrap(), vec![0]);
    }

    #[test]
    fn bias_ten_zero_softmax() {
        let mut p = LinearParams::zeros(2, 2);
        p.b = vec![10.0, 0.0];
        let x = Matrix::zeros(1, 2);
        let probs = p.predict_proba(&x).unwrap();
        assert!((probs.get(0, 0) - 0.99995).abs() < 1e-5, "{}", probs.get(0, 0));
    }

    #[test]
    fn shift_invariance_and_normalization() {
        let mut rng = RngStream::new(1, StreamId::new(0, 0, Purpose::Init));
        let mut p = LinearParams::zeros(3, 4);
        p.w = gaussian_sample(&mut rng, 4, 3);
        p.b = vec![0.1, -0.2, 0.3, 0.0];
        let x = gaussian_sample(&mut rng, 6, 3);
        let probs = p.predict_proba(&x).unwrap();
        for i in 0..6 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let mut shifted = p.clone();
        for b in shifted.b.iter_mut() {
            *b += 7.5;
        }
        let probs2 = shifted.predict_proba(&x).unwrap();
        for (a, b) in probs.data().iter().zip(probs2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.predict(&x).unwrap(), shifted.predict(&x).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(2, StreamId::new(0, 0, Purpose::Init));
        let mut p = LinearParams::zeros(3, 3);
        p.w = gaussian_sample(&mut rng, 3, 3);
        let x = gaussian_sample(&mut rng, 5, 3);
        let y = [0, 2, 1, 1, 0];
        let (_, grad) = p.cross_entropy_and_grad(&x, &y).unwrap();
        let flat = p.flatten();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut probe = p.clone();
            let mut fp = flat.clone();
            fp[k] += h;
            probe.set_from_flat(&fp).unwrap();
            let (lp, _) = probe.cross_entropy_and_grad(&x, &y).unwrap();
            fp[k] -= 2.0 * h;
            probe.set_from_flat(&fp).unwrap();
            let (lm, _) = probe.cross_entropy_and_grad(&x, &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}");
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let p = LinearParams::zeros(2, 2);
        let x = Matrix::zeros(1, 2);
        assert!(p.cross_entropy_and_grad(&x, &[2]).is_err());
    }
}
