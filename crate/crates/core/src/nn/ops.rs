use super::Scalar;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy with logits for one element, returning (loss, dloss/dlogit).
pub fn bce_with_logits<T: Scalar>(logit: T, label: T) -> (T, T) {
    // label * softplus(-z) + (1 - label) * softplus(z)
    let loss = label * softplus(-logit) + (T::one() - label) * softplus(logit);
    (loss, sigmoid(logit) - label)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Parameter-free layer normalisation over rows. Returns (normalised, 1/std per row).
pub fn normalize_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::lit(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

/// Backward of [`normalize_rows`] given the normalised output and `dy`.
pub fn normalize_rows_backward<T: Scalar>(xhat: &[T], rstd: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ((xh, g), (dxr, &r)) in xhat.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols).zip(rstd)) {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gi), &xi) in dxr.iter_mut().zip(g).zip(xh) {
            *d = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        for &(z, y) in &[(0.3f64, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
            let h = 1e-6;
            let fd = (bce_with_logits(z + h, y).0 - bce_with_logits(z - h, y).0) / (2.0 * h);
            assert!((fd - bce_with_logits(z, y).1).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0];
        let p = softmax_rows(&x, 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_rows(&x, 3);
        for (a, b) in lp.iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = [0.3f64, -1.2, 2.0, 0.7, 0.1, 0.5, -0.4, 1.9];
        let w = [0.5f64, -1.0, 0.25, 2.0, 1.5, -0.3, 0.7, 0.2];
        let f = |x: &[f64]| -> f64 {
            let (y, _) = normalize_rows(x, 4, 1e-5);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (y, r) = normalize_rows(&x, 4, 1e-5);
        let dx = normalize_rows_backward(&y, &r, &w, 4);
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
