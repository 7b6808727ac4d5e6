use crate::error::{Error, Result};

/// Orthogonal polynomial contrast matrix for `num_levels` equally spaced
/// ordered levels: `num_levels × (num_levels - 1)`, one row per level.
///
/// Columns are the orthonormalized polynomial trends of degree 1, 2, ...
/// (the constant trend dropped), each with a positive leading coefficient, so
/// the linear column increases with the level.
pub fn orthogonal_poly_contrasts(num_levels: usize) -> Result<Vec<Vec<f64>>> {
    if num_levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "orthogonal polynomial coding needs at least 2 levels, got {num_levels}"
        )));
    }
    let n = num_levels;
    let mean = (n as f64 + 1.0) / 2.0;
    let x: Vec<f64> = (1..=n).map(|l| l as f64 - mean).collect();
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    // Gram-Schmidt over the polynomial sequence, generating degree d+1 as
    // x * q_d (same span as the Vandermonde columns, better conditioned).
    for _ in 1..n {
        let prev = basis.last().expect("non-empty");
        let mut v: Vec<f64> = prev.iter().zip(&x).map(|(q, x)| q * x).collect();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    Ok((0..n)
        .map(|row| basis[1..].iter().map(|col| col[row]).collect())
        .collect())
}

/// Contrast row for one level (1-based).
pub fn orthogonal_poly_coding(level: usize, num_levels: usize) -> Result<Vec<f64>> {
    if level < 1 || level > num_levels {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside 1..={num_levels}"
        )));
    }
    let mut m = orthogonal_poly_contrasts(num_levels)?;
    Ok(m.swap_remove(level - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_levels() {
        let s2 = 2f64.sqrt();
        let s6 = 6f64.sqrt();
        let m = orthogonal_poly_contrasts(3).unwrap();
        let linear: Vec<f64> = m.iter().map(|r| r[0]).collect();
        let quad: Vec<f64> = m.iter().map(|r| r[1]).collect();
        for (a, b) in linear.iter().zip([-1.0 / s2, 0.0, 1.0 / s2]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in quad.iter().zip([1.0 / s6, -2.0 / s6, 1.0 / s6]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(orthogonal_poly_coding(2, 3).unwrap().len(), 2);
    }

    #[test]
    fn orthonormal_and_orthogonal_to_ones() {
        for n in 2..=20 {
            let m = orthogonal_poly_contrasts(n).unwrap();
            let k = n - 1;
            for a in 0..k {
                let ones: f64 = m.iter().map(|r| r[a]).sum();
                assert!(ones.abs() < 1e-10, "n={n}");
                for b in 0..k {
                    let dot: f64 = m.iter().map(|r| r[a] * r[b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "n={n} a={a} b={b}: {dot}");
                }
            }
        }
    }

    #[test]
    fn out_of_range_level() {
        assert!(orthogonal_poly_coding(0, 3).is_err());
        assert!(orthogonal_poly_coding(4, 3).is_err());
        assert!(orthogonal_poly_contrasts(1).is_err());
    }
}
