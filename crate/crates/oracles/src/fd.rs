/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` at the given coordinates.
pub fn finite_difference_grad<F>(f: F, params: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut theta = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = f(&theta);
            theta[i] = orig - h;
            let down = f(&theta);
            theta[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], &[0, 1], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn linear_exact_for_any_step() {
        for h in [1e-3, 0.5, 4.0] {
            let g = finite_difference_grad(|t| 3.0 * t[0] - 0.5 * t[1], &[0.25, -1.0], &[0, 1], h);
            assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
        }
    }
}
