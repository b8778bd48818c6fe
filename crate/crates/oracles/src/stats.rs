/// Pearson chi-square statistic of observed counts against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper 0.999 quantile of χ² with `dof` degrees of freedom (Wilson–Hilferty).
pub fn chi_square_critical_999(dof: usize) -> f64 {
    let k = dof as f64;
    let z = 3.090_232_306_167_813;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

/// Standard deviation of a binomial proportion estimate.
pub fn binomial_sd(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
