//! One-dimensional quadrature rules on uniform grids.
//!
//! Periodic integrands use the plain rectangle sum, which is the trapezoid
//! rule on a circle and converges spectrally for smooth data. Non-periodic
//! node-centered data uses composite Simpson, falling back to a 3/8 block
//! at one end when the interval count is odd.

/// Rectangle/trapezoid rule on a periodic uniform grid with spacing `h`.
/// The last node must not repeat the first.
pub fn periodic_sum(values: &[f64], h: f64) -> f64 {
    values.iter().sum::<f64>() * h
}

/// Composite trapezoid rule on `values` sampled at spacing `h`, endpoints
/// included.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    assert!(n >= 2, "trapezoid needs at least two nodes");
    let interior: f64 = values[1..n - 1].iter().sum();
    h * (interior + 0.5 * (values[0] + values[n - 1]))
}

/// Composite Simpson rule on `values` sampled at spacing `h`, endpoints
/// included. Odd interval counts are closed with a 3/8 block at the end.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let weights = simpson_weights(values.len());
    h * values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>()
}

/// Node weights of the composite Simpson rule (unit spacing), handling both
/// parities of the node count. Panics below four nodes.
pub fn simpson_weights(n: usize) -> Vec<f64> {
    assert!(n >= 4, "simpson needs at least four nodes");
    let mut w = vec![0.0; n];
    let intervals = n - 1;
    // Number of intervals covered by plain Simpson pairs; the remainder
    // (zero or three) goes to the 3/8 block.
    let simpson_intervals = if intervals.is_multiple_of(2) { intervals } else { intervals - 3 };
    let mut i = 0;
    while i + 2 <= simpson_intervals {
        w[i] += 1.0 / 3.0;
        w[i + 1] += 4.0 / 3.0;
        w[i + 2] += 1.0 / 3.0;
        i += 2;
    }
    if simpson_intervals < intervals {
        let j = simpson_intervals;
        w[j] += 3.0 / 8.0;
        w[j + 1] += 9.0 / 8.0;
        w[j + 2] += 9.0 / 8.0;
        w[j + 3] += 3.0 / 8.0;
    }
    w
}

/// Cumulative trapezoid integral; output[i] is the integral from node 0 to
/// node i, so output[0] = 0.
pub fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for pair in values.windows(2) {
        acc += 0.5 * h * (pair[0] + pair[1]);
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn periodic_rule_is_spectral_on_smooth_data() {
        let n = 64;
        let h = 2.0 * PI / n as f64;
        let vals: Vec<f64> = (0..n).map(|i| (1.0 + (i as f64 * h).cos()).exp()).collect();
        // integral of exp(1 + cos q) over [0, 2pi) = 2 pi e I0(1)
        let exact = 2.0 * PI * 1.0_f64.exp() * 1.2660658777520084;
        assert!((periodic_sum(&vals, h) - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn simpson_exact_on_cubics_even_and_odd_node_counts() {
        for n in [9usize, 10, 21, 192] {
            let h = 1.0 / (n - 1) as f64;
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let x = i as f64 * h;
                    3.0 * x * x * x - 2.0 * x * x + x - 5.0
                })
                .collect();
            let exact = 0.75 - 2.0 / 3.0 + 0.5 - 5.0;
            assert!(
                (simpson(&vals, h) - exact).abs() < 1e-13,
                "n = {n}: got {}",
                simpson(&vals, h)
            );
        }
    }

    #[test]
    fn simpson_fourth_order_on_smooth_integrand() {
        let err = |n: usize| {
            let h = 1.0 / (n - 1) as f64;
            let vals: Vec<f64> = (0..n).map(|i| (i as f64 * h).exp()).collect();
            (simpson(&vals, h) - (1.0_f64.exp() - 1.0)).abs()
        };
        let ratio = err(33) / err(65);
        assert!(ratio > 12.0 && ratio < 20.0, "refinement ratio {ratio}");
    }

    #[test]
    fn cumulative_trapezoid_matches_total() {
        let n = 101;
        let h = 0.01;
        let vals: Vec<f64> = (0..n).map(|i| (i as f64 * h).sin()).collect();
        let cum = cumulative_trapezoid(&vals, h);
        assert!((cum[n - 1] - trapezoid(&vals, h)).abs() < 1e-14);
        assert_eq!(cum[0], 0.0);
    }
}
