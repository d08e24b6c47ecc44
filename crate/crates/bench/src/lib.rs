//! Shared fixtures for the benchmarks.

use persmon::Location;

/// `n` well-spread sites in `[0, side]²` from the 2-D golden-ratio sequence.
pub fn spread_sites(n: usize, side: f64) -> Vec<Location> {
    const A1: f64 = 0.754_877_666_246_692_7;
    const A2: f64 = 0.569_840_290_998_053_3;
    (1..=n)
        .map(|i| {
            let i = i as f64;
            Location::new(side * (0.5 + A1 * i).fract(), side * (0.5 + A2 * i).fract())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sites_are_distinct_and_inside() {
        let s = spread_sites(64, 10.0);
        assert!(s
            .iter()
            .all(|p| (0.0..10.0).contains(&p.x) && (0.0..10.0).contains(&p.y)));
        for (i, a) in s.iter().enumerate() {
            assert!(s[i + 1..].iter().all(|b| a != b));
        }
    }
}
