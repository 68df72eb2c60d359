use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AreaRecord;

/// How the two views of a positive pair are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Both views come from the same image.
    SameView,
    /// Views are drawn independently and uniformly from the area's sequence.
    Temporal,
}

/// Draw 1-based view indices `(t1, t2)`.
///
/// Single-view areas consume no randomness, so both modes advance the rng
/// identically on them.
pub fn sample_temporal_pair<R: Rng + ?Sized>(
    area: &AreaRecord,
    rng: &mut R,
    mode: PairingMode,
) -> (usize, usize) {
    let n = area.n_views();
    if n <= 1 {
        return (1, 1);
    }
    let t1 = rng.random_range(1..=n);
    match mode {
        PairingMode::SameView => (t1, t1),
        PairingMode::Temporal => (t1, rng.random_range(1..=n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeoSample, ImageGeometry};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn area(n: usize) -> AreaRecord {
        let g = ImageGeometry::new(1, 1, 1);
        AreaRecord {
            area_id: "a".into(),
            lat: 0.0,
            lon: 0.0,
            label: None,
            views: (1..=n)
                .map(|t| GeoSample {
                    area_id: "a".into(),
                    view_index: t,
                    timestamp: String::new(),
                    image: Array3::zeros(g.shape()),
                    lat: 0.0,
                    lon: 0.0,
                    label: None,
                })
                .collect(),
        }
    }

    #[test]
    fn single_view_is_always_one_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(
                sample_temporal_pair(&area(1), &mut rng, PairingMode::Temporal),
                (1, 1)
            );
        }
    }

    #[test]
    fn same_view_pairs_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = area(5);
        for _ in 0..200 {
            let (t1, t2) = sample_temporal_pair(&a, &mut rng, PairingMode::SameView);
            assert_eq!(t1, t2);
            assert!((1..=5).contains(&t1));
        }
    }

    #[test]
    fn two_views_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = area(2);
        let draws = 10_000;
        let ones = (0..draws)
            .filter(|_| sample_temporal_pair(&a, &mut rng, PairingMode::Temporal).1 == 1)
            .count() as f64;
        // mean 5000, sd sqrt(10000 * 0.25) = 50
        assert!(
            (ones - 5000.0).abs() <= 3.0 * 50.0,
            "t2 = 1 drawn {ones} times"
        );
    }
}
