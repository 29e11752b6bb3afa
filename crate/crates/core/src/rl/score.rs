use crate::error::{Error, Result};

/// `100 · (raw − random) / (expert − random)`, unclamped.
pub fn normalized_score(raw: f64, random: f64, expert: f64) -> Result<f64> {
    if expert == random {
        return Err(Error::invalid("expert and random baselines coincide"));
    }
    Ok(100.0 * (raw - random) / (expert - random))
}

/// Raw returns and baselines for the four reference Atari games.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GameScore {
    pub game: &'static str,
    pub raw: f64,
    pub random: f64,
    pub expert: f64,
    /// Normalized score as reported, one decimal.
    pub reported: f64,
}

pub const ATARI_SCORES: [GameScore; 4] = [
    GameScore {
        game: "Breakout",
        raw: 70.6,
        random: 1.7,
        expert: 30.5,
        reported: 239.2,
    },
    GameScore {
        game: "Qbert",
        raw: 5780.0,
        random: 163.9,
        expert: 13455.0,
        reported: 42.3,
    },
    GameScore {
        game: "Pong",
        raw: 1.6,
        random: -20.7,
        expert: 14.6,
        reported: 63.2,
    },
    GameScore {
        game: "Seaquest",
        raw: 1006.0,
        random: 68.4,
        expert: 42054.7,
        reported: 2.2,
    },
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_games() {
        for g in ATARI_SCORES {
            let s = normalized_score(g.raw, g.random, g.expert).unwrap();
            assert!((s - g.reported).abs() <= 0.05, "{} {s}", g.game);
        }
    }

    #[test]
    fn degenerate_baselines() {
        assert_eq!(normalized_score(3.0, 3.0, 9.0).unwrap(), 0.0);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn affine_invariance(
            raw in -100.0f64..100.0,
            random in -100.0f64..100.0,
            gap in 0.5f64..100.0,
            c in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
            d in -50.0f64..50.0,
        ) {
            let expert = random + gap;
            let a = normalized_score(raw, random, expert).unwrap();
            let b = normalized_score(c * raw + d, c * random + d, c * expert + d).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }
}
