//! Color filter array patterns.

use std::fmt;

/// One of the three color planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

/// 2×2 Bayer tile orders. Each value maps every (row parity, col parity)
/// pair to exactly one channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CfaPattern {
    RGGB,
    BGGR,
    GRBG,
    GBRG,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::RGGB,
        CfaPattern::BGGR,
        CfaPattern::GRBG,
        CfaPattern::GBRG,
    ];

    /// Channel at (row, col). Accepts out-of-range coordinates: the pattern
    /// continues by parity across image borders.
    pub fn color_at(self, row: i64, col: i64) -> Channel {
        let r = row.rem_euclid(2);
        let c = col.rem_euclid(2);
        let tile = match self {
            CfaPattern::RGGB => [[Channel::R, Channel::G], [Channel::G, Channel::B]],
            CfaPattern::BGGR => [[Channel::B, Channel::G], [Channel::G, Channel::R]],
            CfaPattern::GRBG => [[Channel::G, Channel::R], [Channel::B, Channel::G]],
            CfaPattern::GBRG => [[Channel::G, Channel::B], [Channel::R, Channel::G]],
        };
        tile[r as usize][c as usize]
    }

    /// Wire code used by the rawdesk container.
    pub fn code(self) -> u8 {
        match self {
            CfaPattern::RGGB => 0,
            CfaPattern::BGGR => 1,
            CfaPattern::GRBG => 2,
            CfaPattern::GBRG => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CfaPattern::RGGB),
            1 => Some(CfaPattern::BGGR),
            2 => Some(CfaPattern::GRBG),
            3 => Some(CfaPattern::GBRG),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "RGGB" => Some(CfaPattern::RGGB),
            "BGGR" => Some(CfaPattern::BGGR),
            "GRBG" => Some(CfaPattern::GRBG),
            "GBRG" => Some(CfaPattern::GBRG),
            _ => None,
        }
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CfaPattern::RGGB => "RGGB",
            CfaPattern::BGGR => "BGGR",
            CfaPattern::GRBG => "GRBG",
            CfaPattern::GBRG => "GBRG",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_parity_pair_maps_to_one_channel() {
        for p in CfaPattern::ALL {
            let mut counts = [0usize; 3];
            for r in 0..2 {
                for c in 0..2 {
                    counts[p.color_at(r, c) as usize] += 1;
                }
            }
            assert_eq!(counts[Channel::R as usize], 1);
            assert_eq!(counts[Channel::G as usize], 2);
            assert_eq!(counts[Channel::B as usize], 1);
        }
    }

    #[test]
    fn pattern_continues_by_parity_outside_bounds() {
        let p = CfaPattern::RGGB;
        assert_eq!(p.color_at(-1, 0), p.color_at(1, 0));
        assert_eq!(p.color_at(0, -1), p.color_at(0, 1));
        assert_eq!(p.color_at(-2, -2), p.color_at(0, 0));
    }

    #[test]
    fn code_round_trip() {
        for p in CfaPattern::ALL {
            assert_eq!(CfaPattern::from_code(p.code()), Some(p));
        }
        assert_eq!(CfaPattern::from_code(4), None);
    }
}
