use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Pyramid level; `Pk` has stride `2^k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    P3,
    P4,
    P5,
    P6,
    P7,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::P3, Level::P4, Level::P5, Level::P6, Level::P7];

    pub fn index(self) -> u32 {
        match self {
            Level::P3 => 3,
            Level::P4 => 4,
            Level::P5 => 5,
            Level::P6 => 6,
            Level::P7 => 7,
        }
    }

    pub fn stride(self) -> usize {
        1 << self.index()
    }

    /// Spatial extent of this level for an image side of `n` pixels.
    pub fn extent(self, n: usize) -> usize {
        n.div_ceil(self.stride())
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P3" => Ok(Level::P3),
            "P4" => Ok(Level::P4),
            "P5" => Ok(Level::P5),
            "P6" => Ok(Level::P6),
            "P7" => Ok(Level::P7),
            other => Err(format!("unknown pyramid level `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_double() {
        let s: Vec<usize> = Level::ALL.iter().map(|l| l.stride()).collect();
        assert_eq!(s, vec![8, 16, 32, 64, 128]);
        assert_eq!(Level::P6.extent(64), 1);
        assert_eq!(Level::P3.extent(100), 13);
        assert_eq!("p5".parse::<Level>().unwrap(), Level::P5);
    }
}
