use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::{kernels, l2, linf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => l2(v),
            Norm::Linf => linf(v),
        }
    }

    pub fn dist(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L2 => kernels::sq_dist(a, b).sqrt(),
            Norm::Linf => a
                .iter()
                .zip(b)
                .fold(0.0, |m: f64, (x, y)| m.max((x - y).abs())),
        }
    }

    /// Distance between two distinct one-hot vectors.
    pub fn one_hot_distance(self) -> f64 {
        match self {
            Norm::L2 => std::f64::consts::SQRT_2,
            Norm::Linf => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::invalid(format!("unknown norm `{other}`"))),
        }
    }
}
