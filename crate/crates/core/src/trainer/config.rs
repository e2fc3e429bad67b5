use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Mean,
    Lgpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    Early,
    Late,
    EarlyLate,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::None, Fusion::Early, Fusion::Late, Fusion::EarlyLate];

    pub fn early(self) -> bool {
        matches!(self, Fusion::Early | Fusion::EarlyLate)
    }

    pub fn late(self) -> bool {
        matches!(self, Fusion::Late | Fusion::EarlyLate)
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Mean => "mean",
            Readout::Lgpt => "lgpt",
        })
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Early => "early",
            Fusion::Late => "late",
            Fusion::EarlyLate => "early_late",
        })
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::Mean),
            "lgpt" => Ok(Readout::Lgpt),
            _ => Err(Error::Config(format!("unknown readout {s:?}"))),
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            "early_late" | "early+late" => Ok(Fusion::EarlyLate),
            _ => Err(Error::Config(format!("unknown fusion {s:?}"))),
        }
    }
}

/// Everything that determines a training run besides data and LM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub readout: Readout,
    pub fusion: Fusion,
    pub n_tokens: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Encoder width.
    pub d: usize,
    /// LM embedding width; must match the LM.
    pub d_llm: usize,
    pub heads: usize,
    pub l_query: usize,
    pub l_graph: usize,
    pub l_pool: usize,
    /// Whether pooling reads the query node when one is attached.
    pub pool_include_query: bool,
    /// Validation examples scored per evaluation; 0 means all.
    pub eval_limit: usize,
    /// Decoding budget in tokens.
    pub max_answer_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::AttributeLookup,
            readout: Readout::Lgpt,
            fusion: Fusion::Early,
            n_tokens: 8,
            lr: 1e-4,
            max_steps: 5000,
            eval_every: 500,
            seed: 0,
            d: 64,
            d_llm: 64,
            heads: 4,
            l_query: 1,
            l_graph: 4,
            l_pool: 1,
            pool_include_query: true,
            eval_limit: 0,
            max_answer_tokens: 12,
        }
    }
}

impl RunConfig {
    /// Mean pooling always yields a single prompt row.
    pub fn normalized(mut self) -> Self {
        if self.readout == Readout::Mean {
            self.n_tokens = 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.readout == Readout::Lgpt && self.n_tokens == 0 {
            return fail("n_tokens must be at least 1".into());
        }
        if self.readout == Readout::Mean && self.n_tokens != 1 {
            return fail("mean readout produces exactly one prompt token".into());
        }
        if self.readout == Readout::Lgpt && self.l_pool == 0 {
            return fail("lgpt readout needs at least one pooling layer".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if self.d < crate::data::MIN_TEXT_DIM {
            return fail(format!("d must be at least {}", crate::data::MIN_TEXT_DIM));
        }
        if self.d_llm == 0 {
            return fail("d_llm must be positive".into());
        }
        if self.max_answer_tokens == 0 {
            return fail("max_answer_tokens must be positive".into());
        }
        Ok(())
    }

    /// Arm label without the seed, e.g. `lgpt/early/n=8`.
    pub fn arm(&self) -> String {
        format!("{}/{}/n={}", self.readout, self.fusion, self.n_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_forces_one_token() {
        let c = RunConfig {
            readout: Readout::Mean,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = c.normalized();
        assert_eq!(c.n_tokens, 1);
        c.validate().unwrap();
    }

    #[test]
    fn bad_values_rejected() {
        for c in [
            RunConfig {
                lr: 0.0,
                ..RunConfig::default()
            },
            RunConfig {
                heads: 3,
                ..RunConfig::default()
            },
            RunConfig {
                n_tokens: 0,
                ..RunConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn json_round_trip_and_partial_configs() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig =
            serde_json::from_str(r#"{"readout":"mean","fusion":"early_late","seed":3}"#).unwrap();
        assert_eq!(partial.fusion, Fusion::EarlyLate);
        assert_eq!(partial.seed, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }
}
