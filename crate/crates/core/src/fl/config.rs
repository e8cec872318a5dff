use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedbn")]
    FedBn,
    #[serde(rename = "fedavg_dp")]
    FedAvgDp,
    Centralized,
    LocalOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedAvg,
        Method::FedProx,
        Method::FedBn,
        Method::FedAvgDp,
        Method::Centralized,
        Method::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedBn => "fedbn",
            Method::FedAvgDp => "fedavg_dp",
            Method::Centralized => "centralized",
            Method::LocalOnly => "local_only",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(
            self,
            Method::FedAvg | Method::FedProx | Method::FedBn | Method::FedAvgDp
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Step decay of the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f32,
    pub at_round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub lr_decay: LrDecay,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// FedProx coefficient μ; only used by [`Method::FedProx`].
    pub prox_mu: f32,
    /// FedBN: reset local running statistics at the start of every round
    /// instead of carrying them over.
    pub bn_reset: bool,
    /// Route federated updates through pairwise-masked aggregation.
    pub secure_agg: bool,
    /// Caps optimizer steps per local run (test hook).
    #[serde(skip)]
    pub max_local_steps: Option<usize>,
}

impl TrainConfig {
    /// 100 rounds, decay at round 70.
    pub fn paper() -> Self {
        Self {
            lr: 0.01,
            lr_decay: LrDecay {
                factor: 0.1,
                at_round: 70,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            local_epochs: 1,
            rounds: 100,
            prox_mu: 0.01,
            bn_reset: false,
            secure_agg: true,
            max_local_steps: None,
        }
    }

    /// Same optimizer, 25 rounds with the decay moved to round 18.
    pub fn desk() -> Self {
        Self {
            rounds: 25,
            lr_decay: LrDecay {
                factor: 0.1,
                at_round: 18,
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("lr_decay.factor", self.lr_decay.factor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("prox_mu", self.prox_mu),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect for 0-based `round`.
    pub fn lr_at(&self, round: usize) -> f32 {
        if round >= self.lr_decay.at_round {
            self.lr * self.lr_decay.factor
        } else {
            self.lr
        }
    }

    /// μ actually applied for `method`.
    pub fn mu_for(&self, method: Method) -> f32 {
        if method == Method::FedProx {
            self.prox_mu
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_and_presets() {
        let d = TrainConfig::desk();
        assert_eq!(d.rounds, 25);
        assert_eq!(d.lr_at(17), 0.01);
        assert!((d.lr_at(18) - 0.001).abs() < 1e-9);
        assert_eq!(TrainConfig::paper().lr_decay.at_round, 70);
        assert_eq!(d.mu_for(Method::FedAvg), 0.0);
        assert_eq!(d.mu_for(Method::FedProx), 0.01);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fedsgd".parse::<Method>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.lr = -1.0;
        assert!(c.validate().is_err());
    }
}
