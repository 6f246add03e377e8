//! STRIDE threat catalogue and DREAD risk scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThreatError {
    #[error("DREAD attribute {name} is {value}, must be within 1..=10")]
    OutOfRange { name: &'static str, value: u8 },
    #[error("threat record {0:?} has no STRIDE categories")]
    NoCategories(String),
}

/// The six STRIDE threat categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrideCategory {
    Spoofing,
    Tampering,
    Repudiation,
    InformationDisclosure,
    DenialOfService,
    ElevationOfPrivilege,
}

impl StrideCategory {
    pub const ALL: [StrideCategory; 6] = [
        StrideCategory::Spoofing,
        StrideCategory::Tampering,
        StrideCategory::Repudiation,
        StrideCategory::InformationDisclosure,
        StrideCategory::DenialOfService,
        StrideCategory::ElevationOfPrivilege,
    ];

    /// The category's stored one-line definition.
    pub fn describe(self) -> &'static str {
        match self {
            StrideCategory::Spoofing => {
                "Attempt to gain access to a system using a forged identity. \
                 A compromised system would have access control vulnerability."
            }
            StrideCategory::Tampering => {
                "Manipulation of data during communication through the network. \
                 The integrity of the data is threatened."
            }
            StrideCategory::Repudiation => {
                "Denial of participation in a transaction. \
                 The availability of a resource is threatened."
            }
            StrideCategory::InformationDisclosure => {
                "Unwanted exposure and loss of confidentiality of private data."
            }
            StrideCategory::DenialOfService => {
                "Attack on system availability through the depletion of system resources."
            }
            StrideCategory::ElevationOfPrivilege => {
                "A user with limited privileges assumes the identity of a privileged user \
                 to gain access to an application. The confidentiality, integrity, and \
                 availability of a resource are threatened."
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrideCategory::Spoofing => "Spoofing",
            StrideCategory::Tampering => "Tampering",
            StrideCategory::Repudiation => "Repudiation",
            StrideCategory::InformationDisclosure => "Information disclosure",
            StrideCategory::DenialOfService => "Denial of service",
            StrideCategory::ElevationOfPrivilege => "Elevation of privilege",
        }
    }
}

impl std::fmt::Display for StrideCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Five DREAD attributes, each ranked 1 (lowest) to 10 (highest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDreadScore")]
pub struct DreadScore {
    /// Damage done if the vulnerability is exploited.
    pub damage_potential: u8,
    /// Ease of repeatedly exploiting the vulnerability.
    pub reproducibility: u8,
    /// Skill level required to exploit the vulnerability.
    pub exploitability: u8,
    /// The parties affected by the exploitation of the vulnerability.
    pub affected_users: u8,
    /// Ease of discovering the vulnerability.
    pub discoverability: u8,
}

#[derive(Deserialize)]
struct RawDreadScore {
    damage_potential: u8,
    reproducibility: u8,
    exploitability: u8,
    affected_users: u8,
    discoverability: u8,
}

impl TryFrom<RawDreadScore> for DreadScore {
    type Error = ThreatError;

    fn try_from(raw: RawDreadScore) -> Result<Self, Self::Error> {
        DreadScore::new(
            raw.damage_potential,
            raw.reproducibility,
            raw.exploitability,
            raw.affected_users,
            raw.discoverability,
        )
    }
}

impl DreadScore {
    pub fn new(
        damage_potential: u8,
        reproducibility: u8,
        exploitability: u8,
        affected_users: u8,
        discoverability: u8,
    ) -> Result<Self, ThreatError> {
        let attributes = [
            ("damage_potential", damage_potential),
            ("reproducibility", reproducibility),
            ("exploitability", exploitability),
            ("affected_users", affected_users),
            ("discoverability", discoverability),
        ];
        for (name, value) in attributes {
            if !(1..=10).contains(&value) {
                return Err(ThreatError::OutOfRange { name, value });
            }
        }
        Ok(DreadScore {
            damage_potential,
            reproducibility,
            exploitability,
            affected_users,
            discoverability,
        })
    }

    fn sum(&self) -> u16 {
        u16::from(self.damage_potential)
            + u16::from(self.reproducibility)
            + u16::from(self.exploitability)
            + u16::from(self.affected_users)
            + u16::from(self.discoverability)
    }

    /// Aggregate risk in tenths: the arithmetic mean of the five attributes
    /// times ten, exactly. The mean of five 1..=10 integers always lands on
    /// a single decimal, so this loses nothing.
    pub fn risk_tenths(&self) -> u16 {
        self.sum() * 2
    }

    /// Aggregate risk on the same 1..=10 scale.
    pub fn risk(&self) -> f64 {
        f64::from(self.sum()) / 5.0
    }

    /// Risk rendered to one decimal using exact integer arithmetic.
    pub fn risk_display(&self) -> String {
        let tenths = self.risk_tenths();
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

/// A named threat with its STRIDE categories and DREAD rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatRecord {
    pub name: String,
    pub categories: BTreeSet<StrideCategory>,
    pub score: DreadScore,
    #[serde(default)]
    pub notes: String,
}

impl ThreatRecord {
    pub fn new(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = StrideCategory>,
        score: DreadScore,
        notes: impl Into<String>,
    ) -> Result<Self, ThreatError> {
        let record = ThreatRecord {
            name: name.into(),
            categories: categories.into_iter().collect(),
            score,
            notes: notes.into(),
        };
        record.validate()?;
        Ok(record)
    }

    /// Deserialized records bypass the constructor; re-check them.
    pub fn validate(&self) -> Result<(), ThreatError> {
        if self.categories.is_empty() {
            return Err(ThreatError::NoCategories(self.name.clone()));
        }
        Ok(())
    }
}

/// Order threats by descending risk; ties break alphabetically by name so
/// the output is deterministic.
pub fn rank(threats: &[ThreatRecord]) -> Vec<ThreatRecord> {
    let mut ranked = threats.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .risk_tenths()
            .cmp(&a.score.risk_tenths())
            .then_with(|| a.name.cmp(&b.name))
    });
    ranked
}
