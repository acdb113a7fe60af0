//! The bottling line: molding, rinse, two fillers, capping and labeling,
//! with a planner that contracts a filler for 500 ml of water.

use super::{run_script_text, ScenarioError, ScenarioReport};

const LINE: &str = include_str!("../../scenarios/factory_line.toml");
const INTENT: &str = include_str!("../../scenarios/factory_intent.toml");
const NOMINAL: &str = include_str!("../../scenarios/factory_nominal.toml");
const DEGRADE: &str = include_str!("../../scenarios/factory_degrade.toml");
const MUTE: &str = include_str!("../../scenarios/factory_mute.toml");

pub const DEFAULT_SEED: u64 = 2024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactoryVariant {
    /// fill_A serves every request.
    Nominal,
    /// fill_A slows to 150 ms and the session heals to fill_B.
    Degrade,
    /// Both fillers go silent and the session fails.
    MuteBoth,
}

impl FactoryVariant {
    pub const ALL: [FactoryVariant; 3] = [Self::Nominal, Self::Degrade, Self::MuteBoth];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nominal => "factory-nominal",
            Self::Degrade => "factory-degrade",
            Self::MuteBoth => "factory-mute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s || v.name().strip_prefix("factory-") == Some(s))
    }

    /// The complete script text for this variant.
    pub fn script(self) -> String {
        let tail = match self {
            Self::Nominal => NOMINAL,
            Self::Degrade => DEGRADE,
            Self::MuteBoth => MUTE,
        };
        format!("name = \"{}\"\nseed = {DEFAULT_SEED}\n\n{LINE}\n{INTENT}\n{tail}", self.name())
    }
}

/// Nodes, providers and adapters of the line, with no intent submitted.
/// The requester is the node named `planner`.
pub fn line_script() -> String {
    format!("name = \"factory-line\"\nseed = {DEFAULT_SEED}\n\n{LINE}")
}

pub fn run_factory_scenario(
    variant: FactoryVariant,
    seed: u64,
) -> (ScenarioReport, Result<(), ScenarioError>) {
    run_script_text(&variant.script(), Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_parse() {
        for v in FactoryVariant::ALL {
            crate::scenario::Script::parse(&v.script()).unwrap();
            assert_eq!(FactoryVariant::parse(v.name()), Some(v));
        }
    }
}
