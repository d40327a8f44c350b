use std::fmt;

use layerdrop::contribution::ContributionError;
use layerdrop::encoder::EncoderError;
use layerdrop::finetune::FinetuneError;
use layerdrop::strategies::PlanError;
use layerdrop::surgery::SurgeryError;
use layerdrop::tensorstore::StoreError;
use layerdrop::topology::TopologyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
}

/// A failure tagged with the component that raised it.
#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub component: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(component: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind: Kind::Usage,
            component,
            message: message.to_string(),
        }
    }

    pub fn data(component: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind: Kind::Data,
            component,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Data => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.component, self.message)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::data("tensorstore", e)
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        Self::data("topology", e)
    }
}

/// Plan errors reaching this conversion come from command-line arguments;
/// malformed plan files are reported separately as data errors.
impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        Self::usage("strategies", e)
    }
}

impl From<SurgeryError> for CliError {
    fn from(e: SurgeryError) -> Self {
        match e {
            SurgeryError::EmptyEncoder => Self::usage("surgery", e),
            _ => Self::data("surgery", e),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Store(e) => e.into(),
            EncoderError::Topology(e) => e.into(),
            e => Self::data("encoder", e),
        }
    }
}

impl From<ContributionError> for CliError {
    fn from(e: ContributionError) -> Self {
        match e {
            ContributionError::Encoder(e) => e.into(),
            ContributionError::Plan(e) => e.into(),
            e => Self::data("contribution", e),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::Encoder(e) => e.into(),
            FinetuneError::Surgery(e) => e.into(),
            FinetuneError::Topology(e) => e.into(),
            FinetuneError::Plan(e) => e.into(),
            FinetuneError::Contribution(e) => e.into(),
            FinetuneError::TooFewEpochs { .. } => Self::usage("finetune", e),
            e => Self::data("finetune", e),
        }
    }
}
