//! Exit codes and the mapping from library errors onto them.

use std::fmt;

use falconer_core::backends::BackendError;
use falconer_core::corpus::CorpusError;
use falconer_core::eval::EvalError;
use falconer_core::executor::ExecError;
use falconer_core::generator::GeneratorError;
use falconer_core::plan::PlanError;
use falconer_core::planner::PlannerError;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const VALIDATION: u8 = 2;
pub const PLANNER: u8 = 3;
pub const UNREACHABLE: u8 = 4;
pub const BAD_ARGS: u8 = 5;

/// An error that already knows its exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

pub fn fail(code: u8, msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(Coded {
        code,
        message: msg.to_string(),
    })
}

fn backend(e: &BackendError) -> u8 {
    match e {
        BackendError::BackendUnavailable(_) => UNREACHABLE,
        BackendError::InvalidDescriptor(_) => BAD_ARGS,
        BackendError::ProtocolError(_) | BackendError::InvalidRequest(_) => INTERNAL,
    }
}

pub fn classify(err: &anyhow::Error) -> u8 {
    if let Some(c) = err.downcast_ref::<Coded>() {
        return c.code;
    }
    if let Some(e) = err.downcast_ref::<PlannerError>() {
        return match e {
            PlannerError::Backend(b) if backend(b) == UNREACHABLE => UNREACHABLE,
            PlannerError::Io { .. } | PlannerError::MissingGolden(_) => BAD_ARGS,
            PlannerError::InvalidExample { .. } => VALIDATION,
            PlannerError::GoldenFailed { source, .. } => exec(source),
            _ => PLANNER,
        };
    }
    if let Some(e) = err.downcast_ref::<ExecError>() {
        return exec(e);
    }
    if let Some(e) = err.downcast_ref::<GeneratorError>() {
        return match e {
            GeneratorError::Backend(b) => backend(b),
            GeneratorError::Corpus(c) => corpus(c),
            GeneratorError::CorpusTooSmall { .. } | GeneratorError::EmptyInstruction | GeneratorError::Io { .. } => {
                BAD_ARGS
            }
            GeneratorError::WrongKind { .. } | GeneratorError::Malformed { .. } => VALIDATION,
            GeneratorError::ScoringFailed { .. } | GeneratorError::Primitive { .. } => INTERNAL,
        };
    }
    if let Some(e) = err.downcast_ref::<BackendError>() {
        return backend(e);
    }
    if let Some(e) = err.downcast_ref::<CorpusError>() {
        return corpus(e);
    }
    if err.downcast_ref::<PlanError>().is_some() || err.downcast_ref::<EvalError>().is_some() {
        return VALIDATION;
    }
    INTERNAL
}

fn exec(e: &ExecError) -> u8 {
    match e {
        ExecError::InvalidPlan(_) | ExecError::MismatchedRuns { .. } | ExecError::MalformedResults { .. } => VALIDATION,
        ExecError::UnboundBackend(_) | ExecError::Io { .. } => BAD_ARGS,
        ExecError::Backend { source, .. } => backend(source),
        ExecError::ItemFailed { .. } => INTERNAL,
    }
}

fn corpus(e: &CorpusError) -> u8 {
    match e {
        CorpusError::Io { .. } | CorpusError::InvalidFraction(_) | CorpusError::SampleTooLarge { .. } => BAD_ARGS,
        _ => VALIDATION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_survive_context() {
        let e = fail(VALIDATION, "bad plan").context("while validating");
        assert_eq!(classify(&e), VALIDATION);
        let e = anyhow::Error::new(PlannerError::NoJsonFound).context("planning");
        assert_eq!(classify(&e), PLANNER);
        let e = anyhow::Error::new(PlannerError::Backend(BackendError::BackendUnavailable("down".into())));
        assert_eq!(classify(&e), UNREACHABLE);
        assert_eq!(classify(&anyhow::anyhow!("boom")), INTERNAL);
    }
}
