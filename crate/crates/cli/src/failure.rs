//! Error reporting: one JSON object on stderr and a process exit code.

use std::process::ExitCode;

use serde_json::json;
use sortition::{CountingError, Error, InstanceError, LotteryError, OptimizerError, OracleError, SamplingError};

pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_TIMEOUT: u8 = 3;
pub const EXIT_USAGE: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: "io",
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Self {
            kind: "verification",
            code: EXIT_VERIFY_FAILED,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }

    pub fn report(&self) {
        eprintln!(
            "{}",
            json!({"error": self.kind, "exit_code": self.code, "message": self.message})
        );
    }
}

fn classify(e: &Error) -> (&'static str, u8) {
    use Error as E;
    match e {
        E::Instance(InstanceError::InfeasibleByCounting { .. })
        | E::Sampling(SamplingError::Infeasible { .. } | SamplingError::ZeroCount)
        | E::Oracle(OracleError::NoPanels) => ("infeasible", EXIT_INFEASIBLE),
        E::Sampling(SamplingError::Timeout { .. })
        | E::Optimizer(OptimizerError::Timeout { .. } | OptimizerError::Sampling(SamplingError::Timeout { .. }))
        | E::Lottery(LotteryError::Sampling(SamplingError::Timeout { .. })) => ("timeout", EXIT_TIMEOUT),
        E::Counting(CountingError::ResourceExceeded { .. } | CountingError::KeyTooWide { .. })
        | E::Sampling(SamplingError::Counting(
            CountingError::ResourceExceeded { .. } | CountingError::KeyTooWide { .. },
        )) => ("resource", EXIT_TIMEOUT),
        E::Optimizer(OptimizerError::Sampling(s)) | E::Lottery(LotteryError::Sampling(s)) => {
            classify(&E::Sampling(s.clone()))
        }
        E::Optimizer(OptimizerError::Oracle(o)) => classify(&E::Oracle(o.clone())),
        E::Sampling(SamplingError::Counting(CountingError::Instance(i))) | E::Counting(CountingError::Instance(i)) => {
            classify(&E::Instance(i.clone()))
        }
        E::Instance(InstanceError::Io(_)) | E::Lottery(LotteryError::Io(_)) => ("io", EXIT_USAGE),
        _ => ("input", EXIT_USAGE),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = classify(&e);
        Self {
            kind,
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! via_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

via_error!(InstanceError, CountingError, SamplingError, OptimizerError, OracleError, LotteryError);
