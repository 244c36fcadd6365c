//! Shared CLI plumbing: exit-code-aware errors and backend construction.

use std::path::Path;

use anyhow::{anyhow, Context};
use logken_core::gateway::{Gateway, MockScript};

use crate::{BackendArgs, BackendChoice};

/// Errors routed to distinct exit codes: `Usage` exits 2, `Data` exits 1.
pub enum CliError {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

/// Validates that an input path exists before any work begins; a missing
/// input is a usage error.
pub fn require_input(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(anyhow!(
            "input file {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

pub fn build_gateway(args: &BackendArgs) -> Result<Gateway, CliError> {
    match args.backend {
        BackendChoice::Mock => {
            let path = args
                .mock_script
                .as_ref()
                .ok_or_else(|| CliError::Usage(anyhow!("--backend mock requires --mock-script")))?;
            require_input(path)?;
            let script = MockScript::load(path)
                .with_context(|| format!("loading mock script {}", path.display()))?;
            Ok(Gateway::new(
                Box::new(logken_core::gateway::MockBackend::new(script)),
                logken_core::gateway::RetryPolicy::default(),
                args.max_in_flight,
            ))
        }
        BackendChoice::Http => {
            let endpoint = args
                .endpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage(anyhow!("--backend http requires --endpoint")))?;
            logken_core::gateway::validate_endpoint(endpoint)
                .map_err(|e| CliError::Usage(anyhow!(e)))?;
            Ok(Gateway::new(
                Box::new(logken_core::gateway::HttpBackend::new(endpoint.clone())),
                logken_core::gateway::RetryPolicy::default(),
                args.max_in_flight,
            ))
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    require_input(path)?;
    Ok(std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .trim()
        .to_owned())
}
