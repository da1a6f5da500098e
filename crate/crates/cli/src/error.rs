use accent_core::accent_expand::ExpandError;
use accent_core::eval::EvalError;
use accent_core::manifest::ManifestError;
use accent_core::testset_builders::TestsetError;
use accent_nn::NnError;

/// Failure with an exit-code class and a short machine-readable kind.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { kind: String, message: String },
    #[error("{message}")]
    Validation { kind: &'static str, message: String },
    #[error("{message}")]
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    pub fn validation(kind: &'static str, message: impl ToString) -> Self {
        CliError::Validation {
            kind,
            message: message.to_string(),
        }
    }

    pub fn runtime(kind: &'static str, message: impl ToString) -> Self {
        CliError::Runtime {
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Validation { .. } => 3,
            CliError::Runtime { .. } => 1,
        }
    }

    /// `error class=<class> kind=<kind>: <message>` on one line.
    pub fn line(&self) -> String {
        let (class, kind, message) = match self {
            CliError::Usage { kind, message } => ("usage", kind.as_str(), message),
            CliError::Validation { kind, message } => ("validation", *kind, message),
            CliError::Runtime { kind, message } => ("runtime", *kind, message),
        };
        let flat: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error class={class} kind={kind}: {}", flat.join(" | "))
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        let kind = match &e {
            ManifestError::Io { .. } => return CliError::runtime("io", e),
            ManifestError::Parse { .. } => "manifest_parse",
            ManifestError::DuplicateId(_) => "duplicate_id",
            ManifestError::InvalidRecord { .. } => "invalid_record",
            ManifestError::Empty(_) => "empty_manifest",
            ManifestError::InvalidRatio { .. } => "invalid_ratio",
            ManifestError::TargetTooLarge { .. } | ManifestError::ZeroTarget => "invalid_target",
            ManifestError::UnknownGroupKey(_) => "unknown_group_key",
        };
        CliError::validation(kind, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Io { .. } => return CliError::runtime("io", e),
            EvalError::SingleClass { .. } => "class_balance",
            EvalError::NonFinite(_) => "non_finite_score",
            EvalError::ZeroReference(_) => "zero_reference",
            EvalError::LengthMismatch { .. } => "length_mismatch",
            EvalError::UnknownUtterance(_) => "unknown_utterance",
            EvalError::DuplicateScore(_) => "duplicate_score",
            EvalError::Parse { .. } => "score_parse",
        };
        CliError::validation(kind, e)
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match &e {
            NnError::Config(_) => CliError::validation("config", e),
            NnError::Shape(_) | NnError::DimensionMismatch { .. } => CliError::validation("shape", e),
            NnError::SingleClass { .. } => CliError::validation("class_balance", e),
            NnError::Eval(EvalError::SingleClass { .. }) => CliError::validation("class_balance", e),
            NnError::MissingAudio { .. } => CliError::runtime("missing_audio", e),
            NnError::Diverged { .. } => CliError::runtime("diverged", e),
            NnError::Checkpoint(_) => CliError::runtime("checkpoint", e),
            _ => CliError::runtime("internal", e),
        }
    }
}

impl From<ExpandError> for CliError {
    fn from(e: ExpandError) -> Self {
        match &e {
            ExpandError::Io { .. } => CliError::runtime("io", e),
            ExpandError::BackendUnreachable { .. } => CliError::runtime("backend_unreachable", e),
            ExpandError::Manifest(_) => CliError::runtime("internal", e),
            ExpandError::DuplicateEngine(_) => CliError::validation("duplicate_engine", e),
            ExpandError::EmptyGroup(_) => CliError::validation("empty_group", e),
            ExpandError::Registry { .. } => CliError::validation("registry", e),
            ExpandError::EmptyTranscript(_) => CliError::validation("empty_transcript", e),
        }
    }
}

impl From<TestsetError> for CliError {
    fn from(e: TestsetError) -> Self {
        match &e {
            TestsetError::NotBonaFide(_) => CliError::validation("not_bona_fide", e),
            TestsetError::LanguageTooSmall { .. } => CliError::validation("language_too_small", e),
            TestsetError::UnsupportedLanguage(_) => CliError::validation("unsupported_language", e),
            TestsetError::MissingTranscripts(_) => CliError::validation("missing_transcripts", e),
            TestsetError::InvalidRatio(_) => CliError::validation("invalid_ratio", e),
            _ => CliError::runtime("build", e),
        }
    }
}
