use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage, attached to errors that bubble out of `run_estimation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Transform,
    Blocks,
    Validate,
    FitIfe,
    Impute,
    Effects,
    Inference,
    Simulate,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Transform => "transform",
            Stage::Blocks => "blocks",
            Stage::Validate => "validate",
            Stage::FitIfe => "fit_ife",
            Stage::Impute => "impute",
            Stage::Effects => "effects",
            Stage::Inference => "inference",
            Stage::Simulate => "simulate",
            Stage::Export => "export",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cumulative series decreases at index {index} ({previous} -> {current})")]
    DecreasingCumulative {
        index: usize,
        previous: f64,
        current: f64,
    },

    #[error("series of length {len} is too short for a {window}-day window")]
    SeriesTooShort { len: usize, window: usize },

    #[error("lag {lag} leaves no usable rows in a panel of {rows} days")]
    EmptyDesign { lag: usize, rows: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("treatment indicator for unit '{unit}' switches off at row {row}")]
    NonAbsorbingTreatment { unit: String, row: usize },

    #[error("panel has no never-treated (control) units")]
    NoControlGroup,

    #[error("panel has no treated units; pass allow_all_control to accept this")]
    NoTreatedUnits,

    #[error("order condition violated: {0}")]
    OrderCondition(String),

    #[error("unit '{unit}' has {rows} usable pre-treatment rows, need at least {needed} for {factors} factors")]
    RankDeficientUnit {
        unit: String,
        rows: usize,
        needed: usize,
        factors: usize,
    },

    #[error("requested {requested} factors but the matrix is only {rows}x{cols}")]
    TooManyFactors {
        requested: usize,
        rows: usize,
        cols: usize,
    },

    #[error("collinear covariates: column '{column}' is a linear combination of {against}")]
    CollinearCovariates { column: String, against: String },

    #[error("matrix has a missing cell at row {row}, column {col}")]
    IncompleteMatrix { row: usize, col: usize },

    #[error("no complete rows in the control block")]
    NoCompleteRows,

    #[error("group '{0}' is empty")]
    EmptyGroup(String),

    #[error("group '{group}' references unit '{unit}' which is not treated")]
    GroupMemberNotTreated { group: String, unit: String },

    #[error("non-positive degrees of freedom {dof} (T={t}, N0={n0}, r={r}, K={k})")]
    NonPositiveDof {
        dof: i64,
        t: usize,
        n0: usize,
        r: usize,
        k: usize,
    },

    #[error("SEIR parameters outside the stability region: {0}")]
    SeirStability(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{row}: {message}")]
    Data {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{failed} of {total} Monte Carlo replications failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Validation errors are problems with the inputs or configuration;
    /// everything else is a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::DecreasingCumulative { .. }
                | Error::SeriesTooShort { .. }
                | Error::EmptyDesign { .. }
                | Error::Dimension(_)
                | Error::NonAbsorbingTreatment { .. }
                | Error::NoControlGroup
                | Error::NoTreatedUnits
                | Error::OrderCondition(_)
                | Error::EmptyGroup(_)
                | Error::GroupMemberNotTreated { .. }
                | Error::SeirStability(_)
                | Error::Config(_)
                | Error::Data { .. }
                | Error::Io { .. }
                | Error::Csv { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
