//! Paraphrase- and generation-based augmentation for span-based relation
//! extraction corpora.
//!
//! The pipeline renders each training sample into a bracketed sentence or a
//! label listing, sends the prompt to a text-completion endpoint, validates
//! the completion against the original labels and turns accepted
//! completions back into token-level pseudo-samples. Around that core sit
//! corpus IO, training-set assembly, a micro-F1 scorer and an embedding
//! fidelity analysis.
//!
//! Module map:
//! - [`corpus`]: data model, SciERC loader, backbone exporters, statistics
//! - [`promptkit`]: bracket rendering and the two prompt templates
//! - [`gateway`]: completion client with retries and a record/replay cache
//! - [`postproc`]: completion parsing, re-tokenization, span realignment
//! - [`augmentor`]: augmentation runs and training-set assembly
//! - [`evalkit`]: Ent / Rel / Rel+ scoring
//! - [`fidelity`]: sentence-embedding similarity and 2D projection

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod augmentor;
pub mod corpus;
pub mod evalkit;
pub mod fidelity;
pub mod gateway;
pub mod postproc;
pub mod promptkit;
pub mod stub;

pub use corpus::{
    DatasetStats, Document, DocumentSet, EntityMention, EntityType, ExportFormat, RelationMention,
    RelationType, Sample, Split,
};
pub use postproc::{DefectClass, PseudoSample};

/// The two augmentation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Paraphrase,
    Generate,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Paraphrase => "paraphrase",
            Method::Generate => "generate",
        }
    }

    /// One-letter code used in pseudo document keys (`pga_p_000001`).
    pub fn code(self) -> char {
        match self {
            Method::Paraphrase => 'p',
            Method::Generate => 'g',
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paraphrase" => Ok(Method::Paraphrase),
            "generate" => Ok(Method::Generate),
            other => Err(format!(
                "unknown method `{other}` (expected paraphrase|generate)"
            )),
        }
    }
}
