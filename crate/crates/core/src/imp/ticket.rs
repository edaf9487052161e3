use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RoundRecord;
use crate::artifact::{digest_file, read_params, verify_digests, write_params, FileDigest};
use crate::error::{Error, Result};
use crate::masking::{read_mask, write_mask, PruningMask};
use crate::nn::ParamVector;

pub const TICKET_MANIFEST: &str = "ticket.json";
const MASK_FILE: &str = "mask.bin";
const INIT_FILE: &str = "init.pvec";
const TRAINED_FILE: &str = "trained.pvec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketKind {
    Imp,
    Cs,
}

/// A sparse subnetwork with its initialization and trained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TicketArtifact {
    pub kind: TicketKind,
    /// Weights surviving coordinates rewind to (`θ_init` when `rewind_step`
    /// is 0).
    pub init: ParamVector,
    /// Trained weights under the final mask, zero at masked coordinates.
    pub trained: ParamVector,
    pub mask: PruningMask,
    pub rewind_step: u64,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TicketManifest {
    pub format_version: u32,
    pub kind: TicketKind,
    pub seed: u64,
    pub rewind_step: u64,
    pub registry_digest: String,
    pub sparsity: f64,
    pub config: serde_json::Value,
    pub rounds: Vec<RoundRecord>,
    pub files: Vec<FileDigest>,
}

impl TicketArtifact {
    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }

    /// Writes the mask, both parameter vectors and `ticket.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<TicketManifest> {
        std::fs::create_dir_all(dir)?;
        let layout = self.init.layout();
        write_mask(&dir.join(MASK_FILE), &self.mask, layout)?;
        write_params(&dir.join(INIT_FILE), &self.init)?;
        write_params(&dir.join(TRAINED_FILE), &self.trained)?;
        let files = [MASK_FILE, "mask.bin.json", INIT_FILE, TRAINED_FILE]
            .iter()
            .map(|f| digest_file(dir, f))
            .collect::<Result<Vec<_>>>()?;
        let manifest = TicketManifest {
            format_version: 1,
            kind: self.kind,
            seed: self.seed,
            rewind_step: self.rewind_step,
            registry_digest: layout.digest(),
            sparsity: self.sparsity(),
            config: self.config.clone(),
            rounds: self.rounds.clone(),
            files,
        };
        std::fs::write(dir.join(TICKET_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TicketManifest =
            serde_json::from_slice(&std::fs::read(dir.join(TICKET_MANIFEST))?)?;
        verify_digests(dir, &manifest.files)?;
        let (mask, layout) = read_mask(&dir.join(MASK_FILE))?;
        if layout.digest() != manifest.registry_digest {
            return Err(Error::invalid("ticket registry digest mismatch"));
        }
        let layout = Arc::new(layout);
        Ok(TicketArtifact {
            kind: manifest.kind,
            init: read_params(&dir.join(INIT_FILE), layout.clone())?,
            trained: read_params(&dir.join(TRAINED_FILE), layout)?,
            mask,
            rewind_step: manifest.rewind_step,
            seed: manifest.seed,
            config: manifest.config,
            rounds: manifest.rounds,
        })
    }
}
