pub mod ablation;
pub mod analysis;
pub mod grid;
pub mod probe;
pub mod sae;

use std::path::Path;

use cdscope::cds::{read_cds_csv, CdsEntry};
use cdscope::partition::Partition;
use cdscope::sae::{read_checkpoint, SaeModel};
use cdscope::store::{read_attention_set, read_embedding_set, AttentionSet, EmbeddingSet};

use crate::config::invalid;
use crate::manifest::Run;

pub(crate) fn load_embeddings(run: &mut Run, role: &str, path: &Path) -> anyhow::Result<EmbeddingSet> {
    let bytes = run.input(role, path)?;
    Ok(read_embedding_set(&path.display().to_string(), &bytes)?)
}

pub(crate) fn load_attention(run: &mut Run, role: &str, path: &Path) -> anyhow::Result<AttentionSet> {
    let bytes = run.input(role, path)?;
    Ok(read_attention_set(&path.display().to_string(), &bytes)?)
}

pub(crate) fn load_model(run: &mut Run, path: &Path) -> anyhow::Result<SaeModel> {
    let bytes = run.input("checkpoint", path)?;
    Ok(read_checkpoint(&path.display().to_string(), &bytes)?.0)
}

pub(crate) fn load_cds(run: &mut Run, path: &Path) -> anyhow::Result<Vec<CdsEntry>> {
    let bytes = run.input("cds", path)?;
    Ok(read_cds_csv(&bytes[..])?)
}

pub(crate) fn load_partition(run: &mut Run, path: &Path) -> anyhow::Result<Partition> {
    let bytes = run.input("partition", path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(Partition::from_text(text)?)
}

pub(crate) fn check_dims(model: &SaeModel, set: &EmbeddingSet, role: &str) -> anyhow::Result<()> {
    if model.d() != set.dim() {
        return Err(invalid(format!(
            "{role}: token dimension {} does not match the checkpoint's d = {}",
            set.dim(),
            model.d()
        )));
    }
    Ok(())
}

/// Renders one of the core CSV writers into memory.
pub(crate) fn render<F>(write: F) -> anyhow::Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> cdscope::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}
