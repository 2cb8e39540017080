//! One module per subcommand. Each command clones the loaded config, applies
//! its flag overrides, validates, does its work strictly under the output
//! root, and finishes by writing a provenance manifest.

pub mod attack;
pub mod evaluate;
pub mod gen_data;
pub mod train_generator;
pub mod train_surrogate;
pub mod transfer;

use std::path::Path;

use crowdveil_core::data::{load_dataset, Dataset, Split};
use crowdveil_core::{Error, Result};

/// Load a split, failing with a pointer to `gen-data` when it is missing.
pub(crate) fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let ds = load_dataset(dir, split)?;
    if ds.is_empty() {
        return Err(Error::Data(format!(
            "no {split} scenes under {}; run `crowdveil gen-data` first",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Require a checkpoint (or other prerequisite file), pointing at the
/// command that produces it when absent.
pub(crate) fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "missing {}; run `crowdveil {produced_by}` first",
            path.display()
        )))
    }
}

pub(crate) fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split '{other}' (expected 'train' or 'test')")),
    }
}
