pub mod encode;
pub mod evaluate;
pub mod patches;
pub mod replay;
pub mod synth;
pub mod train;

use crate::error::{CliError, CliResult};
use std::path::{Path, PathBuf};

/// Sorted paths of files in `dir` carrying the given extension.
pub fn sorted_files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}
