//! File and directory mode for per-frame commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

/// One frame to process: its stem, input path and output path.
#[derive(Debug, Clone)]
pub struct Job {
    pub stem: String,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Cloud payloads in `dir`, sorted by file name. Sidecars are skipped.
pub fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    for entry in entries {
        let path = entry
            .with_context(|| format!("cannot list {}", dir.display()))?
            .path();
        if path.is_file() && path.extension().is_some_and(|e| e == "bin") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Expand `input`/`output` into jobs. A directory input yields one job per
/// cloud, written under `output` with the same name or with `ext` swapped in.
pub fn plan(input: &Path, output: &Path, ext: Option<&str>) -> Result<Vec<Job>> {
    if input.is_dir() {
        let files = list_clouds(input)?;
        if files.is_empty() {
            bail!(radarlift::Error::InvalidArgument(format!(
                "no .bin clouds in {}",
                input.display()
            )));
        }
        Ok(files
            .into_iter()
            .map(|f| {
                let stem = stem_of(&f);
                let name = match ext {
                    Some(e) => PathBuf::from(format!("{stem}.{e}")),
                    None => PathBuf::from(f.file_name().expect("listed file has a name")),
                };
                Job {
                    output: output.join(name),
                    stem,
                    input: f,
                }
            })
            .collect())
    } else if input.exists() {
        Ok(vec![Job {
            stem: stem_of(input),
            input: input.to_path_buf(),
            output: output.to_path_buf(),
        }])
    } else {
        Err(radarlift::Error::Io {
            path: input.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        }
        .into())
    }
}

/// The partner cloud of a frame: `partner/<stem>.bin` when `partner` is a
/// directory, `partner` itself otherwise.
pub fn partner(partner: &Path, stem: &str, what: &str) -> Result<PathBuf> {
    if partner.is_dir() {
        let p = partner.join(format!("{stem}.bin"));
        if !p.is_file() {
            return Err(radarlift::Error::Io {
                path: p,
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no {what} cloud for frame {stem}"),
                ),
            }
            .into());
        }
        Ok(p)
    } else {
        Ok(partner.to_path_buf())
    }
}

/// Run `f` on every job in parallel, keeping job order in the result.
pub fn run<T: Send>(jobs: &[Job], f: impl Fn(&Job) -> Result<T> + Sync) -> Result<Vec<T>> {
    jobs.par_iter()
        .map(|j| f(j).with_context(|| format!("frame {}", j.stem)))
        .collect()
}
