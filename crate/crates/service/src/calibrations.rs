use std::collections::BTreeMap;
use std::path::Path;

use imagerep_core::uncertainty::CalibrationModel;
use imagerep_core::{Error, Result};

/// Immutable set of error models keyed by id.
///
/// `builtin_2d` and `builtin_3d` are always present. A directory file named
/// `default_2d.json` or `default_3d.json` replaces the builtin as the default
/// for that dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    models: BTreeMap<String, CalibrationModel>,
}

impl CalibrationSet {
    pub fn load(dir: Option<&Path>) -> Result<Self> {
        let mut models = BTreeMap::new();
        for d in [2, 3] {
            models.insert(format!("builtin_{d}d"), CalibrationModel::builtin(d)?);
        }
        if let Some(dir) = dir {
            let mut paths: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            paths.sort();
            for p in paths {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let model = CalibrationModel::from_json(&std::fs::read_to_string(&p)?)
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
                models.insert(id, model);
            }
        }
        Ok(Self { models })
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    /// The requested model, or the default for `dim` when no id is given.
    pub fn resolve(&self, id: Option<&str>, dim: usize) -> Result<(String, &CalibrationModel)> {
        let id = match id {
            Some(id) => id.to_string(),
            None if self.models.contains_key(&format!("default_{dim}d")) => format!("default_{dim}d"),
            None => format!("builtin_{dim}d"),
        };
        match self.models.get(&id) {
            Some(m) => Ok((id, m)),
            None => Err(Error::InvalidArgument(format!("unknown calibration '{id}'"))),
        }
    }
}
