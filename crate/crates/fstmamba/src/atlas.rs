//! Atlas files: networks in scan order, each with explicit component names
//! or a count.
//!
//! ```toml
//! name = "my-atlas"
//! [[networks]]
//! name = "SC"
//! components = ["SC01", "SC02"]
//! [[networks]]
//! name = "AUD"
//! count = 2
//! ```

use std::path::Path;

use fstmamba_core::topology::{ComponentAtlas, Network};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEUROMARK_TOML: &str = include_str!("../atlases/neuromark.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasFile {
    pub name: String,
    pub networks: Vec<NetworkEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl AtlasFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })
    }

    /// An unpadded atlas; padding follows the model's stage schedule.
    pub fn to_atlas(&self) -> Result<ComponentAtlas> {
        let mut networks = Vec::with_capacity(self.networks.len());
        for n in &self.networks {
            let components = match (&n.components, n.count) {
                (Some(c), None) => c.clone(),
                (None, Some(k)) => (1..=k).map(|i| format!("{}{i:02}", n.name)).collect(),
                (Some(c), Some(k)) if c.len() == k => c.clone(),
                _ => {
                    return Err(Error::Config(format!(
                        "atlas network '{}' needs a component list or a matching count",
                        n.name
                    )))
                }
            };
            networks.push(Network { name: n.name.clone(), components });
        }
        let total = networks.iter().map(|n| n.components.len()).sum();
        Ok(ComponentAtlas::new(self.name.clone(), networks, total)?)
    }

    pub fn from_atlas(atlas: &ComponentAtlas) -> Self {
        Self {
            name: atlas.name.clone(),
            networks: atlas
                .networks
                .iter()
                .map(|n| NetworkEntry { name: n.name.clone(), components: Some(n.components.clone()), count: None })
                .collect(),
        }
    }
}

/// Resolves an atlas reference: a TOML file path, `neuromark-53`, or
/// `uniform-<N>x<K>`.
pub fn resolve(reference: &str) -> Result<ComponentAtlas> {
    let path = Path::new(reference);
    if path.extension().is_some_and(|e| e == "toml") || path.exists() {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        return AtlasFile::parse(&text, path)?.to_atlas();
    }
    if reference == "neuromark-53" || reference == "neuromark" {
        return AtlasFile::parse(NEUROMARK_TOML, Path::new("neuromark.toml"))?.to_atlas();
    }
    if let Some(rest) = reference.strip_prefix("uniform-") {
        if let Some((n, k)) = rest.split_once('x') {
            if let (Ok(n), Ok(k)) = (n.parse(), k.parse()) {
                return Ok(ComponentAtlas::uniform(n, k)?);
            }
        }
    }
    Err(Error::Config(format!(
        "unknown atlas '{reference}' (expected a .toml file, neuromark-53 or uniform-<N>x<K>)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_layout_matches_the_builtin() {
        let a = resolve("neuromark-53").unwrap();
        let b = ComponentAtlas::neuromark();
        assert_eq!(a.networks, b.networks);
        assert_eq!(a.n_components, 53);
    }

    #[test]
    fn uniform_names_and_file_round_trip() {
        let a = resolve("uniform-16x4").unwrap();
        assert_eq!(a, ComponentAtlas::uniform(16, 4).unwrap());
        let text = toml::to_string(&AtlasFile::from_atlas(&a)).unwrap();
        let back = AtlasFile::parse(&text, Path::new("x")).unwrap().to_atlas().unwrap();
        assert_eq!(back, a);
        assert!(resolve("uniform-4").is_err());
        assert!(resolve("mystery").is_err());
    }

    #[test]
    fn count_and_list_must_agree() {
        let text = "name = \"a\"\n[[networks]]\nname = \"X\"\ncount = 3\ncomponents = [\"x\"]\n";
        assert!(AtlasFile::parse(text, Path::new("x")).unwrap().to_atlas().is_err());
        let text = "name = \"a\"\n[[networks]]\nname = \"X\"\n";
        assert!(AtlasFile::parse(text, Path::new("x")).unwrap().to_atlas().is_err());
    }
}
