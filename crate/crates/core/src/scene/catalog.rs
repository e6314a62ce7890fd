use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::SceneError;

/// One retrievable asset. `extents` are full box dimensions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub category: usize,
    pub extents: [f64; 3],
}

/// Asset catalog, serialized as a JSON array of entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self, SceneError> {
        for (i, e) in entries.iter().enumerate() {
            if e.extents.iter().any(|&x| !(x > 0.0)) {
                return Err(SceneError::schema(format!("[{i}].extents"), "extents must be positive"));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let entries: Vec<CatalogEntry> = serde_json::from_str(text)?;
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Nearest same-category asset to a box with half-extents `size`,
    /// compared as full extents `2 * size`. Ties go to the earlier entry.
    pub fn retrieve(&self, category: usize, size: [f64; 3]) -> Result<&CatalogEntry, SceneError> {
        self.retrieve_extents(category, size.map(|s| 2.0 * s))
    }

    /// Nearest same-category asset to full box dimensions `full`.
    pub fn retrieve_extents(&self, category: usize, full: [f64; 3]) -> Result<&CatalogEntry, SceneError> {
        let mut best: Option<(&CatalogEntry, f64)> = None;
        for e in self.entries.iter().filter(|e| e.category == category) {
            let d: f64 = (0..3).map(|i| (e.extents[i] - full[i]).powi(2)).sum::<f64>().sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((e, d));
            }
        }
        best.map(|(e, _)| e).ok_or(SceneError::EmptyCategory(category))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        Catalog::from_json(
            r#"[{"id": "a", "category": 0, "extents": [1, 1, 1]},
                {"id": "b", "category": 0, "extents": [2, 2, 2]},
                {"id": "c", "category": 1, "extents": [1.2, 1, 1]},
                {"id": "d", "category": 1, "extents": [0.8, 1, 1]}]"#,
        )
        .unwrap()
    }

    #[test]
    fn nearest_extents_win() {
        assert_eq!(catalog().retrieve(0, [0.55, 0.5, 0.5]).unwrap().id, "a");
        assert_eq!(catalog().retrieve(0, [1.0, 1.0, 1.0]).unwrap().id, "b");
    }

    #[test]
    fn nearest_full_extents() {
        assert_eq!(catalog().retrieve_extents(0, [1.1, 1.0, 1.0]).unwrap().id, "a");
        assert_eq!(catalog().retrieve_extents(0, [2.0, 2.0, 2.0]).unwrap().id, "b");
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(catalog().retrieve(1, [0.5, 0.5, 0.5]).unwrap().id, "c");
    }

    #[test]
    fn empty_category_is_an_error() {
        assert!(matches!(
            catalog().retrieve(7, [1.0; 3]),
            Err(SceneError::EmptyCategory(7))
        ));
    }

    #[test]
    fn rejects_nonpositive_extents() {
        assert!(Catalog::from_json(r#"[{"id": "x", "category": 0, "extents": [1, 0, 1]}]"#).is_err());
    }
}
