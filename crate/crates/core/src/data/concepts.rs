use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub text: String,
    /// Sorted, duplicate-free class indices.
    pub classes: Vec<usize>,
    /// Row of this concept in the text embedding matrix.
    pub embedding_row: usize,
    /// Texts of concepts merged into this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl ConceptEntry {
    pub fn is_exclusive(&self) -> bool {
        self.classes.len() == 1
    }

    pub fn has_class(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }
}

/// Ordered set of concepts for an `num_classes`-way task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptBank {
    num_classes: usize,
    concepts: Vec<ConceptEntry>,
}

/// One record of the concept JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub text: String,
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ConceptDocument {
    num_classes: usize,
    concepts: Vec<ConceptRecord>,
}

/// Deduplication key: trimmed, case-folded text.
pub fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

impl ConceptBank {
    /// Builds a bank from already-deduplicated entries, checking every invariant.
    pub fn new(num_classes: usize, concepts: Vec<ConceptEntry>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::out_of_range("num_classes", num_classes, ">= 2"));
        }
        let mut seen = HashMap::new();
        for (index, c) in concepts.iter().enumerate() {
            if c.text.trim().is_empty() {
                return Err(Error::EmptyConceptText { index });
            }
            if c.classes.is_empty() {
                return Err(Error::Invalid(format!("concept {index} has no classes")));
            }
            if !c.classes.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Invalid(format!(
                    "concept {index} class set is not sorted and unique"
                )));
            }
            if let Some(&class) = c.classes.iter().find(|&&y| y >= num_classes) {
                return Err(Error::ClassOutOfRange { class, num_classes });
            }
            if let Some(prev) = seen.insert(dedup_key(&c.text), index) {
                return Err(Error::Invalid(format!(
                    "concepts {prev} and {index} share the text {:?}",
                    c.text
                )));
            }
        }
        Ok(Self {
            num_classes,
            concepts,
        })
    }

    /// Deduplicates records by [`dedup_key`]; a repeated text contributes its
    /// classes (and aliases) to the first occurrence, which keeps its row.
    /// A record without `embedding_row` uses its position in the list.
    pub fn from_records(num_classes: usize, records: &[ConceptRecord]) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::out_of_range("num_classes", num_classes, ">= 2"));
        }
        let mut slots: HashMap<String, usize> = HashMap::new();
        let mut entries: Vec<(ConceptEntry, BTreeSet<usize>)> = Vec::new();
        for (index, rec) in records.iter().enumerate() {
            let text = rec.text.trim();
            if text.is_empty() {
                return Err(Error::EmptyConceptText { index });
            }
            if let Some(&class) = rec.classes.iter().find(|&&y| y >= num_classes) {
                return Err(Error::ClassOutOfRange { class, num_classes });
            }
            match slots.get(&dedup_key(text)) {
                Some(&slot) => {
                    let (entry, classes) = &mut entries[slot];
                    classes.extend(rec.classes.iter().copied());
                    for alias in &rec.aliases {
                        if !entry.aliases.contains(alias) {
                            entry.aliases.push(alias.clone());
                        }
                    }
                }
                None => {
                    slots.insert(dedup_key(text), entries.len());
                    entries.push((
                        ConceptEntry {
                            text: text.to_string(),
                            classes: Vec::new(),
                            embedding_row: rec.embedding_row.unwrap_or(index),
                            aliases: rec.aliases.clone(),
                        },
                        rec.classes.iter().copied().collect(),
                    ));
                }
            }
        }
        let concepts = entries
            .into_iter()
            .map(|(mut entry, classes)| {
                entry.classes = classes.into_iter().collect();
                entry
            })
            .collect();
        Self::new(num_classes, concepts)
    }

    pub fn from_json_str(json: &str, path: &Path) -> Result<Self> {
        let doc: ConceptDocument = serde_json::from_str(json).map_err(|e| Error::json(path, e))?;
        Self::from_records(doc.num_classes, &doc.concepts)
    }

    pub fn to_records(&self) -> Vec<ConceptRecord> {
        self.concepts
            .iter()
            .map(|c| ConceptRecord {
                text: c.text.clone(),
                classes: c.classes.clone(),
                embedding_row: Some(c.embedding_row),
                aliases: c.aliases.clone(),
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        let doc = serde_json::json!({
            "num_classes": self.num_classes,
            "concepts": self.to_records(),
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("concept bank serializes");
        s.push('\n');
        s
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[ConceptEntry] {
        &self.concepts
    }

    pub fn get(&self, j: usize) -> &ConceptEntry {
        &self.concepts[j]
    }

    pub fn texts(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.text.clone()).collect()
    }

    pub fn embedding_rows(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.embedding_row).collect()
    }

    /// True once any concept carries merge aliases.
    pub fn is_merged(&self) -> bool {
        self.concepts.iter().any(|c| !c.aliases.is_empty())
    }

    /// Bank of the listed concepts, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            concepts: indices.iter().map(|&j| self.concepts[j].clone()).collect(),
        }
    }

    pub(crate) fn with_concepts(&self, concepts: Vec<ConceptEntry>) -> Self {
        Self {
            num_classes: self.num_classes,
            concepts,
        }
    }

    /// Independent-pool variant: every (concept, class) association becomes
    /// its own single-class concept. Shared concepts get a ` [class y]` suffix
    /// so texts stay unique; all copies point at the same embedding row.
    pub fn split_per_class(&self) -> Result<Self> {
        if self.is_merged() {
            return Err(Error::Invalid(
                "cannot split a merged bank into independent pools".into(),
            ));
        }
        let mut out = Vec::new();
        for c in &self.concepts {
            if c.is_exclusive() {
                out.push(c.clone());
                continue;
            }
            for &y in &c.classes {
                out.push(ConceptEntry {
                    text: format!("{} [class {y}]", c.text),
                    classes: vec![y],
                    embedding_row: c.embedding_row,
                    aliases: Vec::new(),
                });
            }
        }
        Self::new(self.num_classes, out)
    }
}

pub fn load_concepts(path: impl AsRef<Path>) -> Result<ConceptBank> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ConceptBank::from_json_str(&json, path)
}

pub fn save_concepts(bank: &ConceptBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bank.to_json_string()).map_err(|e| Error::io(path, e))
}
