use std::path::Path;

use crate::error::{Error, Result};

/// Class index per image row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::out_of_range("num_classes", num_classes, ">= 2"));
        }
        if let Some(&class) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::ClassOutOfRange { class, num_classes });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let y: usize = trimmed.parse().map_err(|_| Error::LabelParse {
                line: i + 1,
                message: format!("{trimmed:?} is not a class index"),
            })?;
            labels.push(y);
        }
        Self::new(labels, num_classes)
    }

    /// One decimal index per line, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.labels.len() * 3);
        for y in &self.labels {
            s.push_str(&y.to_string());
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Row indices of each class, ascending.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

pub fn load_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelVector::parse(&text, num_classes)
}

pub fn save_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, labels.to_text()).map_err(|e| Error::io(path, e))
}
