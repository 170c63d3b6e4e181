use super::SamplerError;
use crate::molgraph::MolecularGraph;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldEntry {
    pub scaffold_id: String,
    pub count: usize,
    pub members: Vec<String>,
}

impl ScaffoldEntry {
    pub fn new(scaffold_id: impl Into<String>, members: Vec<String>) -> Self {
        ScaffoldEntry {
            scaffold_id: scaffold_id.into(),
            count: members.len(),
            members,
        }
    }
}

/// Scaffolds with their member molecules, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaffoldTable {
    entries: Vec<ScaffoldEntry>,
}

impl ScaffoldTable {
    pub fn new(entries: Vec<ScaffoldEntry>) -> Result<Self, SamplerError> {
        let mut seen = HashMap::new();
        for e in &entries {
            if seen.insert(e.scaffold_id.as_str(), ()).is_some() {
                return Err(SamplerError::DuplicateScaffold(e.scaffold_id.clone()));
            }
            if e.count != e.members.len() || e.count == 0 {
                return Err(SamplerError::CountMismatch {
                    id: e.scaffold_id.clone(),
                    count: e.count,
                    members: e.members.len(),
                });
            }
        }
        Ok(ScaffoldTable { entries })
    }

    /// Groups molecules by scaffold id, scaffolds ordered by first appearance.
    pub fn from_molecules<'a>(mols: impl IntoIterator<Item = &'a MolecularGraph>) -> Self {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut entries: Vec<ScaffoldEntry> = Vec::new();
        for g in mols {
            let slot = *index.entry(g.scaffold_id.clone()).or_insert_with(|| {
                entries.push(ScaffoldEntry::new(g.scaffold_id.clone(), Vec::new()));
                entries.len() - 1
            });
            entries[slot].members.push(g.mol_id.clone());
            entries[slot].count += 1;
        }
        ScaffoldTable { entries }
    }

    pub fn entries(&self) -> &[ScaffoldEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `scaffold_id<TAB>count<TAB>mol_id,mol_id,...` lines.
    pub fn parse_tsv(text: &str) -> Result<Self, SamplerError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(SamplerError::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let count: usize = fields[1].trim().parse().map_err(|_| SamplerError::Parse {
                line: line_no,
                message: format!("count {:?} is not a non-negative integer", fields[1]),
            })?;
            let members: Vec<String> = fields[2]
                .split(',')
                .map(str::trim)
                .filter(|m| !m.is_empty())
                .map(str::to_string)
                .collect();
            entries.push(ScaffoldEntry {
                scaffold_id: fields[0].to_string(),
                count,
                members,
            });
        }
        Self::new(entries)
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self, SamplerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_tsv(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.scaffold_id, e.count, e.members.join(",")))
            .collect()
    }
}
