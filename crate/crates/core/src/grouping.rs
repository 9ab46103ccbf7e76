//! Unifies provider-specific category names into shared group indices.
//!
//! A [`GroupingTable`] is built from a template (one group per template
//! category), a synonym lexicon (single hop, no transitive closure) and a
//! list of manual overrides. Labels that match no group are dropped at
//! normalization time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, RawDetection};

#[derive(Debug, thiserror::Error)]
pub enum GroupingError {
    #[error("template is empty")]
    EmptyTemplate,
    #[error("template category {0:?} appears more than once")]
    DuplicateTemplate(String),
    #[error("override maps {label:?} to both {first:?} and {second:?}")]
    OverrideConflict { label: String, first: String, second: String },
    #[error("override target {0:?} is not a template category")]
    UnknownTarget(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercased, whitespace-trimmed form used for every comparison.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Word -> noun synonyms. External data; only well-formedness is checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymLexicon {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl SynonymLexicon {
    pub fn insert(&mut self, word: &str, synonyms: impl IntoIterator<Item = impl AsRef<str>>) {
        let set = self.entries.entry(canonical_label(word)).or_default();
        for s in synonyms {
            let s = canonical_label(s.as_ref());
            if !s.is_empty() {
                set.insert(s);
            }
        }
    }

    pub fn synonyms(&self, word: &str) -> impl Iterator<Item = &str> {
        self.entries.get(word).into_iter().flat_map(|s| s.iter().map(String::as_str))
    }

    /// Parses `word<TAB>syn1,syn2,...` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self, GroupingError> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((word, syns)) = line.split_once('\t') else {
                return Err(GroupingError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "expected word<TAB>synonyms".into(),
                });
            };
            if word.trim().is_empty() {
                return Err(GroupingError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "empty word".into(),
                });
            }
            lex.insert(word, syns.split(','));
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, GroupingError> {
        Self::parse(&read(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub canonical: String,
    pub members: BTreeSet<String>,
}

/// Why a label did not land where the lexicon suggested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupingWarning {
    /// Lexicon offered `label` to `rejected` but an earlier group already held it.
    LexiconClaimed { label: String, kept: String, rejected: String },
    /// An override moved `label` out of the group the lexicon put it in.
    Overridden { label: String, from: String, to: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingTable {
    groups: Vec<Group>,
    index: BTreeMap<String, usize>,
}

pub enum Normalized {
    Kept(Detection),
    Dropped,
}

impl GroupingTable {
    /// Identity grouping: each category is its own group.
    pub fn identity<S: AsRef<str>>(template: &[S]) -> Result<Self, GroupingError> {
        build_grouping(template, &SynonymLexicon::default(), &[]).map(|(t, _)| t)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn lookup(&self, label: &str) -> Option<usize> {
        self.index.get(&canonical_label(label)).copied()
    }

    pub fn canonical(&self, group: usize) -> Option<&str> {
        self.groups.get(group).map(|g| g.canonical.as_str())
    }

    pub fn normalize(&self, raw: &RawDetection) -> Normalized {
        match self.lookup(&raw.label) {
            Some(group) => Normalized::Kept(Detection { group, score: raw.score, bbox: raw.bbox }),
            None => Normalized::Dropped,
        }
    }

    /// Normalizes a provider's list, discarding unmatched labels.
    pub fn normalize_all(&self, raws: &[RawDetection]) -> Vec<Detection> {
        raws.iter()
            .filter_map(|r| match self.normalize(r) {
                Normalized::Kept(d) => Some(d),
                Normalized::Dropped => None,
            })
            .collect()
    }
}

/// Builds one group per template category, in template order.
///
/// Canonical names are reserved first, lexicon synonyms are assigned to the
/// earliest claiming group, and overrides are applied last (they win over the
/// lexicon). Returns the table and the warnings raised along the way.
pub fn build_grouping<S: AsRef<str>>(
    template: &[S],
    lexicon: &SynonymLexicon,
    overrides: &[(String, String)],
) -> Result<(GroupingTable, Vec<GroupingWarning>), GroupingError> {
    if template.is_empty() {
        return Err(GroupingError::EmptyTemplate);
    }
    let mut warnings = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: Vec<Group> = Vec::with_capacity(template.len());
    for (i, cat) in template.iter().enumerate() {
        let cat = canonical_label(cat.as_ref());
        if index.insert(cat.clone(), i).is_some() {
            return Err(GroupingError::DuplicateTemplate(cat));
        }
        groups.push(Group { canonical: cat.clone(), members: BTreeSet::from([cat]) });
    }

    for i in 0..groups.len() {
        let canonical = groups[i].canonical.clone();
        for syn in lexicon.synonyms(&canonical) {
            match index.get(syn) {
                Some(&j) if j == i => {}
                Some(&j) => warnings.push(GroupingWarning::LexiconClaimed {
                    label: syn.to_string(),
                    kept: groups[j].canonical.clone(),
                    rejected: canonical.clone(),
                }),
                None => {
                    index.insert(syn.to_string(), i);
                    groups[i].members.insert(syn.to_string());
                }
            }
        }
    }

    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for (label, target) in overrides {
        let label = canonical_label(label);
        let target = canonical_label(target);
        if let Some(prev) = seen.get(&label) {
            if *prev != target {
                return Err(GroupingError::OverrideConflict {
                    label,
                    first: prev.clone(),
                    second: target,
                });
            }
            continue;
        }
        seen.insert(label.clone(), target.clone());
        let Some(&to) = index.get(&target).filter(|&&g| groups[g].canonical == target) else {
            return Err(GroupingError::UnknownTarget(target));
        };
        match index.get(&label).copied() {
            Some(from) if from == to => {}
            Some(from) => {
                if groups[from].canonical == label {
                    // a canonical name must stay in its own group
                    return Err(GroupingError::OverrideConflict {
                        label: label.clone(),
                        first: groups[from].canonical.clone(),
                        second: target,
                    });
                }
                groups[from].members.remove(&label);
                warnings.push(GroupingWarning::Overridden {
                    label: label.clone(),
                    from: groups[from].canonical.clone(),
                    to: target.clone(),
                });
                groups[to].members.insert(label.clone());
                index.insert(label, to);
            }
            None => {
                groups[to].members.insert(label.clone());
                index.insert(label, to);
            }
        }
    }

    for w in &warnings {
        log::warn!("label grouping: {w:?}");
    }
    Ok((GroupingTable { groups, index }, warnings))
}

fn read(path: &Path) -> Result<String, GroupingError> {
    std::fs::read_to_string(path)
        .map_err(|source| GroupingError::Io { path: path.display().to_string(), source })
}

/// Newline-separated category names.
pub fn parse_template(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect()
}

pub fn load_template(path: &Path) -> Result<Vec<String>, GroupingError> {
    Ok(parse_template(&read(path)?))
}

/// `provider_label<TAB>template_category` lines.
pub fn parse_overrides(text: &str, origin: &str) -> Result<Vec<(String, String)>, GroupingError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            Some((l, t)) if !l.trim().is_empty() && !t.trim().is_empty() => {
                out.push((l.trim().to_string(), t.trim().to_string()))
            }
            _ => {
                return Err(GroupingError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "expected label<TAB>category".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_overrides(path: &Path) -> Result<Vec<(String, String)>, GroupingError> {
    parse_overrides(&read(path)?, &path.display().to_string())
}
