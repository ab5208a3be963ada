//! Dataset manifests: participant group assignment and the line-oriented
//! manifest file that records it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Source,
    Target,
    Validation,
    Test,
}

impl Group {
    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Source => "source",
            Group::Target => "target",
            Group::Validation => "validation",
            Group::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Group> {
        match s {
            "source" => Some(Group::Source),
            "target" => Some(Group::Target),
            "validation" => Some(Group::Validation),
            "test" => Some(Group::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Hr,
    Lr,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Hr => "HR",
            Role::Lr => "LR",
        }
    }

    fn parse(s: &str) -> Option<Role> {
        match s {
            "HR" => Some(Role::Hr),
            "LR" => Some(Role::Lr),
            _ => None,
        }
    }
}

/// Whether source HR volumes come from held-out participants (unpaired)
/// or are deformed copies of the target participants (misaligned).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Unpaired,
    Misaligned,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::Unpaired => "unpaired",
            SplitMode::Misaligned => "misaligned",
        }
    }

    pub fn parse(s: &str) -> Option<SplitMode> {
        match s {
            "unpaired" => Some(SplitMode::Unpaired),
            "misaligned" => Some(SplitMode::Misaligned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCounts {
    pub source: usize,
    pub target: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub participant: String,
    pub group: Group,
    pub role: Role,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub mode: SplitMode,
}

impl DatasetManifest {
    pub fn participants(&self, group: Group) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .filter_map(|e| seen.insert(e.participant.as_str()).then_some(e.participant.as_str()))
            .collect()
    }

    pub fn entries_for(&self, group: Group, role: Role) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.group == group && e.role == role).collect()
    }

    /// Find the counterpart entry (same participant + group, other role).
    pub fn paired_entry(&self, entry: &ManifestEntry, role: Role) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.participant == entry.participant && e.group == entry.group && e.role == role)
    }

    /// Check the group-disjointness / sharing rules for the mode.
    pub fn validate(&self) -> Result<()> {
        let set = |g: Group| -> BTreeSet<&str> { self.participants(g).into_iter().collect() };
        let source = set(Group::Source);
        let target = set(Group::Target);
        let others: BTreeSet<&str> = target
            .iter()
            .copied()
            .chain(set(Group::Validation))
            .chain(set(Group::Test))
            .collect();
        match self.mode {
            SplitMode::Unpaired => {
                if !source.is_disjoint(&others) {
                    return Err(Error::Manifest(
                        "unpaired split requires source participants disjoint from the rest".into(),
                    ));
                }
            }
            SplitMode::Misaligned => {
                if source != target {
                    return Err(Error::Manifest(
                        "misaligned split requires source and target to share participants".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn default_volume_path(id: &str, group: Group, role: Role, mode: SplitMode) -> PathBuf {
    let name = match (group, role) {
        (Group::Source, Role::Hr) if mode == SplitMode::Misaligned => format!("{id}_hr_src.nii"),
        (_, Role::Hr) => format!("{id}_hr.nii"),
        (_, Role::Lr) => format!("{id}_lr.nii"),
    };
    PathBuf::from(name)
}

/// Deterministically split participants into the four groups. Validation
/// and test entries carry both roles; source is HR-only, target LR-only.
pub fn split_groups(
    ids: &[String],
    counts: GroupCounts,
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetManifest> {
    let needed = match mode {
        SplitMode::Unpaired => counts.source + counts.target + counts.validation + counts.test,
        SplitMode::Misaligned => counts.target + counts.validation + counts.test,
    };
    if needed > ids.len() {
        return Err(Error::Manifest(format!(
            "split needs {needed} participants, only {} available",
            ids.len()
        )));
    }
    if mode == SplitMode::Misaligned && counts.source != counts.target {
        return Err(Error::Manifest(
            "misaligned split shares participants, so source and target counts must match".into(),
        ));
    }

    let mut shuffled: Vec<&String> = ids.iter().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let mut entries = Vec::new();
    let mut push = |id: &str, group: Group, role: Role| {
        entries.push(ManifestEntry {
            participant: id.to_string(),
            group,
            role,
            path: default_volume_path(id, group, role, mode),
        });
    };

    let mut cursor = 0usize;
    let take = |n: usize, cursor: &mut usize| {
        let slice = &shuffled[*cursor..*cursor + n];
        *cursor += n;
        slice.to_vec()
    };

    let target_ids = take(counts.target, &mut cursor);
    let source_ids = match mode {
        SplitMode::Unpaired => take(counts.source, &mut cursor),
        SplitMode::Misaligned => target_ids.clone(),
    };
    let validation_ids = take(counts.validation, &mut cursor);
    let test_ids = take(counts.test, &mut cursor);

    for id in &source_ids {
        push(id, Group::Source, Role::Hr);
    }
    for id in &target_ids {
        push(id, Group::Target, Role::Lr);
    }
    for id in &validation_ids {
        push(id, Group::Validation, Role::Hr);
        push(id, Group::Validation, Role::Lr);
    }
    for id in &test_ids {
        push(id, Group::Test, Role::Hr);
        push(id, Group::Test, Role::Lr);
    }

    let manifest = DatasetManifest { entries, seed, mode };
    manifest.validate()?;
    Ok(manifest)
}

const MANIFEST_VERSION: u32 = 1;

/// Write the manifest in its line-oriented text form.
pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("udean-manifest {MANIFEST_VERSION}\n"));
    out.push_str(&format!("seed {}\n", m.seed));
    out.push_str(&format!("mode {}\n", m.mode.as_str()));
    for e in &m.entries {
        let p = e.path.to_str().ok_or_else(|| {
            Error::Manifest(format!("non-UTF8 path for participant {}", e.participant))
        })?;
        if e.participant.contains(char::is_whitespace) || p.contains(char::is_whitespace) {
            return Err(Error::Manifest(format!(
                "whitespace in participant or path: {} / {p}",
                e.participant
            )));
        }
        out.push_str(&format!("entry {} {} {} {}\n", e.participant, e.group, e.role.as_str(), p));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seed = None;
    let mut mode = None;
    let mut entries = Vec::new();
    let mut version_seen = false;
    for (ln, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", ln + 1));
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "udean-manifest" => {
                if toks.get(1) != Some(&"1") {
                    return Err(bad("unsupported manifest version"));
                }
                version_seen = true;
            }
            "seed" => {
                seed = Some(
                    toks.get(1)
                        .and_then(|s| s.parse::<u64>().ok())
                        .ok_or_else(|| bad("bad seed"))?,
                );
            }
            "mode" => {
                mode = Some(
                    toks.get(1)
                        .and_then(|s| SplitMode::parse(s))
                        .ok_or_else(|| bad("bad mode"))?,
                );
            }
            "entry" => {
                if toks.len() != 5 {
                    return Err(bad("entry needs: id group role path"));
                }
                entries.push(ManifestEntry {
                    participant: toks[1].to_string(),
                    group: Group::parse(toks[2]).ok_or_else(|| bad("bad group"))?,
                    role: Role::parse(toks[3]).ok_or_else(|| bad("bad role"))?,
                    path: PathBuf::from(toks[4]),
                });
            }
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    if !version_seen {
        return Err(Error::format(path, "missing version line"));
    }
    let manifest = DatasetManifest {
        entries,
        seed: seed.ok_or_else(|| Error::format(path, "missing seed"))?,
        mode: mode.ok_or_else(|| Error::format(path, "missing mode"))?,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:04}")).collect()
    }

    #[test]
    fn unpaired_groups_disjoint_with_requested_sizes() {
        let counts = GroupCounts { source: 120, target: 120, validation: 30, test: 30 };
        let m = split_groups(&ids(300), counts, 42, SplitMode::Unpaired).unwrap();
        assert_eq!(m.participants(Group::Source).len(), 120);
        assert_eq!(m.participants(Group::Target).len(), 120);
        assert_eq!(m.participants(Group::Validation).len(), 30);
        assert_eq!(m.participants(Group::Test).len(), 30);
        m.validate().unwrap();
        let source: BTreeSet<_> = m.participants(Group::Source).into_iter().collect();
        let target: BTreeSet<_> = m.participants(Group::Target).into_iter().collect();
        assert!(source.is_disjoint(&target));
    }

    #[test]
    fn deterministic_for_seed() {
        let counts = GroupCounts { source: 4, target: 4, validation: 2, test: 2 };
        let a = split_groups(&ids(20), counts, 7, SplitMode::Unpaired).unwrap();
        let b = split_groups(&ids(20), counts, 7, SplitMode::Unpaired).unwrap();
        assert_eq!(a, b);
        let c = split_groups(&ids(20), counts, 8, SplitMode::Unpaired).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn misaligned_source_equals_target() {
        let counts = GroupCounts { source: 5, target: 5, validation: 2, test: 2 };
        let m = split_groups(&ids(12), counts, 3, SplitMode::Misaligned).unwrap();
        let source: BTreeSet<_> = m.participants(Group::Source).into_iter().collect();
        let target: BTreeSet<_> = m.participants(Group::Target).into_iter().collect();
        assert_eq!(source, target);
        // Deformed source copies live in distinct files.
        for e in m.entries_for(Group::Source, Role::Hr) {
            assert!(e.path.to_str().unwrap().ends_with("_hr_src.nii"));
        }
    }

    #[test]
    fn insufficient_ids_rejected() {
        let counts = GroupCounts { source: 5, target: 5, validation: 2, test: 2 };
        assert!(split_groups(&ids(10), counts, 0, SplitMode::Unpaired).is_err());
    }

    #[test]
    fn manifest_file_round_trip() {
        let counts = GroupCounts { source: 3, target: 3, validation: 1, test: 2 };
        let m = split_groups(&ids(10), counts, 11, SplitMode::Unpaired).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        save_manifest(&m, &path).unwrap();
        let r = load_manifest(&path).unwrap();
        assert_eq!(m, r);
    }

    #[test]
    fn validation_and_test_carry_both_roles() {
        let counts = GroupCounts { source: 2, target: 2, validation: 2, test: 1 };
        let m = split_groups(&ids(10), counts, 5, SplitMode::Unpaired).unwrap();
        assert_eq!(m.entries_for(Group::Validation, Role::Hr).len(), 2);
        assert_eq!(m.entries_for(Group::Validation, Role::Lr).len(), 2);
        assert_eq!(m.entries_for(Group::Test, Role::Hr).len(), 1);
        assert_eq!(m.entries_for(Group::Test, Role::Lr).len(), 1);
    }
}
