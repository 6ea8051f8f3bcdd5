//! Label masks and the fine-grained → six-group remapping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{invalid, Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// The six evaluation groups, in id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Smooth = 0,
    Rough = 1,
    Bumpy = 2,
    Forbidden = 3,
    Obstacles = 4,
    Background = 5,
}

pub const NUM_GROUPS: usize = 6;

impl Group {
    pub const ALL: [Group; NUM_GROUPS] = [
        Group::Smooth,
        Group::Rough,
        Group::Bumpy,
        Group::Forbidden,
        Group::Obstacles,
        Group::Background,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Group> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Smooth => "smooth",
            Group::Rough => "rough",
            Group::Bumpy => "bumpy",
            Group::Forbidden => "forbidden",
            Group::Obstacles => "obstacles",
            Group::Background => "background",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Integer class-index image. Every label is `< class_count` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    class_count: usize,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid(
                "label_mask",
                format!("{height}x{width} mask needs {} labels, got {}", height * width, labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= class_count) {
            return Err(invalid(
                "label_mask",
                format!("label {bad} out of range for {class_count} classes"),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
            class_count,
        })
    }

    /// A mask of raw ids (anything but [`IGNORE`] is a valid class).
    pub fn raw(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::new(height, width, labels, IGNORE as usize)
    }

    pub fn filled(height: usize, width: usize, label: u8, class_count: usize) -> Result<Self> {
        Self::new(height, width, vec![label; height * width], class_count)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        debug_assert!(label == IGNORE || (label as usize) < self.class_count);
        self.labels[y * self.width + x] = label;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-pixel class targets with ignored pixels as `None`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != IGNORE).then_some(l as usize))
            .collect()
    }

    /// Pixels with a 4-neighbour carrying a different label, both labels
    /// being non-ignore.
    pub fn boundary_pixels(&self) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.get(y, x);
                if l == IGNORE {
                    continue;
                }
                let differs = |ny: usize, nx: usize| {
                    let m = self.get(ny, nx);
                    m != IGNORE && m != l
                };
                out[y * w + x] = (y > 0 && differs(y - 1, x))
                    || (y + 1 < h && differs(y + 1, x))
                    || (x > 0 && differs(y, x - 1))
                    || (x + 1 < w && differs(y, x + 1));
            }
        }
        out
    }

    /// Per-class pixel counts, ignoring [`IGNORE`].
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count.min(IGNORE as usize)];
        for &l in &self.labels {
            if l != IGNORE {
                h[l as usize] += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct RemapEntry {
    group: Group,
    names: Vec<String>,
}

/// Total mapping from fine label ids (and names) to the six groups.
///
/// Text format, one entry per line: `fine_id group_id  # name[, alias...]`.
/// Lines starting with `#` are comments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    entries: BTreeMap<u8, RemapEntry>,
}

impl RemapTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (body, comment) = line.split_once('#').unwrap_or((line, ""));
            let cols: Vec<&str> = body.split_whitespace().collect();
            let bad = || invalid("remap", format!("line {}: expected `fine_id group_id`", lineno + 1));
            let [fine, group] = cols.as_slice() else {
                return Err(bad());
            };
            let fine: u8 = fine.parse().map_err(|_| bad())?;
            let group = group
                .parse::<u8>()
                .ok()
                .and_then(Group::from_id)
                .ok_or_else(bad)?;
            let names = comment
                .split(',')
                .map(normalize)
                .filter(|n| !n.is_empty())
                .collect();
            if entries.insert(fine, RemapEntry { group, names }).is_some() {
                return Err(invalid("remap", format!("duplicate fine id {fine}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn rugd() -> Self {
        Self::parse(include_str!("../remap/rugd.txt")).expect("bundled RUGD table parses")
    }

    pub fn rellis3d() -> Self {
        Self::parse(include_str!("../remap/rellis3d.txt")).expect("bundled RELLIS-3D table parses")
    }

    /// Maps each group id to itself; remapping an already-grouped mask with
    /// this table is the identity.
    pub fn six_class_identity() -> Self {
        let entries = Group::ALL
            .iter()
            .map(|g| {
                (
                    g.id(),
                    RemapEntry {
                        group: *g,
                        names: vec![g.name().to_string()],
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn group_of_id(&self, fine: u8) -> Option<Group> {
        self.entries.get(&fine).map(|e| e.group)
    }

    pub fn group_of_name(&self, name: &str) -> Option<Group> {
        let key = normalize(name);
        self.entries
            .values()
            .find(|e| e.names.contains(&key))
            .map(|e| e.group)
    }

    pub fn fine_ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.keys().copied()
    }

    /// Maps a fine mask to six groups. [`IGNORE`] passes through; any id
    /// missing from the table is an error listing every such id.
    pub fn remap(&self, fine: &LabelMask) -> Result<LabelMask> {
        let mut unknown = BTreeSet::new();
        let labels: Vec<u8> = fine
            .labels()
            .iter()
            .map(|&l| {
                if l == IGNORE {
                    return IGNORE;
                }
                match self.group_of_id(l) {
                    Some(g) => g.id(),
                    None => {
                        unknown.insert(l as u32);
                        IGNORE
                    }
                }
            })
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownLabel {
                ids: unknown.into_iter().collect(),
            });
        }
        LabelMask::new(fine.height(), fine.width(), labels, NUM_GROUPS)
    }
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase().replace(['_', '-'], " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_rows_map_to_their_groups() {
        let t = RemapTable::rugd();
        assert_eq!(t.group_of_name("concrete"), Some(Group::Smooth));
        assert_eq!(t.group_of_name("Rock bed"), Some(Group::Bumpy));
        assert_eq!(t.group_of_name("sky"), Some(Group::Background));
        let r = RemapTable::rellis3d();
        assert_eq!(r.group_of_name("mud"), Some(Group::Bumpy));
        assert_eq!(r.group_of_name("bush"), Some(Group::Forbidden));
    }

    #[test]
    fn unknown_ids_are_listed() {
        let m = LabelMask::raw(1, 3, vec![2, 200, 201]).unwrap();
        match RemapTable::rellis3d().remap(&m) {
            Err(Error::UnknownLabel { ids }) => assert_eq!(ids, vec![2, 200, 201]),
            other => panic!("expected unknown-label error, got {other:?}"),
        }
    }

    #[test]
    fn void_mask_becomes_background() {
        let m = LabelMask::raw(2, 2, vec![0; 4]).unwrap();
        let out = RemapTable::rugd().remap(&m).unwrap();
        assert!(out.labels().iter().all(|&l| l == Group::Background.id()));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RemapTable::parse("1 9 # bad group").is_err());
        assert!(RemapTable::parse("1 # missing").is_err());
        assert!(RemapTable::parse("1 1\n1 2").is_err());
    }

    #[test]
    fn boundary_uses_four_connectivity() {
        // Diagonal-only contact is not a boundary.
        let m = LabelMask::raw(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!(m.boundary_pixels().iter().all(|&b| b));
        let m = LabelMask::raw(3, 3, vec![0, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        let b = m.boundary_pixels();
        assert!(!b[4]);
        assert!(b[5] && b[7] && b[8]);
    }
}
