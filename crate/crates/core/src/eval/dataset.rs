use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_label_png;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Davis,
    Ytvos,
    LongVideos,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "davis" => Ok(Layout::Davis),
            "ytvos" | "youtube-vos" => Ok(Layout::Ytvos),
            "longvideos" | "long-videos" => Ok(Layout::LongVideos),
            other => Err(Error::InvalidArgument(format!("unknown dataset layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// File with one sequence name per line; restricts the manifest.
    pub sequence_list: Option<PathBuf>,
    /// File tagging unseen objects, one `sequence [object]` per line. A line
    /// without an object tags every object of that sequence.
    pub unseen_list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub id: u8,
    /// Frame index of the first annotation containing the object.
    pub first_frame: usize,
    pub unseen: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// Annotation path by frame index.
    pub annotations: BTreeMap<usize, PathBuf>,
    pub objects: Vec<ObjectInfo>,
}

impl SequenceEntry {
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn annotated_frames(&self) -> BTreeSet<usize> {
        self.annotations.keys().copied().collect()
    }

    /// File stem of frame `index`, used to name output masks.
    pub fn frame_stem(&self, index: usize) -> String {
        self.frames[index]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{index:05}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn object_count(&self) -> usize {
        self.sequences.iter().map(|s| s.object_count()).sum()
    }

    pub fn sequence(&self, name: &str) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|s| s.name == name)
    }
}

/// `dir/480p` when it exists, else `dir`.
fn resolution_dir(dir: PathBuf) -> PathBuf {
    let p = dir.join("480p");
    if p.is_dir() { p } else { dir }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn load_sequence(name: &str, frame_dir: &Path, ann_dir: &Path) -> Result<SequenceEntry> {
    let frames: Vec<PathBuf> = list_dir(frame_dir)?
        .into_iter()
        .filter(|p| has_ext(p, &["jpg", "jpeg", "png"]))
        .collect();
    if frames.is_empty() {
        return Err(Error::Dataset(format!("sequence {name} has no frames")));
    }
    let index: BTreeMap<String, usize> = frames
        .iter()
        .enumerate()
        .filter_map(|(i, p)| Some((p.file_stem()?.to_string_lossy().into_owned(), i)))
        .collect();
    let mut annotations = BTreeMap::new();
    if ann_dir.is_dir() {
        for p in list_dir(ann_dir)?.into_iter().filter(|p| has_ext(p, &["png"])) {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let i = index.get(&stem).ok_or_else(|| {
                Error::Dataset(format!("annotation {} has no matching frame", p.display()))
            })?;
            annotations.insert(*i, p);
        }
    }
    let first = annotations
        .get(&0)
        .ok_or_else(|| Error::MissingFirstAnnotation(name.to_string()))?;
    let first_mask = read_label_png(first)?;
    let mut first_seen: BTreeMap<u8, usize> = BTreeMap::new();
    for o in 1..=first_mask.object_count {
        if first_mask.contains(o) {
            first_seen.insert(o, 0);
        }
    }
    for (&i, p) in annotations.iter().skip(1) {
        let m = read_label_png(p)?;
        for o in 1..=m.object_count {
            if m.contains(o) {
                first_seen.entry(o).or_insert(i);
            }
        }
    }
    let objects = first_seen
        .into_iter()
        .map(|(id, first_frame)| ObjectInfo { id, first_frame, unseen: None })
        .collect();
    Ok(SequenceEntry {
        name: name.to_string(),
        frames,
        annotations,
        objects,
    })
}

/// Walks `JPEGImages[/480p]/<seq>` and `Annotations[/480p]/<seq>` under `root`.
///
/// Every sequence must annotate its first frame. Objects are the labels that
/// occur in any annotation, each starting at its first annotated frame.
pub fn load_manifest(root: &Path, layout: Layout, options: &ManifestOptions) -> Result<DatasetManifest> {
    let frame_root = resolution_dir(root.join("JPEGImages"));
    let ann_root = resolution_dir(root.join("Annotations"));
    if !frame_root.is_dir() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    let mut names: Vec<String> = list_dir(&frame_root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| Some(p.file_name()?.to_string_lossy().into_owned()))
        .collect();
    if let Some(list) = &options.sequence_list {
        let keep: BTreeSet<String> = read_lines(list)?.into_iter().collect();
        for k in &keep {
            if !names.contains(k) {
                return Err(Error::Dataset(format!("listed sequence {k} is missing")));
            }
        }
        names.retain(|n| keep.contains(n));
    }
    if names.is_empty() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    let mut sequences = names
        .iter()
        .map(|n| load_sequence(n, &frame_root.join(n), &ann_root.join(n)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &options.unseen_list {
        let mut tags: BTreeMap<String, Option<BTreeSet<u8>>> = BTreeMap::new();
        for line in read_lines(path)? {
            let mut parts = line.split_whitespace();
            let seq = parts.next().unwrap_or_default().to_string();
            match parts.next() {
                None => {
                    tags.insert(seq, None);
                }
                Some(o) => {
                    let o: u8 = o
                        .parse()
                        .map_err(|_| Error::Dataset(format!("bad object id in unseen list: {line}")))?;
                    if let Some(set) = tags.entry(seq).or_insert_with(|| Some(BTreeSet::new())) {
                        set.insert(o);
                    }
                }
            }
        }
        for s in &mut sequences {
            for o in &mut s.objects {
                o.unseen = Some(match tags.get(&s.name) {
                    Some(None) => true,
                    Some(Some(set)) => set.contains(&o.id),
                    None => false,
                });
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        layout,
        sequences,
    })
}
