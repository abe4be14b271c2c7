//! On-disk dataset layout:
//!
//! ```text
//! <root>/Images/<seq>/<frame>.png
//! <root>/Annotations/<seq>/<frame>.png
//! <root>/Flow/<seq>/<frame>.flo      (flow from <frame> to the next frame)
//! ```
//!
//! Sequences and frames are ordered lexicographically. Segmentation datasets
//! only ever expose masks and flow datasets only ever expose flow.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::flo::{read_flo, write_flo, FlowField};
use crate::data::image_io::{read_frame, read_mask, write_frame, write_mask};
use crate::data::scene::Scene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FramePair, Mask};

pub const IMAGES_DIR: &str = "Images";
pub const ANNOTATIONS_DIR: &str = "Annotations";
pub const FLOW_DIR: &str = "Flow";

pub fn frame_name(index: usize) -> String {
    format!("{index:05}")
}

/// Write a rendered scene under `root` as sequence `seq`.
pub fn export_scene(scene: &Scene, root: impl AsRef<Path>, seq: &str) -> Result<()> {
    let root = root.as_ref();
    let dirs = [IMAGES_DIR, ANNOTATIONS_DIR, FLOW_DIR].map(|d| root.join(d).join(seq));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (t, (frame, mask)) in scene.frames.iter().zip(&scene.masks).enumerate() {
        write_frame(frame, dirs[0].join(format!("{}.png", frame_name(t))))?;
        write_mask(mask, dirs[1].join(format!("{}.png", frame_name(t))))?;
    }
    for (t, (flow, valid)) in scene.flows.iter().zip(&scene.flow_valid).enumerate() {
        write_flo(&FlowField::from_tensor(flow, Some(valid)), dirs[2].join(format!("{}.flo", frame_name(t))))?;
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Sequence ids under `<root>/Images`.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let images = root.as_ref().join(IMAGES_DIR);
    if !images.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", images.display())));
    }
    Ok(sorted_entries(&images)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Frame stems (file names without extension) of one sequence.
pub fn list_frames(root: impl AsRef<Path>, seq: &str) -> Result<Vec<String>> {
    let dir = root.as_ref().join(IMAGES_DIR).join(seq);
    Ok(sorted_entries(&dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// One consecutive frame pair on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub sequence: String,
    pub frame: String,
    pub frame_t: PathBuf,
    pub frame_t1: PathBuf,
    /// Annotation (segmentation) or `.flo` file (flow) for `frame`.
    pub target: PathBuf,
}

fn pair_entries(root: &Path, target_dir: &str, ext: &str, skip_missing: bool) -> Result<Vec<PairEntry>> {
    let mut out = Vec::new();
    for seq in list_sequences(root)? {
        let frames = list_frames(root, &seq)?;
        for w in frames.windows(2) {
            let target = root.join(target_dir).join(&seq).join(format!("{}.{ext}", w[0]));
            if skip_missing && !target.is_file() {
                continue;
            }
            let img = |f: &str| root.join(IMAGES_DIR).join(&seq).join(format!("{f}.png"));
            out.push(PairEntry {
                sequence: seq.clone(),
                frame: w[0].clone(),
                frame_t: img(&w[0]),
                frame_t1: img(&w[1]),
                target,
            });
        }
    }
    Ok(out)
}

/// Frame pairs annotated with masks only.
#[derive(Clone, Debug)]
pub struct SegDataset {
    pub entries: Vec<PairEntry>,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<FramePair> {
        let e = &self.entries[i];
        if !e.target.is_file() {
            return Err(Error::MissingAnnotation { path: e.target.clone() });
        }
        let mut pair = FramePair::new(read_frame(&e.frame_t)?, read_frame(&e.frame_t1)?);
        pair.mask_gt = Some(read_mask(&e.target)?);
        pair.validate()?;
        Ok(pair)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<FramePair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<FramePair>> {
        self.iter().collect()
    }
}

/// Frame pairs annotated with flow only.
#[derive(Clone, Debug)]
pub struct FlowDataset {
    pub entries: Vec<PairEntry>,
}

impl FlowDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<FramePair> {
        let e = &self.entries[i];
        if !e.target.is_file() {
            return Err(Error::MissingAnnotation { path: e.target.clone() });
        }
        let (flow, valid) = read_flo(&e.target)?.to_tensor();
        let mut pair = FramePair::new(read_frame(&e.frame_t)?, read_frame(&e.frame_t1)?);
        pair.flow_gt = Some(flow);
        pair.flow_valid = Some(valid);
        pair.validate()?;
        Ok(pair)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<FramePair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<FramePair>> {
        self.iter().collect()
    }
}

/// Index a segmentation dataset. With `skip_missing`, pairs whose first
/// frame lacks an annotation are dropped instead of failing on access.
pub fn load_davis_layout(root: impl AsRef<Path>, skip_missing: bool) -> Result<SegDataset> {
    Ok(SegDataset {
        entries: pair_entries(root.as_ref(), ANNOTATIONS_DIR, "png", skip_missing)?,
    })
}

/// Index a flow dataset (image pairs plus `.flo` files).
pub fn load_flow_dataset(root: impl AsRef<Path>, skip_missing: bool) -> Result<FlowDataset> {
    Ok(FlowDataset {
        entries: pair_entries(root.as_ref(), FLOW_DIR, "flo", skip_missing)?,
    })
}

/// A whole sequence with whatever ground truth is on disk, for evaluation.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub frame_names: Vec<String>,
    pub frames: Vec<Tensor>,
    pub masks: Vec<Option<Mask>>,
    /// Flow and validity for each transition, when every `.flo` exists.
    pub flows: Option<Vec<(Tensor, Mask)>>,
}

impl Sequence {
    /// In-memory sequence carrying every ground truth of a rendered scene.
    pub fn from_scene(id: &str, scene: &Scene) -> Self {
        Self {
            id: id.to_string(),
            frame_names: (0..scene.frames.len()).map(frame_name).collect(),
            frames: scene.frames.clone(),
            masks: scene.masks.iter().cloned().map(Some).collect(),
            flows: Some(scene.flows.iter().cloned().zip(scene.flow_valid.iter().cloned()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Pair `t → t+1` with whatever ground truth is present.
    pub fn pair(&self, t: usize) -> FramePair {
        let mut pair = FramePair::new(self.frames[t].clone(), self.frames[t + 1].clone());
        pair.mask_gt = self.masks[t].clone();
        if let Some(flows) = &self.flows {
            pair.flow_gt = Some(flows[t].0.clone());
            pair.flow_valid = Some(flows[t].1.clone());
        }
        pair
    }
}

pub fn load_sequence(root: impl AsRef<Path>, seq: &str) -> Result<Sequence> {
    let root = root.as_ref();
    let frame_names = list_frames(root, seq)?;
    if frame_names.len() < 2 {
        return Err(Error::Data(format!("sequence {seq} has fewer than 2 frames")));
    }
    let mut frames = Vec::with_capacity(frame_names.len());
    let mut masks = Vec::with_capacity(frame_names.len());
    for f in &frame_names {
        frames.push(read_frame(root.join(IMAGES_DIR).join(seq).join(format!("{f}.png")))?);
        let ann = root.join(ANNOTATIONS_DIR).join(seq).join(format!("{f}.png"));
        masks.push(if ann.is_file() { Some(read_mask(&ann)?) } else { None });
    }
    let flo_paths: Vec<PathBuf> = frame_names[..frame_names.len() - 1]
        .iter()
        .map(|f| root.join(FLOW_DIR).join(seq).join(format!("{f}.flo")))
        .collect();
    let flows = if flo_paths.iter().all(|p| p.is_file()) {
        Some(flo_paths.iter().map(|p| read_flo(p).map(|f| f.to_tensor())).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok(Sequence {
        id: seq.to_string(),
        frame_names,
        frames,
        masks,
        flows,
    })
}
