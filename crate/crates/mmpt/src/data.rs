//! Clip storage. A dataset root holds one directory per clip under its
//! split, with per-frame images, per-pair ground-truth pointmaps, and the
//! camera list; the root manifest enumerates the clips.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Scalar;
use crate::synth::CameraParams;
use crate::tensor::Tensor;
use crate::tokenize::Frame;

/// One loaded clip. Ground truth is pixel-major [H*W, 3]: `gt_ego[i]` holds
/// frame i's points in camera i, `gt_target[(i, j)]` holds frame j's points
/// in camera i.
pub struct Clip<S: Scalar> {
    pub name: String,
    pub frames: Vec<Frame<S>>,
    pub gt_ego: Vec<Tensor<S>>,
    pub gt_target: BTreeMap<(usize, usize), Tensor<S>>,
    pub cameras: Vec<CameraParams>,
}

impl<S: Scalar> Clip<S> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames at the given clip positions, keeping their original indices
    /// so relative timing stays visible downstream.
    pub fn window(&self, positions: &[usize]) -> Result<Vec<Frame<S>>> {
        positions
            .iter()
            .map(|&p| {
                self.frames.get(p).cloned().ok_or_else(|| {
                    Error::Dataset(format!(
                        "clip {} has {} frames, window wants frame {p}",
                        self.name,
                        self.frames.len()
                    ))
                })
            })
            .collect()
    }
}

/// Source of clips for training and evaluation.
pub trait ClipStore<S: Scalar> {
    fn names(&self) -> &[String];
    fn load(&self, name: &str) -> Result<Clip<S>>;
}

/// Clips held in memory, mainly for tests and synthetic-direct pipelines.
pub struct MemStore<S: Scalar> {
    clips: Vec<Clip<S>>,
    names: Vec<String>,
}

impl<S: Scalar> MemStore<S> {
    pub fn new(clips: Vec<Clip<S>>) -> Self {
        let names = clips.iter().map(|c| c.name.clone()).collect();
        Self { clips, names }
    }
}

impl<S: Scalar> ClipStore<S> for MemStore<S> {
    fn names(&self) -> &[String] {
        &self.names
    }

    fn load(&self, name: &str) -> Result<Clip<S>> {
        let clip = self
            .clips
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Dataset(format!("unknown clip {name:?}")))?;
        Ok(Clip {
            name: clip.name.clone(),
            frames: clip.frames.clone(),
            gt_ego: clip.gt_ego.clone(),
            gt_target: clip.gt_target.clone(),
            cameras: clip.cameras.clone(),
        })
    }
}

/// One split of an on-disk dataset.
pub struct DiskStore<S: Scalar> {
    split_dir: PathBuf,
    names: Vec<String>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> DiskStore<S> {
    /// Opens `<root>/<split>`, taking the clip list from the root manifest.
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        Self::open_filtered(root, split, None)
    }

    /// Opens `<root>/<split>` keeping only clips of one style.
    pub fn open_style(root: &Path, split: &str, style: crate::synth::Style) -> Result<Self> {
        Self::open_filtered(root, split, Some(style))
    }

    fn open_filtered(root: &Path, split: &str, style: Option<crate::synth::Style>) -> Result<Self> {
        let manifest = root.join("manifest.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut names = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry = line.split_whitespace().next().unwrap_or("");
            let Some((entry_split, clip)) = entry.split_once('/') else {
                return Err(Error::Dataset(format!("bad manifest line {line:?}")));
            };
            if entry_split != split {
                continue;
            }
            if let Some(want) = style {
                let tagged = line
                    .split_whitespace()
                    .find_map(|tok| tok.strip_prefix("style="))
                    .ok_or_else(|| Error::Dataset(format!("manifest line lacks style: {line:?}")))?;
                if tagged != want.name() {
                    continue;
                }
            }
            names.push(clip.to_string());
        }
        if names.is_empty() {
            let styled = style.map(|s| format!(" {} ", s.name())).unwrap_or_else(|| " ".into());
            return Err(Error::Dataset(format!(
                "no{styled}{split:?} clips listed in {}",
                manifest.display()
            )));
        }
        names.sort();
        Ok(Self {
            split_dir: root.join(split),
            names,
            _marker: std::marker::PhantomData,
        })
    }
}

fn load_map<S: Scalar>(path: &Path) -> Result<(Tensor<S>, usize, usize)> {
    // Absent ground truth is a dataset defect, not a generic I/O failure.
    let t = match io::read_tensor::<S>(path) {
        Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Dataset(format!(
                "missing ground truth {}",
                path.display()
            )));
        }
        other => other?,
    };
    let shape = t.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Dataset(format!(
            "{} has shape {shape:?}, expected [rows, cols, 3]",
            path.display()
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    Ok((t.reshaped(&[h * w, 3])?, h, w))
}

impl<S: Scalar> ClipStore<S> for DiskStore<S> {
    fn names(&self) -> &[String] {
        &self.names
    }

    fn load(&self, name: &str) -> Result<Clip<S>> {
        if !self.names.iter().any(|n| n == name) {
            return Err(Error::Dataset(format!("clip {name:?} not in manifest")));
        }
        let dir = self.split_dir.join(name);

        let cam_path = dir.join("cameras.txt");
        let cam_text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
        let cameras: Vec<CameraParams> = cam_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(CameraParams::from_line)
            .collect::<Result<_>>()?;
        let n = cameras.len();
        if n == 0 {
            return Err(Error::Dataset(format!("{} lists no cameras", cam_path.display())));
        }

        let mut frames = Vec::with_capacity(n);
        let mut gt_ego = Vec::with_capacity(n);
        let mut gt_target = BTreeMap::new();
        for i in 0..n {
            let px = io::read_tensor::<S>(&dir.join(format!("frame_{i}.mmpt")))?;
            frames.push(Frame::new(i, px)?);
            let (ego, _, _) = load_map::<S>(&dir.join(format!("gt_X_{i}.mmpt")))?;
            gt_ego.push(ego);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (y, _, _) = load_map::<S>(&dir.join(format!("gt_Y_{j}_{i}.mmpt")))?;
                gt_target.insert((i, j), y);
            }
        }
        Ok(Clip {
            name: name.to_string(),
            frames,
            gt_ego,
            gt_target,
            cameras,
        })
    }
}

/// Builds an in-memory clip straight from a rendered scene.
pub fn clip_from_raw<S: Scalar>(name: &str, raw: &crate::synth::RawClip) -> Result<Clip<S>> {
    let n = raw.pixels.len();
    let mut frames = Vec::with_capacity(n);
    let mut gt_ego = Vec::with_capacity(n);
    let mut gt_target = BTreeMap::new();
    for i in 0..n {
        frames.push(Frame::new(i, raw.pixels[i].cast::<S>())?);
        let shape = raw.world_points[i].shape().to_vec();
        let flat = [shape[0] * shape[1], 3];
        let x = crate::synth::points_to_camera(&raw.world_points[i], &raw.cameras[i]);
        gt_ego.push(x.cast::<S>().reshaped(&flat)?);
        for j in 0..n {
            if i == j {
                continue;
            }
            let y = crate::synth::points_to_camera(&raw.world_points[j], &raw.cameras[i]);
            gt_target.insert((i, j), y.cast::<S>().reshaped(&flat)?);
        }
    }
    Ok(Clip {
        name: name.to_string(),
        frames,
        gt_ego,
        gt_target,
        cameras: raw.cameras.clone(),
    })
}
