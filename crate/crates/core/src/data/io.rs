//! On-disk silhouette datasets.
//!
//! Layout: `root/<subject>/<condition>-<nn>/<view>/<frame>.png`, where the
//! subject directory is the numeric identity, the condition prefix is a
//! walking condition tag (`nm`, `bg`, `cl`, ...), the view is in degrees,
//! and the frame file stem ends in its index. Exported streams add a
//! `stream.json` manifest listing every split membership.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::{Condition, SilhouetteSequence};
use crate::error::{GaitError, Result};
use crate::eval::{Protocol, StepDataset};

pub const MANIFEST: &str = "stream.json";

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| GaitError::io(dir, e))? {
        let p = e.map_err(|e| GaitError::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Trailing decimal digits of a file stem.
fn frame_index(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_string_lossy().into_owned();
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().ok()
}

/// Nearest-neighbour resize of a grayscale image into `[0,1]` values.
fn resize_nearest(img: &GrayImage, h: usize, w: usize) -> ndarray::Array2<f64> {
    let (sw, sh) = img.dimensions();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * sh as f64 / h as f64).floor().min(sh as f64 - 1.0) as u32;
        let sx = ((x as f64 + 0.5) * sw as f64 / w as f64).floor().min(sw as f64 - 1.0) as u32;
        img.get_pixel(sx, sy).0[0] as f64 / 255.0
    })
}

fn read_sequence(dir: &Path, h: usize, w: usize) -> Result<Option<Array3<f64>>> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| GaitError::io(dir, e))? {
        let p = e.map_err(|e| GaitError::io(dir, e))?.path();
        if p.is_file() {
            match frame_index(&p) {
                Some(i) => files.push((i, p)),
                None => log::warn!("ignoring {}: no frame index in the file name", p.display()),
            }
        }
    }
    if files.is_empty() {
        log::warn!("skipping empty sequence directory {}", dir.display());
        return Ok(None);
    }
    files.sort();
    let mut frames = Array3::<f64>::zeros((files.len(), h, w));
    for (k, (_, p)) in files.iter().enumerate() {
        let img = image::open(p).map_err(|e| GaitError::Data(format!("cannot read frame {}: {e}", p.display())))?;
        frames.index_axis_mut(ndarray::Axis(0), k).assign(&resize_nearest(&img.to_luma8(), h, w));
    }
    Ok(Some(frames))
}

/// Loads every sequence under `root`, resized to `h x w`. Keys are the
/// `subject/condition/view` relative paths.
pub fn ingest_directory(root: &Path, h: usize, w: usize, domain_id: u32) -> Result<Vec<SilhouetteSequence>> {
    if !root.is_dir() {
        return Err(GaitError::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for subject in sorted_dirs(root)? {
        let sname = name(&subject);
        let identity: u32 = sname
            .parse()
            .map_err(|_| GaitError::Data(format!("subject directory `{}` is not a numeric identity", subject.display())))?;
        for cond in sorted_dirs(&subject)? {
            let cname = name(&cond);
            let condition = Condition::parse(cname.split('-').next().unwrap_or(&cname));
            for view in sorted_dirs(&cond)? {
                let vname = name(&view);
                let angle = vname.parse().unwrap_or_else(|_| {
                    log::warn!("view directory `{vname}` is not numeric; recording view 0");
                    0
                });
                if let Some(frames) = read_sequence(&view, h, w)? {
                    let key = format!("{sname}/{cname}/{vname}");
                    out.push(SilhouetteSequence::new(key, frames, identity, domain_id, condition.clone(), angle)?);
                }
            }
        }
    }
    Ok(out)
}

/// Writes sequences as PNG frames in the ingestible layout. Each key must
/// be its `subject/condition/view` path.
pub fn export_sequences(root: &Path, seqs: &[SilhouetteSequence]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for s in seqs {
        let dir = root.join(&s.key);
        fs::create_dir_all(&dir).map_err(|e| GaitError::io(&dir, e))?;
        let (t, h, w) = s.frames.dim();
        for k in 0..t {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([(s.frames[[k, y as usize, x as usize]] * 255.0).round() as u8])
            });
            let path = dir.join(format!("{:04}.png", k + 1));
            img.save(&path).map_err(|e| GaitError::Data(format!("cannot write {}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub name: String,
    pub domain_id: u32,
    pub protocol: Protocol,
    pub train: Vec<String>,
    pub gallery: Vec<String>,
    pub probe: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub frame_height: usize,
    pub frame_width: usize,
    pub steps: Vec<StepManifest>,
}

/// Exports every sequence of a stream and its manifest; returns all paths
/// written, manifest last.
pub fn export_stream(root: &Path, stream: &[StepDataset]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut steps = Vec::new();
    let (mut fh, mut fw) = (0, 0);
    for s in stream {
        for set in [&s.train, &s.gallery, &s.probe] {
            written.extend(export_sequences(root, set)?);
            if let Some(q) = set.first() {
                (fh, fw) = q.resolution();
            }
        }
        let keys = |v: &[SilhouetteSequence]| v.iter().map(|q| q.key.clone()).collect();
        steps.push(StepManifest {
            name: s.name.clone(),
            domain_id: s.domain_id,
            protocol: s.protocol,
            train: keys(&s.train),
            gallery: keys(&s.gallery),
            probe: keys(&s.probe),
        });
    }
    let manifest = StreamManifest { frame_height: fh, frame_width: fw, steps };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| GaitError::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| GaitError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn read_manifest(root: &Path) -> Result<StreamManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| GaitError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| GaitError::Data(format!("bad manifest {}: {e}", path.display())))
}

/// Rebuilds an exported stream, resizing frames to `h x w`.
pub fn load_stream(root: &Path, h: usize, w: usize) -> Result<Vec<StepDataset>> {
    let manifest = read_manifest(root)?;
    let all: BTreeMap<String, SilhouetteSequence> =
        ingest_directory(root, h, w, 0)?.into_iter().map(|s| (s.key.clone(), s)).collect();
    let mut out = Vec::new();
    for m in manifest.steps {
        let pick = |keys: &[String]| -> Result<Vec<SilhouetteSequence>> {
            keys.iter()
                .map(|k| {
                    let mut s = all.get(k).cloned().ok_or_else(|| GaitError::Data(format!("manifest sequence `{k}` not found")))?;
                    s.domain_id = m.domain_id;
                    Ok(s)
                })
                .collect()
        };
        out.push(StepDataset::new(m.name.clone(), m.domain_id, m.protocol, pick(&m.train)?, pick(&m.gallery)?, pick(&m.probe)?)?);
    }
    Ok(out)
}
