//! Dataset persistence: JSONL scenes, the metadata sidecar, the
//! evaluation-section firewall, and ground-truth proposal synthesis.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DatasetMeta, GenError, Proposal, Scene};

/// How much of a dataset the caller is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Everything, including per-query evaluation sections.
    Full,
    /// Weak supervision only: evaluation sections are stripped on load, so
    /// downstream code cannot touch gold target ids even by accident.
    Weak,
}

/// Path of the metadata sidecar that accompanies `dataset_path`.
pub fn meta_path_for(dataset_path: &str) -> String {
    format!("{dataset_path}.meta.json")
}

/// Writes scenes as one JSON object per line plus a `<path>.meta.json`
/// sidecar holding the vocabulary and generation parameters. Returns the
/// sidecar path.
pub fn write_dataset(scenes: &[Scene], meta: &DatasetMeta, path: &str) -> Result<String, GenError> {
    if let Some(dir) = Path::new(path).parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| GenError::Dataset {
        path: path.to_string(),
        msg: e.to_string(),
    })?);
    for scene in scenes {
        serde_json::to_writer(&mut out, scene)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let meta_path = meta_path_for(path);
    let mut mout = BufWriter::new(File::create(&meta_path)?);
    serde_json::to_writer_pretty(&mut mout, meta)?;
    mout.write_all(b"\n")?;
    mout.flush()?;
    Ok(meta_path)
}

/// Loads a JSONL dataset. `LoadMode::Weak` nulls every evaluation section
/// before returning.
pub fn load_dataset(path: &str, mode: LoadMode) -> Result<Vec<Scene>, GenError> {
    let file = File::open(path).map_err(|e| GenError::Dataset {
        path: path.to_string(),
        msg: e.to_string(),
    })?;
    let mut scenes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut scene: Scene = serde_json::from_str(&line).map_err(|e| GenError::Dataset {
            path: path.to_string(),
            msg: format!("line {}: {}", lineno + 1, e),
        })?;
        validate_scene(&scene, path, lineno + 1)?;
        if mode == LoadMode::Weak {
            for q in &mut scene.queries {
                q.eval = None;
            }
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

fn validate_scene(scene: &Scene, path: &str, lineno: usize) -> Result<(), GenError> {
    let bad = |msg: String| GenError::Dataset {
        path: path.to_string(),
        msg: format!("line {lineno} ({}): {msg}", scene.scene_id),
    };
    for (i, o) in scene.objects.iter().enumerate() {
        if o.id != i {
            return Err(bad(format!("object ids must be 0..n in order, got {} at {i}", o.id)));
        }
    }
    for q in &scene.queries {
        if let Some(eval) = &q.eval {
            if scene.object(eval.target_id).is_none() {
                return Err(bad(format!(
                    "query \"{}\" names missing object {}",
                    q.text, eval.target_id
                )));
            }
        }
    }
    for p in &scene.proposals {
        let s: f64 = p.det_likelihood.iter().sum();
        if p.det_likelihood.is_empty() || (s - 1.0).abs() > 1e-6 {
            return Err(bad(format!("proposal det_likelihood sums to {s}, want 1")));
        }
    }
    Ok(())
}

/// Loads the metadata sidecar for `dataset_path`.
pub fn load_meta(dataset_path: &str) -> Result<DatasetMeta, GenError> {
    let meta_path = meta_path_for(dataset_path);
    let file = File::open(&meta_path).map_err(|e| GenError::Dataset {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Copies `in_path` to `out_path` with every evaluation section removed,
/// carrying the metadata sidecar along unchanged. The output is otherwise
/// byte-identical to re-serializing the input, so diffing a scrubbed file
/// against its source shows exactly the eval removals.
pub fn scrub_eval_sections(in_path: &str, out_path: &str) -> Result<(), GenError> {
    let scenes = load_dataset(in_path, LoadMode::Weak)?;
    let meta = load_meta(in_path)?;
    write_dataset(&scenes, &meta, out_path)?;
    Ok(())
}

/// Builds the idealized proposal set used by ground-truth-mode evaluation:
/// one proposal per annotated object, in object order, with the exact box,
/// full confidence, a one-hot class likelihood, and the category's prototype
/// appearance.
pub fn gt_proposals(scene: &Scene, meta: &DatasetMeta) -> Result<Vec<Proposal>, GenError> {
    let c = meta.vocab.len();
    scene
        .objects
        .iter()
        .map(|o| {
            if o.category >= c {
                return Err(GenError::Vocab(format!(
                    "object {} in {} has category {} but the vocabulary has {c} entries",
                    o.id, scene.scene_id, o.category
                )));
            }
            let mut det = vec![0.0; c];
            det[o.category] = 1.0;
            Ok(Proposal {
                box3: o.box3,
                confidence: 1.0,
                det_likelihood: det,
                appearance: meta.vocab.prototypes[o.category].clone(),
                matched_object: Some(o.id),
            })
        })
        .collect()
}
