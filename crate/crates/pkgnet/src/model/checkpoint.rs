//! Checkpoint save/load: student parameters, optimizer moments, epoch, and
//! the full run config, in one tensor archive.
//!
//! The archive meta embeds the student config and teacher spec, so a loaded
//! checkpoint can rebuild the exact model (and a compatible teacher) without
//! the original config file; the original config text rides along verbatim
//! for provenance and for resuming.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayD};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::student::{build_student, Student, StudentConfig, TapSpec};
use crate::model::teacher::TeacherSpec;
use crate::model::tensorfile;
use crate::nn::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub student: Student,
    pub teacher_spec: TeacherSpec,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    /// The training config exactly as it was when the checkpoint was written.
    pub config_toml: String,
}

pub fn save_checkpoint(
    path: &Path,
    student: &Student,
    teacher_spec: &TeacherSpec,
    optimizer: Option<&Adam>,
    epoch: usize,
    config_toml: &str,
) -> Result<()> {
    let mut tensors: BTreeMap<String, ArrayD<f32>> = student
        .named_params()
        .into_iter()
        .map(|(k, v)| (format!("param.{k}"), v))
        .collect();

    let mut meta = json!({
        "format": "pkgnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "student_config": serde_json::to_value(student.config()).expect("config serializes"),
        "teacher_spec": serde_json::to_value(teacher_spec).expect("spec serializes"),
        "config_toml": config_toml,
    });
    if let Some(adam) = optimizer {
        let (steps, m, v) = adam.export_state();
        for (k, vals) in m {
            tensors.insert(format!("opt.m.{k}"), Array1::from_vec(vals).into_dyn());
        }
        for (k, vals) in v {
            tensors.insert(format!("opt.v.{k}"), Array1::from_vec(vals).into_dyn());
        }
        meta["optimizer"] = json!({
            "step_count": steps,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
        });
    }
    tensorfile::write(path, &meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let archive = tensorfile::read(path)?;
    let meta = &archive.meta;
    if meta.get("format").and_then(|v| v.as_str()) != Some("pkgnet-checkpoint") {
        return Err(Error::Archive(format!(
            "{}: not a checkpoint (format tag missing)",
            path.display()
        )));
    }
    let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Archive(format!(
            "{}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let student_cfg: StudentConfig = serde_json::from_value(meta["student_config"].clone())
        .map_err(|e| Error::Archive(format!("{}: bad student_config: {e}", path.display())))?;
    let teacher_spec: TeacherSpec = serde_json::from_value(meta["teacher_spec"].clone())
        .map_err(|e| Error::Archive(format!("{}: bad teacher_spec: {e}", path.display())))?;
    let epoch = meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let config_toml = meta
        .get("config_toml")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();

    let params: BTreeMap<String, ArrayD<f32>> = archive
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("param.").map(|n| (n.to_string(), v.clone())))
        .collect();
    // Seed is irrelevant here: every parameter is overwritten from the file.
    let tap = TapSpec::build(&teacher_spec, &student_cfg)?;
    let mut student = build_student(&student_cfg, tap, 0)?;
    student.load_params(&params)?;

    let optimizer = match meta.get("optimizer") {
        Some(o) => {
            let steps = o.get("step_count").and_then(|v| v.as_u64()).ok_or_else(|| {
                Error::Archive(format!("{}: optimizer state lacks step_count", path.display()))
            })?;
            let beta1 = o.get("beta1").and_then(|v| v.as_f64()).unwrap_or(0.9);
            let beta2 = o.get("beta2").and_then(|v| v.as_f64()).unwrap_or(0.999);
            let collect = |prefix: &str| -> BTreeMap<String, Vec<f32>> {
                archive
                    .tensors
                    .iter()
                    .filter_map(|(k, v)| {
                        k.strip_prefix(prefix).map(|n| (n.to_string(), v.iter().copied().collect()))
                    })
                    .collect()
            };
            let mut adam = Adam::new(beta1, beta2);
            adam.import_state(steps, collect("opt.m."), collect("opt.v."));
            Some(adam)
        }
        None => None,
    };

    Ok(LoadedCheckpoint { student, teacher_spec, optimizer, epoch, config_toml })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::student::{Mode, StudentConfig};
    use crate::model::teacher::Backbone;
    use ndarray::Array4;

    fn setup() -> (Student, TeacherSpec) {
        let tspec = TeacherSpec {
            backbone: Backbone::Resnet18,
            pretrained_weights: "seeded:5".into(),
            tap_blocks: vec![1, 2],
        };
        let cfg = StudentConfig { base_width: 8, bottleneck_depth: 1, ..StudentConfig::default() };
        let student = build_student(&cfg, TapSpec::build(&tspec, &cfg).unwrap(), 21).unwrap();
        (student, tspec)
    }

    #[test]
    fn roundtrip_restores_bit_identical_params_and_config() {
        let (student, tspec) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pkgt");
        save_checkpoint(&path, &student, &tspec, None, 17, "epochs = 17\n").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.config_toml, "epochs = 17\n");
        assert_eq!(loaded.teacher_spec.tap_blocks, vec![1, 2]);
        assert!(loaded.optimizer.is_none());
        let a = student.named_params();
        let b = loaded.student.named_params();
        assert_eq!(a.len(), b.len());
        for (k, v) in &a {
            for (x, y) in v.iter().zip(b[k].iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {k} drifted");
            }
        }
    }

    #[test]
    fn optimizer_state_roundtrips_and_training_can_resume() {
        let (mut student, tspec) = setup();
        let mut adam = Adam::new(0.9, 0.999);
        // Take two real steps so moments are non-trivial.
        let x = Array4::from_shape_fn((2, 12, 32, 32), |(n, c, i, j)| {
            ((n + c + i + j) % 9) as f32 / 9.0
        });
        for _ in 0..2 {
            let (pred, _taps, cache) = student.forward_train(&x.view()).unwrap();
            let gpred = pred.mapv(|v| 2.0 * v / pred.len() as f32);
            let grads = student.backward(&cache, &gpred, &Default::default());
            adam.step(&mut student.param_slices_mut(), &grads, 1e-3);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pkgt");
        save_checkpoint(&path, &student, &tspec, Some(&adam), 2, "").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored = loaded.optimizer.expect("optimizer saved");
        assert_eq!(restored.step_count(), adam.step_count());
        let (_, m0, v0) = adam.export_state();
        let (_, m1, v1) = restored.export_state();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn unknown_version_is_an_explicit_error() {
        let (student, tspec) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pkgt");
        save_checkpoint(&path, &student, &tspec, None, 0, "").unwrap();
        // Rewrite the meta with a bumped version.
        let mut archive = tensorfile::read(&path).unwrap();
        archive.meta["version"] = serde_json::json!(999);
        tensorfile::write(&path, &archive.meta, &archive.tensors).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version 999"), "{err}");
    }

    #[test]
    fn non_checkpoint_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.pkgt");
        tensorfile::write(&path, &serde_json::json!({"format": "other"}), &BTreeMap::new()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn ae_only_checkpoint_roundtrips() {
        let tspec = TeacherSpec {
            backbone: Backbone::Resnet18,
            pretrained_weights: "seeded:5".into(),
            tap_blocks: vec![1, 2],
        };
        let cfg = StudentConfig {
            mode: Mode::AeOnly,
            base_width: 8,
            bottleneck_depth: 1,
            ..StudentConfig::default()
        };
        let student = build_student(&cfg, TapSpec::build(&tspec, &cfg).unwrap(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.pkgt");
        save_checkpoint(&path, &student, &tspec, None, 1, "").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.student.config().mode, Mode::AeOnly);
        assert_eq!(loaded.student.tap_spec().k(), 0);
    }
}
