//! Teacher/student model pair.
//!
//! The [`Teacher`] is a frozen pretrained backbone that exposes block-level
//! feature taps; the [`Student`] is a trainable auto-encoder that predicts
//! the next frame from past frames while producing feature maps that
//! shape-match the tapped teacher blocks. [`forward`] runs one clip through
//! both and pairs up the taps.

pub mod checkpoint;
pub mod student;
pub mod teacher;
pub mod tensorfile;

use std::collections::BTreeMap;

use ndarray::Array3;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use student::{
    build_student, Mode, Student, StudentCache, StudentConfig, StudentStage, TapPair, TapSpec,
    INPUT_SIDE,
};
pub use teacher::{build_teacher, Backbone, Teacher, TeacherSpec, ENV_TEACHER_CACHE};

use crate::data::STClip;
use crate::error::{Error, Result};

/// One clip's worth of model outputs: the predicted future frame plus the
/// paired student/teacher feature taps (same keys, same shapes).
pub struct ForwardOutput {
    pub prediction: Array3<f32>,
    pub student_taps: BTreeMap<usize, Array3<f32>>,
    pub teacher_taps: BTreeMap<usize, Array3<f32>>,
}

/// Runs one spatio-temporal clip through the pair: the first `input_frames`
/// frames (channel-concatenated) feed the student, the final frame feeds the
/// teacher. `teacher` may be `None` only when the student runs
/// prediction-only ([`Mode::AeOnly`]), where both tap maps come back empty.
pub fn forward(student: &Student, teacher: Option<&Teacher>, clip: &STClip) -> Result<ForwardOutput> {
    let cfg = student.config();
    let (t, c, h, w) = clip.cube.dim();
    if t != cfg.input_frames + 1 || c != cfg.channels_per_frame {
        return Err(Error::ShapeMismatch {
            context: "clip fed to forward (frames, channels, h, w)",
            left: vec![t, c, h, w],
            right: vec![cfg.input_frames + 1, cfg.channels_per_frame, INPUT_SIDE, INPUT_SIDE],
        });
    }

    let past = clip.past_frames_channel_stacked();
    let (n, cc, hh, ww) = (1, past.dim().0, past.dim().1, past.dim().2);
    let x = past.into_shape_with_order((n, cc, hh, ww)).unwrap();
    let (pred, student_taps_b) = student.forward(&x.view())?;
    let prediction = pred.index_axis(ndarray::Axis(0), 0).to_owned();
    let student_taps: BTreeMap<usize, Array3<f32>> = student_taps_b
        .into_iter()
        .map(|(k, v)| (k, v.index_axis(ndarray::Axis(0), 0).to_owned()))
        .collect();

    let teacher_taps: BTreeMap<usize, Array3<f32>> = if cfg.mode == Mode::AeOnly {
        BTreeMap::new()
    } else {
        let teacher = teacher.ok_or_else(|| {
            Error::Model(format!("mode '{}' needs a teacher, none was provided", cfg.mode))
        })?;
        teacher.tap(&clip.target_frame())?
    };

    if student_taps.keys().ne(teacher_taps.keys()) {
        return Err(Error::Model(format!(
            "student taps {:?} and teacher taps {:?} disagree; student and teacher were built from different specs",
            student_taps.keys().collect::<Vec<_>>(),
            teacher_taps.keys().collect::<Vec<_>>()
        )));
    }
    Ok(ForwardOutput { prediction, student_taps, teacher_taps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::STClip;
    use ndarray::Array4;

    fn clip(frames: usize, fill: impl Fn(usize, usize, usize, usize) -> f32) -> STClip {
        STClip {
            video_id: "v".into(),
            frame_index: frames - 1,
            cube: Array4::from_shape_fn((frames, 3, 32, 32), |(t, c, i, j)| fill(t, c, i, j)),
        }
    }

    fn pair() -> (Student, Teacher) {
        let tspec = TeacherSpec {
            backbone: Backbone::Resnet18,
            pretrained_weights: "seeded:3".into(),
            tap_blocks: vec![1, 2],
        };
        let cfg = StudentConfig { base_width: 8, bottleneck_depth: 1, ..StudentConfig::default() };
        let student = build_student(&cfg, TapSpec::build(&tspec, &cfg).unwrap(), 11).unwrap();
        let teacher = build_teacher(&tspec).unwrap();
        (student, teacher)
    }

    #[test]
    fn five_frame_clip_produces_paired_taps() {
        let (student, teacher) = pair();
        let out = forward(&student, Some(&teacher), &clip(5, |t, _, i, j| {
            ((t + i + j) % 7) as f32 / 7.0
        }))
        .unwrap();
        assert_eq!(out.prediction.dim(), (3, 32, 32));
        let keys: Vec<usize> = out.student_taps.keys().copied().collect();
        assert_eq!(keys, vec![1, 2]);
        assert_eq!(
            out.student_taps.keys().collect::<Vec<_>>(),
            out.teacher_taps.keys().collect::<Vec<_>>()
        );
        for k in keys {
            assert_eq!(out.student_taps[&k].dim(), out.teacher_taps[&k].dim());
        }
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let (student, teacher) = pair();
        assert!(forward(&student, Some(&teacher), &clip(3, |_, _, _, _| 0.5)).is_err());
    }

    #[test]
    fn teacher_sees_only_the_final_frame() {
        let (student, teacher) = pair();
        // Two clips identical except for the final frame: the student input
        // (past frames) is unchanged, the teacher input differs.
        let a = clip(5, |t, _, i, j| if t == 4 { 0.2 } else { ((i + j) % 5) as f32 / 5.0 });
        let b = clip(5, |t, _, i, j| if t == 4 { 0.8 } else { ((i + j) % 5) as f32 / 5.0 });
        let oa = forward(&student, Some(&teacher), &a).unwrap();
        let ob = forward(&student, Some(&teacher), &b).unwrap();
        assert_eq!(oa.prediction, ob.prediction);
        assert_ne!(oa.teacher_taps[&2], ob.teacher_taps[&2]);
    }

    #[test]
    fn ae_only_runs_without_a_teacher() {
        let tspec = TeacherSpec {
            backbone: Backbone::Resnet18,
            pretrained_weights: "seeded:3".into(),
            tap_blocks: vec![1, 2],
        };
        let cfg = StudentConfig {
            mode: Mode::AeOnly,
            base_width: 8,
            bottleneck_depth: 1,
            ..StudentConfig::default()
        };
        let student = build_student(&cfg, TapSpec::build(&tspec, &cfg).unwrap(), 1).unwrap();
        let out = forward(&student, None, &clip(5, |_, _, _, _| 0.5)).unwrap();
        assert!(out.student_taps.is_empty() && out.teacher_taps.is_empty());
    }

    #[test]
    fn pkg_mode_without_teacher_is_an_error() {
        let (student, _) = pair();
        assert!(forward(&student, None, &clip(5, |_, _, _, _| 0.5)).is_err());
    }

    #[test]
    fn repeated_eval_forwards_are_identical() {
        let (student, teacher) = pair();
        let c = clip(5, |t, c, i, j| ((t * 31 + c * 17 + i * 3 + j) % 19) as f32 / 19.0);
        let a = forward(&student, Some(&teacher), &c).unwrap();
        let b = forward(&student, Some(&teacher), &c).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.student_taps[&1], b.student_taps[&1]);
        assert_eq!(a.teacher_taps[&1], b.teacher_taps[&1]);
    }
}
