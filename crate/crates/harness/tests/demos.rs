mod common;

use std::fs;
use std::path::Path;

use cubic_core::perception::EncoderMode;
use cubic_core::simworld::{rollout_expert, TaskId, TaskSpec};
use cubic_harness::dataset::{self, Dataset};

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn hundred_successful_dual_reach_demonstrations() {
    let data = dataset::generate(TaskId::DualReach, 100, 0, 4);
    let m = &data.manifest;
    assert_eq!(m.count, 100);
    assert_eq!(m.lengths.len(), 100);
    assert_eq!(m.lengths.iter().sum::<usize>(), data.len());
    assert_eq!(data.observations.len(), data.len());
    let spec = TaskSpec::new(TaskId::DualReach);
    for &i in m.episode_indices.iter().step_by(10) {
        assert!(rollout_expert::<f32>(&spec, 0, i).success);
    }
    assert!(m.norm.min.iter().zip(&m.norm.max).all(|(a, b)| a <= b));
}

#[test]
fn empty_dataset_has_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset::generate(TaskId::Handover, 0, 3, 1);
    assert!(data.is_empty());
    data.save(tmp.path()).unwrap();
    let back = Dataset::load(tmp.path()).unwrap();
    assert_eq!(back.manifest.count, 0);
    assert_eq!(back.manifest.task, TaskId::Handover);
    assert!(back.is_empty());
}

#[test]
fn regeneration_is_byte_identical_for_any_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    dataset::generate(TaskId::BarLift, 6, 11, 1).save(a.path()).unwrap();
    dataset::generate(TaskId::BarLift, 6, 11, 3).save(b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    dataset::generate(TaskId::BarLift, 6, 12, 1).save(c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn saved_demonstrations_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::demos(TaskId::Handover, 3);
    data.save(tmp.path()).unwrap();
    assert_eq!(Dataset::load(tmp.path()).unwrap(), data);
}

#[test]
fn action_chunks_are_normalized_and_padded_with_holds() {
    let data = common::demos(TaskId::DualReach, 2);
    let chunks = data.action_chunks(8);
    assert_eq!(chunks.len(), data.len());
    assert!(chunks.iter().all(|c| c.len() == 8 * 6));
    assert!(chunks.iter().flatten().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
    let last = data.episode_starts()[1] - 1;
    let tail = &chunks[last];
    let hold = data.manifest.norm.normalize(&[0.0; 6]);
    for row in tail.chunks(6).skip(1) {
        for arm in 0..2 {
            for j in 0..2 {
                assert!((row[arm * 3 + j] as f64 - hold[arm * 3 + j]).abs() < 1e-6);
            }
            assert_eq!(row[arm * 3 + 2], tail[arm * 3 + 2]);
        }
    }
}

#[test]
fn image_observations_are_rendered_from_stored_states() {
    let data = common::demos(TaskId::DualReach, 1);
    let obs = data.observation(0, EncoderMode::Images);
    assert_eq!(obs.head_feat.shape().len(), 3);
    assert_eq!(data.observation(0, EncoderMode::Features), data.observations[0]);
}
