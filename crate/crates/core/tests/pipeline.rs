use std::fs;
use std::path::Path;

use musicdet::checkpoint::Checkpoint;
use musicdet::eval;
use musicdet::manifest::{Label, Manifest, ManifestEntry, Split};
use musicdet::synth::{self, CorpusItem};
use musicdet::train::{self, TrainConfig, TrainError, TrainMode};

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 3,
        hidden: 4,
        band_steps: 1,
        global_steps: 1,
        ..TrainConfig::default()
    }
}

fn small_corpus(dir: &Path) -> Manifest {
    let mut items = Vec::new();
    for i in 0..5 {
        items.push(CorpusItem {
            label: Label::Real,
            split: Split::Train,
            seed: synth::clip_seed(3, i),
        });
        items.push(CorpusItem {
            label: Label::Fake,
            split: Split::Train,
            seed: synth::clip_seed(3, 100 + i),
        });
    }
    for i in 0..2 {
        for label in [Label::Real, Label::Fake] {
            items.push(CorpusItem {
                label,
                split: Split::Test,
                seed: synth::clip_seed(3, 200 + i),
            });
        }
    }
    Manifest::read(synth::write_corpus(dir, &items).unwrap()).unwrap()
}

#[test]
fn one_class_training_never_opens_fake_clips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let mut poisoned = manifest.clone();
    for e in poisoned.entries.iter_mut().filter(|e| e.label == Label::Fake) {
        e.path = "does/not/exist.wav".into();
    }
    let clean = train::train(&manifest, &quick_config()).unwrap();
    let dirty = train::train(&poisoned, &quick_config()).unwrap();
    assert_eq!(clean.to_bytes(), dirty.to_bytes());

    // the same manifest breaks class-conditional training, which does read fakes
    let cond = TrainConfig {
        mode: TrainMode::ClassConditional,
        ..quick_config()
    };
    assert!(matches!(train::train(&poisoned, &cond), Err(TrainError::Clip { .. })));
    assert!(train::train(&manifest, &cond).is_ok());
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let a = train::train(&manifest, &quick_config()).unwrap();
    let b = train::train(&manifest, &quick_config()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.log.len(), 2);

    let path = dir.path().join("m.mdt");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), fs::read(&path).unwrap());
    let (before, _) = eval::score_dataset(&a.model, &manifest, Some(Split::Test), true).unwrap();
    let (after, _) = eval::score_dataset(&loaded.model, &manifest, Some(Split::Test), true).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.len(), 4);
}

#[test]
fn rejected_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let empty = Manifest {
        entries: Vec::new(),
        base_dir: dir.path().to_path_buf(),
    };
    assert!(matches!(
        train::train(&empty, &quick_config()),
        Err(TrainError::NoTrainingData)
    ));
    let reals_only = Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.label == Label::Real)
            .cloned()
            .collect(),
        base_dir: manifest.base_dir.clone(),
    };
    let cond = TrainConfig {
        mode: TrainMode::ClassConditional,
        ..quick_config()
    };
    assert!(matches!(
        train::train(&reals_only, &cond),
        Err(TrainError::NoFakeTrainingData)
    ));
}

#[test]
fn unreadable_clips_are_skipped_or_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = small_corpus(dir.path());
    let model = train::train(&manifest, &quick_config()).unwrap().model;
    manifest.entries.push(ManifestEntry {
        path: "missing.wav".into(),
        label: Label::Fake,
        split: Split::Test,
    });
    let (records, skipped) = eval::score_dataset(&model, &manifest, Some(Split::Test), false).unwrap();
    assert_eq!((records.len(), skipped), (4, 1));
    assert!(matches!(
        eval::score_dataset(&model, &manifest, Some(Split::Test), true),
        Err(eval::EvalError::Clip { .. })
    ));
}
