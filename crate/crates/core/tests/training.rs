mod common;

use common::small_train_config;
use wrfgs::checkpoint;
use wrfgs::dataset::{self, generate, Dataset, GenConfig, Split};
use wrfgs::scene::Pipeline;
use wrfgs::tasks::TaskKind;
use wrfgs::train::trainer;

fn tiny_dataset(task: TaskKind) -> Dataset {
    generate(&GenConfig { task, n_train: 6, n_eval: 3, spectrum_h: 18, spectrum_w: 72, ..GenConfig::default() }).unwrap()
}

#[test]
fn identical_runs_are_byte_identical() {
    let ds = tiny_dataset(TaskKind::Spectrum);
    let cfg = small_train_config(Pipeline::WrfGsPlus);
    let run = || {
        let mut ck = trainer::initialize(&ds, &cfg).unwrap();
        let mut log = Vec::new();
        trainer::run(&ds, &mut ck, None, &mut |l| log.push((l.iteration, l.loss))).unwrap();
        let csv = trainer::evaluate(&ck.trained, &ds, Split::Eval).unwrap().to_csv();
        (checkpoint::encode(&ck), csv, log)
    };
    let (a, b) = (run(), run());
    assert!(a.0 == b.0, "checkpoints differ");
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    for (task, pipeline) in [(TaskKind::Spectrum, Pipeline::WrfGs), (TaskKind::Rssi, Pipeline::WrfGsPlus), (TaskKind::Csi, Pipeline::WrfGsPlus)] {
        let ds = tiny_dataset(task);
        let cfg = small_train_config(pipeline);
        let mut full = trainer::initialize(&ds, &cfg).unwrap();
        trainer::run(&ds, &mut full, None, &mut |_| {}).unwrap();

        let mut part = trainer::initialize(&ds, &cfg).unwrap();
        trainer::run(&ds, &mut part, Some(cfg.iterations / 2), &mut |_| {}).unwrap();
        assert_eq!(part.state.iteration, cfg.iterations / 2);
        let bytes = checkpoint::encode(&part);
        let mut resumed = checkpoint::decode(&bytes, "part.bin".as_ref()).unwrap();
        assert_eq!(resumed, part);
        trainer::run(&ds, &mut resumed, None, &mut |_| {}).unwrap();
        assert!(checkpoint::encode(&resumed) == checkpoint::encode(&full), "{task:?} resume diverged");
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for task in TaskKind::ALL {
        let ds = tiny_dataset(task);
        let path = dir.path().join(task.name());
        dataset::save(&ds, &path).unwrap();
        assert_eq!(dataset::load(&path).unwrap(), ds);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let ds = tiny_dataset(TaskKind::Spectrum);
    let ck = trainer::initialize(&ds, &small_train_config(Pipeline::WrfGsPlus)).unwrap();
    let mut bytes = checkpoint::encode(&ck);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(checkpoint::decode(&bytes, "bad.bin".as_ref()).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1], "short.bin".as_ref()).is_err());
}
