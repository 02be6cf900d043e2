mod common;

use kinop::io::{self, Checkpoint};
use kinop::losses::DataLossKind;
use kinop::massmap::{batch_transform, collapse_dataset, Direction};
use kinop::operator::recursive_predict;
use kinop::training::{predict_split, split_report, train_one_step, train_two_step, TrainingData, TrainingLog};

use common::{desk_dataset, desk_model, desk_train, small_model, DESK_NT};

#[test]
fn four_trajectories_are_fitted_closely() {
    let ds = desk_dataset();
    let small = ds.subset(&[0, 10, 110, 120, 60], vec![0, 1, 2, 3], vec![4]).unwrap();
    let data = TrainingData::from_dataset(&small, DESK_NT).unwrap();
    let mut model = desk_model(false, 0, data.n_t1());
    let mut cfg = desk_train(DataLossKind::TypeB, 0);
    cfg.epochs = 2000;
    let mut log = TrainingLog::default();
    train_one_step(&mut model, &data, &cfg, &mut log).unwrap();
    let train = split_report(&model, &data, &data.train).unwrap().unwrap();
    assert!(train.global_mean < 0.005, "train error {}", train.global_mean);
    assert_eq!(log.final_row().unwrap().train_rel_l2, train.global_mean);
    assert_eq!(log.weights.len(), (100..2000).step_by(50).count());
}

#[test]
fn simplex_collapse_round_trips_rober_data() {
    let ds = desk_dataset();
    let (z, collapsed) = batch_transform(&ds.raw, &ds.schema, Direction::Collapse).unwrap();
    assert_eq!(collapsed.j(), 2);
    let (back, schema) = batch_transform(&z, &ds.schema, Direction::Expand).unwrap();
    assert_eq!(schema.names, ds.schema.names);
    assert!(back.max_abs_diff(&ds.raw) < 1e-10);

    let cds = collapse_dataset(&ds).unwrap();
    assert_eq!(cds.raw.shape(), &[121, 991, 2]);
    assert!(cds.normalization.is_some());
}

#[test]
fn saved_checkpoints_predict_identically() {
    let ds = desk_dataset();
    let data = TrainingData::from_dataset(&ds, DESK_NT).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for two_step in [false, true] {
        let mut model = small_model(two_step, 4, data.n_t1(), 8, 2, 8);
        let mut cfg = desk_train(DataLossKind::TypeA, 4);
        cfg.epochs = 120;
        let (mut a, mut b) = (TrainingLog::default(), TrainingLog::default());
        if two_step {
            train_two_step(&mut model, &data, &cfg, &mut a, &mut b).unwrap();
        } else {
            train_one_step(&mut model, &data, &cfg, &mut a).unwrap();
        }
        let dir = tmp.path().join(if two_step { "two" } else { "one" });
        let ck = Checkpoint {
            model,
            schema: data.schema.clone(),
            normalization: data.normalization.clone(),
            massmap: None,
        };
        io::save_checkpoint(&ck, &dir).unwrap();
        let loaded = io::load_checkpoint(&dir).unwrap();
        assert_eq!(loaded, ck);
        let before = predict_split(&ck.model, &data, &data.test).unwrap();
        let after = predict_split(&loaded.model, &data, &data.test).unwrap();
        assert_eq!(before, after);

        // A one-segment rollout is the teacher-forced prediction.
        let rollout = recursive_predict(&loaded.model, &data.schema, &data.normalization, &data.test.y0_raw, 1).unwrap();
        assert_eq!(rollout, after);
    }
}
