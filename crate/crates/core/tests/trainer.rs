mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use mixtte_core::diffmath::{Array, Tape};
use mixtte_core::esgmoe::load_balance_loss;
use mixtte_core::params::TrainMask;
use mixtte_core::trafficgen::TripRecord;
use mixtte_core::trainer::*;
use mixtte_core::Error;

fn trip(step: usize) -> TripRecord {
    TripRecord {
        origin: 0,
        destination: 1,
        start_step: step,
        route: vec![0, 1],
        true_duration: 60.0,
    }
}

fn data(toy: &Toy) -> TrainData<'_> {
    TrainData {
        net: &toy.net,
        traffic: &toy.traffic,
        history: &toy.history,
        ctx: &toy.ctx,
    }
}

#[test]
fn loss_examples() {
    assert_eq!(regression_loss_values(&[100.0, 50.0], &[90.0, 60.0]).unwrap(), 20.0);
    assert!(matches!(regression_loss_values(&[], &[]), Err(Error::EmptyBatch)));

    let mut t = Tape::new();
    let p = t.constant(Array::from_vec(2, 1, vec![100.0, 50.0]).unwrap());
    let reg = regression_loss(&mut t, p, &[90.0, 60.0]).unwrap();
    assert_eq!(t.value(reg).item(), 20.0);
    assert!(regression_loss(&mut t, p, &[1.0]).is_err());

    // uniform routing: each layer's load loss is exactly 1
    let probs = t.constant(Array::full(4, 4, 0.25));
    let layers: Vec<_> = (0..2)
        .map(|_| load_balance_loss(&mut t, probs, &[2, 2, 2, 2], 2, &[1.0; 4]).unwrap())
        .collect();
    assert!((t.value(layers[0]).item() - 1.0).abs() < 1e-12);
    let plain = total_loss(&mut t, reg, &layers, 0.0).unwrap();
    assert_eq!(t.value(plain).item(), 20.0);
    let weighted = total_loss(&mut t, reg, &layers, 100.0).unwrap();
    assert!((t.value(weighted).item() - 220.0).abs() < 1e-9);
}

#[test]
fn batches_group_by_start_step() {
    let trips = vec![trip(5), trip(7), trip(5)];
    let batches = time_specific_batches(&trips, 3, 256);
    let mut sorted: Vec<Vec<usize>> = batches.clone();
    sorted.sort();
    assert_eq!(sorted, vec![vec![0, 2], vec![1]]);
    assert_eq!(batches, time_specific_batches(&trips, 3, 256));

    let many: Vec<TripRecord> = (0..50).map(|i| trip(i % 4)).collect();
    let split = time_specific_batches(&many, 9, 5);
    let mut seen = BTreeSet::new();
    for b in &split {
        assert!(b.len() <= 5 && !b.is_empty());
        assert!(b.iter().all(|&i| many[i].start_step == many[b[0]].start_step));
        for &i in b {
            assert!(seen.insert(i));
        }
    }
    assert_eq!(seen.len(), 50);
    let orders: BTreeSet<Vec<Vec<usize>>> = (0..8).map(|s| time_specific_batches(&many, s, 5)).collect();
    assert!(orders.len() > 1);
}

#[test]
fn replay_day_examples() {
    assert_eq!(replay_days(20, 2, 2).unwrap(), vec![18, 13, 6]);
    assert_eq!(replay_days(8, 1, 1).unwrap(), vec![7, 1]);
    assert_eq!(replay_days(14, 0, 1).unwrap(), vec![14, 7]);
    assert!(replay_days(14, 7, 1).is_err());
    assert!(replay_days(14, -1, 1).is_err());

    let mut buffer = BTreeMap::new();
    buffer.insert(7, vec![trip(1)]);
    buffer.insert(1, vec![trip(2), trip(3)]);
    let d = daily_replay_dataset(8, &buffer, 1, 1).unwrap();
    assert_eq!(d.iter().map(|t| t.start_step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(matches!(daily_replay_dataset(9, &buffer, 1, 1), Err(Error::MissingDay(8))));
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { dropout: 1.0, ..TrainConfig::default() },
        TrainConfig { max_batch: 0, ..TrainConfig::default() },
        TrainConfig { load_loss_weight: -1.0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err());
    }
    assert!(TrainConfig::default().validate().is_ok());
}

fn changed_sides(before: &mixtte_core::model::MixTte, after: &mixtte_core::model::MixTte) -> BTreeSet<String> {
    before
        .store
        .ids()
        .filter(|&id| before.store.value(id) != after.store.value(id))
        .map(|id| format!("{:?}", after.store.side(id)))
        .collect()
}

#[test]
fn masks_select_updated_parameters() {
    let toy = toy(1, 30, 4);
    let d = data(&toy);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let base = tiny_model(2);

    let mut m = base.clone();
    let log = train(&mut m, &toy.trips, &d, &cfg, TrainMask::None).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(log.trainable_params, 0);
    assert!(base.store.ids().all(|id| base.store.value(id) == m.store.value(id)));

    let cases = [
        (TrainMask::Link, vec!["Link"]),
        (TrainMask::Route, vec!["Route"]),
        (TrainMask::All, vec!["Link", "Route"]),
    ];
    for (mask, want) in cases {
        let mut m = base.clone();
        let log = train(&mut m, &toy.trips, &d, &cfg, mask).unwrap();
        assert_eq!(log.trainable_params, base.store.count(mask));
        let got = changed_sides(&base, &m);
        assert_eq!(got, want.iter().map(|s| s.to_string()).collect(), "{mask:?}");
    }
    assert_eq!(
        base.store.count(TrainMask::Link) + base.store.count(TrainMask::Route),
        base.store.count(TrainMask::All)
    );
}

#[test]
fn link_forward_runs_once_per_step() {
    let toy = toy(1, 60, 6);
    let steps: BTreeSet<usize> = toy.trips.iter().map(|t| t.start_step).collect();
    let mut m = tiny_model(1);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let log = train(&mut m, &toy.trips, &data(&toy), &cfg, TrainMask::All).unwrap();
    assert_eq!(log.epochs[0].link_forward_calls, steps.len());
    assert_eq!(log.epochs[0].batches, steps.len());
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let toy = toy(1, 220, 8);
    assert!(toy.trips.len() >= 200);
    let d = data(&toy);
    let truth: Vec<f64> = toy.trips.iter().map(|t| t.true_duration).collect();
    let mae = |m: &mixtte_core::model::MixTte| {
        regression_loss_values(&predict_trips(m, &toy.trips, &d).unwrap(), &truth).unwrap() / truth.len() as f64
    };

    let mut a = tiny_model(3);
    let start = mae(&a);
    let log = train(&mut a, &toy.trips, &d, &TrainConfig::default(), TrainMask::All).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.epochs[1].mae < log.epochs[0].mae, "{:?}", log.epochs);
    assert!(mae(&a) < start);

    let mut b = tiny_model(3);
    train(&mut b, &toy.trips, &d, &TrainConfig::default(), TrainMask::All).unwrap();
    assert!(a.store.ids().all(|id| a.store.value(id) == b.store.value(id)));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let e = e2e_toy();
    for alpha in [0.0, 0.5] {
        let err = e2e_grad_error(&e, alpha);
        assert!(err < 1e-4, "alpha {alpha}: {err}");
    }
}
