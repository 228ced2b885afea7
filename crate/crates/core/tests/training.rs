use graphlift::layers::AdjacencyInit;
use graphlift::keypoints::KeypointSubset;
use graphlift::metrics::mean_error;
use graphlift::optim::{OptimizerKind, SgdSchedule};
use graphlift::pipeline::{lift_all, stack_rows, train_lifter, LiftData, LiftObserver, LiftTrainConfig};
use graphlift::synth::{generate_dataset, GraspSpec, SampleRecord};
use graphlift::unet::{build_unet, Lifter, UNetConfig};
use graphlift::{ParamId, ParamStore, Tape};

fn records(n: usize) -> Vec<SampleRecord> {
    generate_dataset(n, 11, &GraspSpec::default()).unwrap()
}

fn tiny(init: AdjacencyInit) -> UNetConfig {
    UNetConfig {
        feature_schedule: vec![8, 8, 16, 16],
        adjacency_init: init,
        ..UNetConfig::default()
    }
}

fn sgd(epochs: u64, batch_size: usize) -> LiftTrainConfig {
    LiftTrainConfig {
        epochs,
        schedule: SgdSchedule::new(1e-5, 0.5, 20).unwrap(),
        optimizer: OptimizerKind::Sgd,
        batch_size,
        noise_sigma: 0.0,
        seed: 5,
    }
}

fn one_backward(store: &ParamStore, net: &dyn Lifter, data: &LiftData) -> graphlift::Gradients {
    let x = stack_rows(&data.inputs.iter().collect::<Vec<_>>()).unwrap();
    let y = stack_rows(&data.targets.iter().collect::<Vec<_>>()).unwrap();
    let mut t = Tape::new(store);
    let (xv, yv) = (t.constant(x), t.constant(y));
    let pred = net.forward(&mut t, xv).unwrap();
    let loss = t.mse(pred, yv).unwrap();
    t.backward(loss).unwrap()
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn zero_kernels_give_exactly_zero_gradients() {
    let data = LiftData::from_records(&records(6));
    let model = build_unet(&tiny(AdjacencyInit::Zeros), 0).unwrap();
    let grads = one_backward(&model.store, &model.net, &data);
    for id in model.net.param_ids() {
        if let Some(g) = grads.param(id) {
            assert!(g.iter().all(|&v| v == 0.0), "{}", model.store.name(id));
        }
    }
}

#[test]
fn zero_kernels_never_improve() {
    let data = LiftData::from_records(&records(16));
    let mut model = build_unet(&tiny(AdjacencyInit::Zeros), 0).unwrap();
    let before = model.store.snapshot();
    let losses = train_lifter(&mut model.store, &model.net, &data, &sgd(10, 4), &mut ()).unwrap();
    assert_eq!(model.store.snapshot(), before);
    // Epoch means differ only by summation order.
    assert!(losses.iter().all(|&l| (l - losses[0]).abs() <= 1e-12 * losses[0]), "{losses:?}");
    let err = |store: &ParamStore| {
        let preds = lift_all(store, &model.net, &data.inputs).unwrap();
        mean_error(&preds, &data.targets, KeypointSubset::All).unwrap()
    };
    let fresh = build_unet(&tiny(AdjacencyInit::Zeros), 0).unwrap();
    assert_eq!(err(&model.store), err(&fresh.store));
}

#[test]
fn pooling_receives_gradient_for_every_seed() {
    let data = LiftData::from_records(&records(4));
    for seed in 0..20 {
        let model = build_unet(&tiny(AdjacencyInit::Identity), seed).unwrap();
        let grads = one_backward(&model.store, &model.net, &data);
        let ids = model.net.pool_param_ids();
        assert_eq!(ids.len(), 6);
        for id in ids {
            assert!(norm(grads.param(id).unwrap()) > 0.0, "seed {seed}: {}", model.store.name(id));
        }
    }
}

struct PoolNorms {
    ids: Vec<ParamId>,
    min_norm: Vec<f64>,
}

impl LiftObserver for PoolNorms {
    fn on_step(&mut self, _epoch: u64, store: &ParamStore) {
        let smallest = self
            .ids
            .iter()
            .map(|&id| store.get(id).grad().map_or(0.0, norm))
            .fold(f64::INFINITY, f64::min);
        self.min_norm.push(smallest);
    }
}

#[test]
fn pooling_gradient_stays_nonzero_while_training() {
    let data = LiftData::from_records(&records(8));
    let mut model = build_unet(&tiny(AdjacencyInit::Identity), 3).unwrap();
    let mut obs = PoolNorms {
        ids: model.net.pool_param_ids(),
        min_norm: Vec::new(),
    };
    let losses = train_lifter(&mut model.store, &model.net, &data, &sgd(50, 8), &mut obs).unwrap();
    assert_eq!(obs.min_norm.len(), 50);
    assert!(obs.min_norm.iter().all(|&n| n > 0.0), "{:?}", obs.min_norm);
    assert!(losses[49] < losses[0]);
}

#[test]
fn gpool_variant_exposes_its_projections() {
    let cfg = UNetConfig {
        pooling: graphlift::unet::PoolingKind::Gpool,
        ..tiny(AdjacencyInit::Identity)
    };
    let model = build_unet(&cfg, 0).unwrap();
    let names: Vec<&str> = model.net.pool_param_ids().iter().map(|&id| model.store.name(id)).collect();
    assert_eq!(names.len(), 3);
    assert!(names.iter().all(|n| n.ends_with(".projection")), "{names:?}");
}
