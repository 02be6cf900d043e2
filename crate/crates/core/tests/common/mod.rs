#![allow(dead_code)]

use kinop::kinetics::{generate_dataset, GenerationConfig, IcGridSpec, Mechanism, TrajectoryDataset};
use kinop::losses::{DataLossKind, LossConfig};
use kinop::networks::{Activation, KanConfig, Network, NetworkConfig, ResNetConfig};
use kinop::operator::{DeepONetModel, ModelMode};
use kinop::optim::{AdamConfig, LrSchedule};
use kinop::rng;
use kinop::training::{MinibatchSchedule, TrainConfig};

pub const DESK_P: usize = 16;
pub const DESK_NT: usize = 99;

/// 11 × 11 ROBER grid, 990 steps of 1e-3, 20% held out.
pub fn desk_dataset() -> TrajectoryDataset {
    let mech = Mechanism::Rober;
    let grid = IcGridSpec::default_for(&mech, 11, 11).unwrap();
    let cfg = GenerationConfig {
        dt: 1e-3,
        n_steps: 990,
        tol: 1e-8,
        test_fraction: 0.2,
        seed: 7,
    };
    generate_dataset(&mech, &grid, &cfg).unwrap()
}

pub fn desk_model(two_step: bool, seed: u64, n_t1: usize) -> DeepONetModel {
    small_model(two_step, seed, n_t1, 32, 4, 16)
}

pub fn small_model(two_step: bool, seed: u64, n_t1: usize, width: usize, layers: usize, trunk: usize) -> DeepONetModel {
    let (j, p) = (3, DESK_P);
    let branch = NetworkConfig::Resnet(ResNetConfig {
        input_dim: j,
        hidden_width: width,
        num_hidden_layers: layers,
        output_dim: j * p,
        activation: Activation::Tanh,
    });
    let trunk = NetworkConfig::Kan(KanConfig::new(vec![1, trunk, trunk, j * p]));
    let branch = Network::init(branch, &mut rng::stream(seed, "init.branch")).unwrap();
    let trunk = Network::init(trunk, &mut rng::stream(seed, "init.trunk")).unwrap();
    let mode = if two_step {
        ModelMode::TwoStep { factors: None }
    } else {
        ModelMode::OneStep {
            pou: false,
            bound_factor: 1.05,
        }
    };
    DeepONetModel::new(branch, trunk, j, p, mode, n_t1).unwrap()
}

/// 3000 epochs, 4 then 8 minibatches, Adam from 1e-3 halving every 2000 epochs.
pub fn desk_train(kind: DataLossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3000,
        minibatches: MinibatchSchedule {
            before: 4,
            after: 8,
            switch_epoch: 1500,
        },
        seed,
        loss: LossConfig {
            kind,
            ..LossConfig::default()
        },
        optimizer: AdamConfig {
            schedule: LrSchedule::Exponential {
                initial: 1e-3,
                half_life: 2000.0,
            },
            ..AdamConfig::default()
        },
        eval_every: 50,
        optimized_a: false,
    }
}
