//! Fisher vs Hessian agreement along a training run: as the residuals shrink
//! the Gauss-Newton remainder vanishes, so both curvatures and both
//! leave-one-out estimates should move together.

use fisher_influence::curvature::{CurvatureKind, CurvatureOperator, LinearOperator, SolverConfig};
use fisher_influence::data::Synthetic;
use fisher_influence::expfamily::{ebar_n, Head};
use fisher_influence::influence::{Estimator, InfluenceConfig};
use fisher_influence::linalg::{norm, sub};
use fisher_influence::nn::{Activation, Architecture, Model};
use fisher_influence::objective::Regularizer;
use fisher_influence::train::{train_with, TrainConfig};

const CHECKPOINTS: [usize; 4] = [100, 400, 1500, 5000];

struct Snapshot {
    epoch: usize,
    ebar: f64,
    remainder: f64,
    loo_gap: f64,
}

fn snapshot(model: &Model, data: &fisher_influence::data::Dataset, epoch: usize, theta: &[f64]) -> Snapshot {
    let head = Head::Gaussian;
    let f = CurvatureOperator::new(CurvatureKind::Fisher, model, head, data, theta).unwrap().to_dense().unwrap();
    let h = CurvatureOperator::new(CurvatureKind::Hessian, model, head, data, theta).unwrap().to_dense().unwrap();
    let remainder = (h - f).symmetric_eigenvalues().amax();

    let estimates = |kind| {
        let cfg = InfluenceConfig::new(kind, Regularizer::None)
            .with_solver(SolverConfig::Dense)
            .with_damping(1e-3);
        let est = Estimator::new(model, head, data, theta, cfg).unwrap();
        est.leave_one_out(&(0..data.len()).collect::<Vec<_>>()).unwrap()
    };
    let ij = estimates(CurvatureKind::Hessian);
    let af = estimates(CurvatureKind::Fisher);
    let loo_gap = ij.iter().zip(&af).map(|(a, b)| norm(&sub(a, b))).sum::<f64>() / data.len() as f64;
    Snapshot { epoch, ebar: ebar_n(model, &head, data, theta).unwrap(), remainder, loo_gap }
}

#[test]
fn fisher_and_hessian_estimates_converge_as_residuals_shrink() {
    // Fewer parameters (26) than samples keeps the curvature well conditioned,
    // so the gap reflects the remainder term rather than the damping.
    let data = Synthetic::Regression { n: 120, d: 3, noise: 0.05 }.generate(21).data;
    let model = Model::new(Architecture::mlp(&[3, 5, 1], Activation::Selu)).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: *CHECKPOINTS.last().unwrap(),
        batch_size: data.len(),
        weight_decay: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut saved = Vec::new();
    train_with(&model, &Head::Gaussian, &data, &cfg, None, |epoch, theta| {
        if CHECKPOINTS.contains(&epoch) {
            saved.push((epoch, theta.to_vec()));
        }
    })
    .unwrap();

    let snaps: Vec<Snapshot> = saved.iter().map(|(e, t)| snapshot(&model, &data, *e, t)).collect();
    for s in &snaps {
        println!(
            "epoch {:>5}: ebar_n={:.4e} ‖H−F‖={:.4e} mean LOO gap={:.4e}",
            s.epoch, s.ebar, s.remainder, s.loo_gap
        );
    }
    for w in snaps.windows(2) {
        assert!(w[1].ebar < w[0].ebar, "Ē_n did not shrink between epochs {} and {}", w[0].epoch, w[1].epoch);
        assert!(
            w[1].remainder < w[0].remainder,
            "‖H−F‖ grew between epochs {} and {}",
            w[0].epoch,
            w[1].epoch
        );
        assert!(
            w[1].loo_gap < w[0].loo_gap,
            "LOO gap grew between epochs {} and {}",
            w[0].epoch,
            w[1].epoch
        );
    }
}
