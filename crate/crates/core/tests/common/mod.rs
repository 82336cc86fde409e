#![allow(dead_code)]

use lhcf::numerics::{Matrix, Rng};
use lhcf::trainer::{
    objective, objective_value, Architecture, ClassifierModel, FairnessConfig, GroupRisks, Grouping,
    LossKind, TrainData,
};

/// Worst relative error between the analytic gradient and central
/// differences at one random point, or `None` when the point sits near a
/// risk tie or the probability clamp.
pub fn gradient_check_point(arch: Architecture, kind: LossKind, rng: &mut Rng) -> Option<f64> {
    let d = 1 + rng.below(5);
    let n = 4 + rng.below(29);
    let num_groups = 1 + rng.below(4);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let y: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();
    let groups: Vec<usize> = (0..n).map(|_| rng.below(num_groups)).collect();
    let data = TrainData::new(Matrix::from_rows(&rows).unwrap(), y, groups, num_groups).unwrap();
    let mut model = ClassifierModel::init(arch, d, rng);
    for p in &mut model.params {
        *p += 0.5 * rng.normal();
    }
    let cfg = FairnessConfig {
        loss_kind: kind,
        lambda: 0.25 + rng.uniform(),
        grouping: Grouping::HiddenCohorts,
    };
    let batch = data.all();

    let h = 1e-5;
    // Skip points where a ±h step could change the argmax/argmin group or
    // hit the clamp, since the objective is not differentiable there.
    let losses: Vec<f64> = batch
        .iter()
        .map(|&i| {
            let p = model.predict_one(data.z.row(i));
            if !(2e-7..=1.0 - 2e-7).contains(&p) {
                f64::NAN
            } else {
                lhcf::trainer::clss_loss(data.y[i], p)
            }
        })
        .collect();
    if losses.iter().any(|l| l.is_nan()) {
        return None;
    }
    let risks = GroupRisks::from_losses(&losses, &data.groups, num_groups);
    let mut sorted = risks.risks.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] - w[0] < 1e-4) {
        return None;
    }

    let (_, grad) = objective(&data, &batch, &model, &cfg).unwrap();
    let mut worst = 0.0f64;
    let mut params = model.params.clone();
    for j in 0..params.len() {
        let orig = params[j];
        params[j] = orig + h;
        let up = objective_value(&data, &batch, &model, &params, &cfg);
        params[j] = orig - h;
        let down = objective_value(&data, &batch, &model, &params, &cfg);
        params[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[j].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[j] - fd).abs() / scale);
    }
    Some(worst)
}

/// Runs the check until `points` usable points are collected.
pub fn gradient_check(arch: Architecture, kind: LossKind, points: usize, seed: u64) -> (usize, f64) {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut used = 0;
    let mut tries = 0;
    while used < points && tries < points * 50 {
        tries += 1;
        if let Some(e) = gradient_check_point(arch, kind, &mut rng) {
            worst = worst.max(e);
            used += 1;
        }
    }
    (used, worst)
}
