use nalgebra::DMatrix;
use neighbor_forcing::schedule::{
    expected_mismatched_distance, expected_neighbor_distance, monte_carlo_neighbor_distance, monte_carlo_prop2,
    FlowSchedule, GenericSchedule, NoiseSchedule,
};
use neighbor_forcing::synthdata::{make_dataset, DynamicsConfig, SequenceRecord};

fn sequence_mean(s: &SequenceRecord) -> Vec<f64> {
    let v = s.latents.values();
    (0..v.cols()).map(|j| (0..v.rows()).map(|i| v.at(i, j)).sum::<f64>() / v.rows() as f64).collect()
}

fn features(s: &SequenceRecord) -> Vec<f64> {
    let mut f = s.condition.data().to_vec();
    f.push(1.0);
    f
}

#[test]
fn condition_linearly_predicts_sequence_mean() {
    let data = make_dataset(&DynamicsConfig::default(), 100, 120, 31).unwrap();
    let (train, held) = data.sequences.split_at(60);
    let p = features(&train[0]).len();
    let d = train[0].latents.dim();
    let x = DMatrix::from_fn(train.len(), p, |i, j| features(&train[i])[j]);
    let y = DMatrix::from_fn(train.len(), d, |i, j| sequence_mean(&train[i])[j]);
    let w = x.clone().svd(true, true).solve(&y, 1e-10).unwrap();

    let mut probe = 0.0;
    let mut zero = 0.0;
    for s in held {
        let f = DMatrix::from_row_slice(1, p, &features(s));
        let pred = &f * &w;
        for (j, target) in sequence_mean(s).iter().enumerate() {
            probe += (pred[(0, j)] - target).powi(2);
            zero += target.powi(2);
        }
    }
    assert!(probe < 0.5 * zero, "probe {probe} vs zero predictor {zero}");
}

#[test]
fn same_step_gap_matches_closed_form_on_generated_pairs() {
    let data = make_dataset(&DynamicsConfig::default(), 1, 40, 3).unwrap();
    let z = &data.sequences[0].latents;
    let (a, b) = (z.frame(10), z.frame(11));
    let dz_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let schedule = FlowSchedule;
    for (k, &t) in [0.1, 0.3, 0.5, 0.7, 0.9].iter().enumerate() {
        let (alpha, sigma) = schedule.coefficients(t).unwrap();
        let mc = monte_carlo_prop2(a, b, alpha, sigma, 100_000, 40 + k as u64).unwrap();
        let exact = expected_neighbor_distance(alpha, sigma, a.len(), dz_sq);
        assert!((mc - exact).abs() / exact < 0.02, "t={t}: {mc} vs {exact}");
    }
}

#[test]
fn same_step_gap_holds_for_a_generic_schedule() {
    let data = make_dataset(&DynamicsConfig::default(), 1, 40, 4).unwrap();
    let z = &data.sequences[0].latents;
    let (a, b) = (z.frame(5), z.frame(6));
    let dz_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let cosine = GenericSchedule::cosine(5).unwrap();
    for (k, step) in cosine.steps().iter().enumerate() {
        let mc = monte_carlo_prop2(a, b, step.alpha, step.sigma, 100_000, 60 + k as u64).unwrap();
        let exact = expected_neighbor_distance(step.alpha, step.sigma, a.len(), dz_sq);
        assert!((mc - exact).abs() / exact < 0.02, "t={}: {mc} vs {exact}", step.t);
    }
}

#[test]
fn step_mismatch_deviation_grows_with_noise_gap() {
    let data = make_dataset(&DynamicsConfig::default(), 1, 40, 5).unwrap();
    let z = &data.sequences[0].latents;
    let (prev, next) = (z.frame(20), z.frame(21));
    let dz_sq: f64 = prev.iter().zip(next).map(|(x, y)| (x - y).powi(2)).sum();
    let schedule = FlowSchedule;
    let t = 0.4;
    let (alpha, sigma) = schedule.coefficients(t).unwrap();
    let same = expected_neighbor_distance(alpha, sigma, prev.len(), dz_sq);
    let mut last = 0.0;
    for (k, &t_prime) in [0.5, 0.6, 0.7, 0.8, 0.9].iter().enumerate() {
        let other = schedule.coefficients(t_prime).unwrap();
        let mc = monte_carlo_neighbor_distance(prev, next, (alpha, sigma), other, 100_000, 80 + k as u64).unwrap();
        let exact = expected_mismatched_distance(prev, next, (alpha, sigma), other);
        assert!((mc - exact).abs() / exact < 0.02, "t'={t_prime}: {mc} vs {exact}");
        let deviation = (mc - same).abs();
        assert!(deviation > last, "deviation must grow: {deviation} after {last}");
        last = deviation;
    }
}
