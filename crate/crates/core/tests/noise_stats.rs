use chaosflow::noise::{make_noise_bank, NoiseStreams};

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn increments_have_gaussian_moments() {
    let (n, steps, dt) = (2000, 50, 0.01);
    let mut streams = NoiseStreams::new(17, n, dt, 1);
    let mut all = Vec::with_capacity(n * steps);
    let mut dw = vec![0.0; n];
    for _ in 0..steps {
        streams.next_step(&mut dw);
        all.extend_from_slice(&dw);
    }
    let (mean, var) = moments(&all);
    let samples = all.len() as f64;
    assert!(mean.abs() < 4.0 * (dt / samples).sqrt(), "mean {mean}");
    assert!((var / dt - 1.0).abs() < 4.0 * (2.0 / samples).sqrt(), "var {var}");
    let kurt = all.iter().map(|x| (x / dt.sqrt()).powi(4)).sum::<f64>() / samples;
    assert!((kurt - 3.0).abs() < 4.0 * (96.0 / samples).sqrt(), "kurtosis {kurt}");
}

#[test]
fn streams_are_uncorrelated_across_particles_and_steps() {
    let (n, steps) = (4000, 2);
    let bank = make_noise_bank(5, n, steps, 1.0, 2).unwrap();
    let (mut across, mut between, mut coords) = (0.0, 0.0, 0.0);
    for i in 0..n - 1 {
        across += bank.increment(i, 0)[0] * bank.increment(i + 1, 0)[0];
        between += bank.increment(i, 0)[0] * bank.increment(i, 1)[0];
        coords += bank.increment(i, 0)[0] * bank.increment(i, 0)[1];
    }
    let bound = 4.0 / ((n - 1) as f64).sqrt();
    for c in [across, between, coords] {
        assert!((c / (n - 1) as f64).abs() < bound, "correlation {c}");
    }
}

#[test]
fn refined_streams_preserve_the_variance_per_step() {
    let (n, dt) = (20_000, 0.04);
    let mut fine = NoiseStreams::refined(23, n, dt, 1, 2);
    assert_eq!(fine.dt(), dt / 4.0);
    let mut sums = vec![0.0; n];
    let mut dw = vec![0.0; n];
    for _ in 0..4 {
        fine.next_step(&mut dw);
        let (_, var) = moments(&dw);
        assert!((var / (dt / 4.0) - 1.0).abs() < 0.05, "fine var {var}");
        sums.iter_mut().zip(&dw).for_each(|(s, d)| *s += d);
    }
    let mut coarse = NoiseStreams::new(23, n, dt, 1);
    coarse.next_step(&mut dw);
    for (s, c) in sums.iter().zip(&dw) {
        assert!((s - c).abs() < 1e-12, "{s} vs {c}");
    }
}
