use rsc_core::denoise::{matrix_mse, svt_denoise, ThresholdRule};
use rsc_core::synthgen::{generate_panel, LatentModel, LatentModelSpec, SyntheticPanel};
use rsc_core::DMatrix;

fn low_rank(n_units: usize, seed: u64, p: f64) -> SyntheticPanel {
    let spec = LatentModelSpec {
        noise_sigma: 0.5,
        p_observe: p,
        seed,
        model: LatentModel::LowRank {
            k: 2,
            coef_seed: seed,
        },
        ..LatentModelSpec::periodic(n_units, 200, 150)
    };
    generate_panel(&spec).unwrap()
}

fn donor_truth(synth: &SyntheticPanel) -> DMatrix<f64> {
    let n = synth.truth.nrows();
    synth.truth.rows(1, n - 1).into_owned()
}

/// Errors of the universal threshold and of plain rescaling (`μ = 0`).
fn errors(synth: &SyntheticPanel) -> (f64, f64) {
    let truth = donor_truth(synth);
    let svt = svt_denoise(&synth.panel, &ThresholdRule::Universal(0.5)).unwrap();
    let raw = svt_denoise(&synth.panel, &ThresholdRule::FixedValue(0.0)).unwrap();
    (
        matrix_mse(&svt.m_hat, &truth).unwrap(),
        matrix_mse(&raw.m_hat, &truth).unwrap(),
    )
}

#[test]
fn universal_threshold_beats_rescaling_in_most_seeds() {
    let wins = (0..20u64)
        .filter(|&s| {
            let (svt, raw) = errors(&low_rank(50, 40 + s, 0.7));
            svt < raw
        })
        .count();
    assert!(wins >= 15, "thresholding won only {wins}/20 seeds");
}

#[test]
fn denoising_error_falls_with_more_donors() {
    let sizes = [25usize, 50, 100, 200];
    let means: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            (0..8u64)
                .map(|s| errors(&low_rank(n, 10 + s, 0.7)).0)
                .sum::<f64>()
                / 8.0
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "slope {slope}, means {means:?}");
}

#[test]
fn missing_entries_degrade_gracefully() {
    let mut previous = 0.0;
    for (i, p) in [1.0, 0.9, 0.7, 0.5].into_iter().enumerate() {
        let mse = (0..8u64)
            .map(|s| errors(&low_rank(50, 60 + s, p)).0)
            .sum::<f64>()
            / 8.0;
        assert!(mse.is_finite());
        if i > 0 {
            // Fewer observations may cost accuracy but never blow it up.
            assert!(mse < 5.0 * previous, "p={p}: {mse} vs {previous}");
        }
        previous = mse;
    }
}
