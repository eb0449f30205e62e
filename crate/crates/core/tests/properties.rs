use causal_velocity::dataset::{self, DataPair};
use causal_velocity::flow::{self, IntegratorConfig};
use causal_velocity::gof::{self, DiscoverConfig, GofConfig, LossMode};
use causal_velocity::harness::{self, AudrcRow};
use causal_velocity::scores::{self, KernelConfig, ScoreField, ScorePair, ScoreSource};
use causal_velocity::synth::TmiMap;
use causal_velocity::velocity::{VelocityFamily, VelocityModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair_strategy(min: usize, max: usize) -> impl Strategy<Value = DataPair> {
    prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), min..max)
        .prop_filter("both columns vary", |pts| {
            let spread = |f: fn(&(f64, f64)) -> f64| {
                let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            };
            spread(|p| p.0) > 1e-3 && spread(|p| p.1) > 1e-3
        })
        .prop_map(|pts| {
            let (xs, ys) = pts.into_iter().unzip();
            DataPair::new("p", xs, ys).unwrap()
        })
}

fn basis_family() -> impl Strategy<Value = VelocityFamily> {
    prop::sample::select(vec![
        VelocityFamily::BLin,
        VelocityFamily::BQuad,
        VelocityFamily::BLinExp,
        VelocityFamily::BQuadExp,
    ])
}

fn any_family() -> impl Strategy<Value = VelocityFamily> {
    prop::sample::select(VelocityFamily::ALL.to_vec())
}

fn random_scores(n: usize, seed: u64) -> ScoreField {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col = || (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    ScoreField {
        sx_marg: col(),
        sx_joint: col(),
        sy_joint: col(),
        source: ScoreSource::Stein,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardize_is_idempotent(pair in pair_strategy(3, 60)) {
        let (once, _) = dataset::standardize(&pair).unwrap();
        let (twice, _) = dataset::standardize(&once).unwrap();
        for (a, b) in once.xs.iter().zip(&twice.xs).chain(once.ys.iter().zip(&twice.ys)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trimming_keeps_order_and_bounds_removals(pair in pair_strategy(4, 80), f in 0.0f64..0.4) {
        let n = pair.len();
        let bound = 4 * (f / 2.0 * n as f64).ceil() as usize;
        let kept = match dataset::trim_marginal_extremes(&pair, f) {
            Ok(kept) => kept,
            Err(causal_velocity::Error::EmptyResult) => {
                prop_assert!(bound + 2 > n);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(n - kept.len() <= bound);
        // survivors form a subsequence of the input
        let mut j = 0;
        for (x, y) in kept.xs.iter().zip(&kept.ys) {
            while j < n && (pair.xs[j] != *x || pair.ys[j] != *y) {
                j += 1;
            }
            prop_assert!(j < n);
            j += 1;
        }
    }

    #[test]
    fn score_estimates_are_translation_equivariant(pair in pair_strategy(5, 40), cx in -20.0f64..20.0, cy in -20.0f64..20.0) {
        let shifted = DataPair::new(
            "s",
            pair.xs.iter().map(|x| x + cx).collect(),
            pair.ys.iter().map(|y| y + cy).collect(),
        ).unwrap();
        for (a, b) in [
            (scores::stein_scores(&pair, &KernelConfig::stein()), scores::stein_scores(&shifted, &KernelConfig::stein())),
            (scores::kde_scores(&pair, &KernelConfig::kde()), scores::kde_scores(&shifted, &KernelConfig::kde())),
        ] {
            let (a, b) = (a.unwrap(), b.unwrap());
            for (u, v) in [(&a.sx_marg, &b.sx_marg), (&a.sx_joint, &b.sx_joint), (&a.sy_joint, &b.sy_joint)] {
                for (p, q) in u.iter().zip(v) {
                    prop_assert!((p - q).abs() <= 1e-6 * (1.0 + p.abs()), "{p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn residual_is_affine_in_the_velocity(
        family in basis_family(),
        theta in prop::collection::vec(-2.0f64..2.0, 9),
        alpha in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let k = family.param_count(None).unwrap();
        let pair = DataPair::new("r", vec![-1.0, 0.2, 0.7, 1.5], vec![0.3, -0.8, 1.1, 0.0]).unwrap();
        let score = random_scores(4, seed);
        let model = VelocityModel::new(family, None, theta[..k].to_vec()).unwrap();
        let scaled = VelocityModel::new(family, None, theta[..k].iter().map(|t| alpha * t).collect()).unwrap();
        let zero = VelocityModel::new(family, None, vec![0.0; k]).unwrap();
        let r = gof::residuals(&model, &pair, &score).unwrap();
        let ra = gof::residuals(&scaled, &pair, &score).unwrap();
        let r0 = gof::residuals(&zero, &pair, &score).unwrap();
        for i in 0..4 {
            let lhs = ra[i] - r0[i];
            let rhs = alpha * (r[i] - r0[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn losses_are_nonnegative(family in any_family(), seed in 0u64..1000, absolute in any::<bool>()) {
        let pair = DataPair::new("l", vec![-1.0, 0.2, 0.7, 1.5, 2.0], vec![0.3, -0.8, 1.1, 0.0, -2.0]).unwrap();
        let score = random_scores(5, seed);
        let model = VelocityModel::init(family, None, seed).unwrap();
        let mode = if absolute { LossMode::Absolute } else { LossMode::Squared };
        prop_assert!(gof::loss(&model, &pair, &score, mode).unwrap() >= 0.0);
    }

    #[test]
    fn anm_velocity_is_constant_and_lsnm_affine_in_y(seed in 0u64..500, x in -3.0f64..3.0, y in -3.0f64..3.0, d in 0.01f64..2.0) {
        let anm = VelocityModel::init(VelocityFamily::VAnm, None, seed).unwrap();
        prop_assert_eq!(anm.eval(y, x).0, anm.eval(y + d, x).0);
        let lsnm = VelocityModel::init(VelocityFamily::VLsnm, None, seed).unwrap();
        let second = lsnm.eval(y + d, x).0 - 2.0 * lsnm.eval(y, x).0 + lsnm.eval(y - d, x).0;
        prop_assert!(second.abs() < 1e-10);
    }

    #[test]
    fn audrc_only_sees_confidence_order(
        rows in prop::collection::vec((any::<bool>(), 0.0f64..10.0, 0.1f64..3.0), 1..30),
    ) {
        let base: Vec<AudrcRow> = rows.iter().enumerate().map(|(i, &(c, conf, w))| AudrcRow {
            id: format!("{i:03}"),
            correct: c,
            confidence: conf,
            weight: w,
        }).collect();
        let warped: Vec<AudrcRow> = base.iter().map(|r| AudrcRow {
            confidence: (r.confidence * 3.0).exp() - 7.0,
            ..r.clone()
        }).collect();
        let a = harness::compute_audrc(&base).unwrap();
        let b = harness::compute_audrc(&warped).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn constant_confidence_audrc_is_mean_prefix_accuracy(correct in prop::collection::vec(any::<bool>(), 1..30)) {
        let rows: Vec<AudrcRow> = correct.iter().enumerate().map(|(i, &c)| AudrcRow {
            id: format!("{i:03}"),
            correct: c,
            confidence: 0.5,
            weight: 1.0,
        }).collect();
        let mut hits = 0.0;
        let mut sum = 0.0;
        for (k, &c) in correct.iter().enumerate() {
            if c {
                hits += 1.0;
            }
            sum += hits / (k + 1) as f64;
        }
        let want = sum / correct.len() as f64;
        prop_assert!((harness::compute_audrc(&rows).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn flows_compose_and_invert(
        a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, y in -2.0f64..2.0,
        k1 in -1.0f64..1.0, k2 in -1.0f64..1.0,
    ) {
        let v = move |y: f64, x: f64| k1 * (x + y).sin() + k2 * (0.5 * x).cos() * y.tanh();
        let cfg = IntegratorConfig::default();
        let ab = flow::integrate_flow(v, y, a, b, &cfg).unwrap();
        let abc = flow::integrate_flow(v, ab, b, c, &cfg).unwrap();
        let ac = flow::integrate_flow(v, y, a, c, &cfg).unwrap();
        prop_assert!((abc - ac).abs() < 1e-6);
        let back = flow::integrate_flow(v, ab, b, a, &cfg).unwrap();
        prop_assert!((back - y).abs() < 1e-6);
    }

    #[test]
    fn tmi_maps_are_increasing_through_zero(seed in 0u64..10_000, mut xs in prop::collection::vec(-4.0f64..4.0, 2..40)) {
        let map = TmiMap::sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(map.apply(0.0).unwrap(), 0.0);
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let ts = map.apply_many(&xs).unwrap();
        for w in ts.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn swapping_columns_swaps_the_decision(family in basis_family(), seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..80).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x * 0.5 + rng.random_range(-0.5..0.5)).collect();
        let pair = DataPair::new("e", xs, ys).unwrap();
        let mut config = DiscoverConfig::default();
        config.gof.max_iters = 150;
        let est = gof::Estimator::stein();
        let fit = gof::discover(&pair, &est, family, &config, 9).unwrap();
        let flipped = gof::discover(&pair.swapped(), &est, family, &config, 9).unwrap();
        prop_assert!((fit.loss_xy - flipped.loss_yx).abs() <= 1e-9 * fit.loss_xy.abs().max(1e-12));
        prop_assert!((fit.loss_yx - flipped.loss_xy).abs() <= 1e-9 * fit.loss_yx.abs().max(1e-12));
        if !fit.tie {
            prop_assert_eq!(fit.decision, flipped.decision.reversed());
        }
    }
}

/// With exact scores for linear-Gaussian data, B-LIN's true parameters
/// `(slope, 0, 0)` zero the loss, so any perturbation can only raise it.
#[test]
fn true_parameters_are_locally_optimal_with_exact_scores() {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (slope, sd) = (1.3, 0.6);
    let xs: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            slope * x + sd * z
        })
        .collect();
    let pair = DataPair::new("lin", xs, ys).unwrap();
    let var = sd * sd;
    let score = ScoreField {
        sx_marg: pair.xs.iter().map(|x| -x).collect(),
        sx_joint: pair.xs.iter().zip(&pair.ys).map(|(x, y)| -x + slope * (y - slope * x) / var).collect(),
        sy_joint: pair.xs.iter().zip(&pair.ys).map(|(x, y)| -(y - slope * x) / var).collect(),
        source: ScoreSource::Analytic,
    };
    let truth = VelocityModel::new(VelocityFamily::BLin, None, vec![slope, 0.0, 0.0]).unwrap();
    let at_truth = gof::loss(&truth, &pair, &score, LossMode::Squared).unwrap();
    assert!(at_truth < 1e-20);
    for _ in 0..50 {
        let theta: Vec<f64> = truth.theta.iter().map(|t| t + rng.random_range(-0.1..0.1)).collect();
        let perturbed = VelocityModel::new(VelocityFamily::BLin, None, theta).unwrap();
        assert!(gof::loss(&perturbed, &pair, &score, LossMode::Squared).unwrap() >= at_truth);
    }
}

#[test]
fn reverse_scores_line_up_with_swapped_data() {
    let pair = DataPair::new("r", vec![0.1, 0.5, -0.3, 1.2, 0.8, -1.0], vec![1.0, 0.2, 0.4, -0.6, 0.9, 0.0]).unwrap();
    let both: ScorePair = scores::estimate_score_pair(&pair, ScoreSource::Stein, &KernelConfig::stein()).unwrap();
    let direct = scores::stein_scores(&pair.swapped(), &KernelConfig::stein()).unwrap();
    assert_eq!(both.reverse.sx_marg, direct.sx_marg);
    assert_eq!(both.reverse.sx_joint, direct.sx_joint);
    assert_eq!(both.reverse.sy_joint, direct.sy_joint);
}

#[test]
fn fitting_defaults_pass_validation() {
    GofConfig::default().validate().unwrap();
    IntegratorConfig::default().validate().unwrap();
}
