use condmean::analysis::ancova;
use condmean::dataset::{
    split_observed_missing, CovariateSchema, Group, IceRecord, MaskRule, Strategy, Subject, TrialDataset,
    VisitGrid,
};
use condmean::impute::{
    apply_delta, conditional_mean_impute, random_impute, reference_based_mean, DeltaAdjustment, DeltaScope,
    ImputedDataset, MarginalDistribution, Provenance,
};
use condmean::inference::{jackknife_se, pb_accuracy, percentile_ci, PValueMethod};
use condmean::simgen::{generate_trial, Hypothesis, SimConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop::sample::select(Strategy::ALL.to_vec())
}

fn subject(j: usize) -> impl proptest::strategy::Strategy<Value = Subject> {
    (
        any::<bool>(),
        prop::collection::vec(prop::option::weighted(0.8, -20.0..20.0f64), j),
        prop::option::of((0..=j, strategy())),
    )
        .prop_map(|(intervention, outcomes, ice)| {
            let group = if intervention { Group::Intervention } else { Group::Control };
            let mut s = Subject::new("s", group, outcomes);
            if let Some((t, st)) = ice {
                s = s.with_ice(IceRecord::new(t, st));
            }
            s
        })
}

fn dataset() -> impl proptest::strategy::Strategy<Value = TrialDataset> {
    (1usize..6).prop_flat_map(|j| {
        prop::collection::vec(subject(j), 1..12).prop_map(move |mut subjects| {
            for (i, s) in subjects.iter_mut().enumerate() {
                s.id = format!("s{i}");
            }
            TrialDataset::new(VisitGrid::numbered(j), CovariateSchema::default(), subjects)
        })
    })
}

/// Random SPD matrix `A Aᵀ + I`.
fn spd(j: usize) -> impl proptest::strategy::Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, j * j).prop_map(move |a| {
        let a = DMatrix::from_vec(j, j, a);
        &a * a.transpose() + DMatrix::identity(j, j)
    })
}

fn missing_count(d: &TrialDataset) -> usize {
    d.subjects.iter().map(|s| s.outcomes.iter().filter(|y| y.is_none()).count()).sum()
}

proptest! {
    #[test]
    fn masking_is_idempotent_and_monotone(d in dataset()) {
        for rule in [MaskRule::ReferenceBased, MaskRule::AllIces] {
            let once = d.mask_with(rule);
            prop_assert_eq!(&once.mask_with(rule), &once);
            for (a, b) in d.subjects.iter().zip(&once.subjects) {
                for (ya, yb) in a.outcomes.iter().zip(&b.outcomes) {
                    prop_assert!(ya.is_some() || yb.is_none());
                    if let Some(yb) = yb {
                        prop_assert_eq!(Some(*yb), *ya);
                    }
                }
                let (obs, mis) = split_observed_missing(b);
                prop_assert_eq!(obs.len() + mis.len(), d.n_visits());
            }
        }
        prop_assert!(missing_count(&d.mask_with(MaskRule::AllIces)) >= missing_count(&d.mask_with(MaskRule::ReferenceBased)));
        prop_assert!(missing_count(&d.mask_with(MaskRule::ReferenceBased)) >= missing_count(&d));
    }

    #[test]
    fn strategies_coincide_when_arms_coincide(
        own in prop::collection::vec(-10.0..10.0f64, 1..7),
        st in strategy(),
        t in 0usize..7,
    ) {
        let j = own.len();
        let own = DVector::from_vec(own);
        let mu = reference_based_mean(&own, &own, st, t.min(j));
        prop_assert!((mu - &own).amax() < 1e-12);
    }

    #[test]
    fn reference_strategy_structure(
        pair in (1usize..7).prop_flat_map(|j| (
            prop::collection::vec(-10.0..10.0f64, j),
            prop::collection::vec(-10.0..10.0f64, j),
            0..=j,
        )),
    ) {
        let (own, reference, t) = pair;
        let j = own.len();
        let own = DVector::from_vec(own);
        let reference = DVector::from_vec(reference);
        prop_assert_eq!(reference_based_mean(&own, &reference, Strategy::Mar, t), own.clone());
        prop_assert_eq!(reference_based_mean(&own, &reference, Strategy::CopyReference, t), reference.clone());

        let j2r = reference_based_mean(&own, &reference, Strategy::JumpToReference, t);
        let cir = reference_based_mean(&own, &reference, Strategy::CopyIncrementsInReference, t);
        for v in 0..j {
            if v < t {
                prop_assert_eq!(j2r[v], own[v]);
                prop_assert_eq!(cir[v], own[v]);
            } else {
                prop_assert_eq!(j2r[v], reference[v]);
            }
            if t > 0 && v >= t {
                let inc = cir[v] - cir[v - 1];
                let ref_inc = reference[v] - reference[v - 1];
                prop_assert!((inc - ref_inc).abs() < 1e-9);
            }
        }
        if t == j {
            prop_assert_eq!(&j2r, &own);
            prop_assert_eq!(&cir, &own);
        }
    }

    #[test]
    fn conditional_mean_keeps_observed_and_is_exact_at_the_mean(
        case in (1usize..6).prop_flat_map(|j| (
            spd(j),
            prop::collection::vec(-5.0..5.0f64, j),
            prop::collection::vec(prop::option::of(-5.0..5.0f64), j),
        )),
    ) {
        let (sigma, mu, y) = case;
        let mu = DVector::from_vec(mu);
        let m = MarginalDistribution { mu: mu.clone(), sigma };
        let s = Subject::new("s", Group::Control, y.clone());
        let filled = conditional_mean_impute(&s, &m).unwrap();
        for (v, yv) in y.iter().enumerate() {
            if let Some(yv) = yv {
                prop_assert_eq!(filled[v], *yv);
            }
        }
        let at_mean: Vec<Option<f64>> = y.iter().enumerate().map(|(v, yv)| yv.map(|_| mu[v])).collect();
        let filled = conditional_mean_impute(&Subject::new("s", Group::Control, at_mean), &m).unwrap();
        for v in 0..mu.len() {
            prop_assert!((filled[v] - mu[v]).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_leaves_observed_cells_and_provenance(d in dataset(), off in -3.0..3.0f64) {
        let filled: Vec<Vec<f64>> = d
            .subjects
            .iter()
            .map(|s| s.outcomes.iter().map(|y| y.unwrap_or(0.0)).collect())
            .collect();
        let imputed = ImputedDataset::from_filled(d.clone(), filled);
        let delta = DeltaAdjustment::uniform(&d, &vec![off; d.n_visits()], DeltaScope::ImputedOnly);
        let shifted = apply_delta(&imputed, &delta);
        prop_assert_eq!(&shifted.provenance, &imputed.provenance);
        for i in 0..d.len() {
            for v in 0..d.n_visits() {
                let expected = match imputed.provenance[i][v] {
                    Provenance::Observed => imputed.filled[i][v],
                    Provenance::Imputed => imputed.filled[i][v] + off,
                };
                prop_assert_eq!(shifted.filled[i][v], expected);
            }
        }
    }

    #[test]
    fn ancova_is_affine_equivariant_and_order_free(
        rows in prop::collection::vec((any::<bool>(), -10.0..10.0f64, -5.0..5.0f64), 8..30),
        a in 0.1..5.0f64,
        b in -10.0..10.0f64,
        shift in -3.0..3.0f64,
        rotate in 0usize..30,
    ) {
        let mut rows = rows;
        rows[0].0 = false;
        rows[1].0 = true;
        let groups: Vec<Group> = rows.iter().map(|r| if r.0 { Group::Intervention } else { Group::Control }).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let x = vec![rows.iter().map(|r| r.2).collect::<Vec<f64>>()];
        let names = vec!["x".to_string()];
        let Ok(base) = ancova(&y, &groups, &x, &names) else { return Ok(()) };

        let scaled: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let e = ancova(&scaled, &groups, &x, &names).unwrap();
        prop_assert!((e.theta - a * base.theta).abs() < 1e-8 * (1.0 + base.theta.abs() * a));

        let moved: Vec<f64> = y.iter().zip(&groups).map(|(v, g)| v + shift * g.indicator()).collect();
        let e = ancova(&moved, &groups, &x, &names).unwrap();
        prop_assert!((e.theta - base.theta - shift).abs() < 1e-8);

        let n = y.len();
        let k = rotate % n;
        let perm = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[(i + k) % n]).collect() };
        let pg: Vec<Group> = (0..n).map(|i| groups[(i + k) % n]).collect();
        let e = ancova(&perm(&y), &pg, &[perm(&x[0])], &names).unwrap();
        prop_assert!((e.theta - base.theta).abs() < 1e-9);
    }

    #[test]
    fn jackknife_se_matches_definition(reps in prop::collection::vec(-5.0..5.0f64, 2..40)) {
        let n = reps.len() as f64;
        let mean = reps.iter().sum::<f64>() / n;
        let direct = ((n - 1.0) / n * reps.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()).sqrt();
        prop_assert!((jackknife_se(&reps) - direct).abs() <= 1e-12 * (1.0 + direct));
        let shifted: Vec<f64> = reps.iter().map(|t| t + 7.0).collect();
        prop_assert!((jackknife_se(&shifted) - jackknife_se(&reps)).abs() < 1e-9);
    }

    #[test]
    fn percentile_interval_widens_as_alpha_falls(
        draws in prop::collection::vec(-5.0..5.0f64, 199..400),
        a1 in 0.02..0.5f64,
        a2 in 0.02..0.5f64,
    ) {
        let (small, large) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let (lo_s, hi_s) = percentile_ci(&draws, small).unwrap();
        let (lo_l, hi_l) = percentile_ci(&draws, large).unwrap();
        prop_assert!(lo_s <= lo_l && hi_l <= hi_s);
    }

    #[test]
    fn pb_range_narrows_with_more_replicates(p in 0.005..0.5f64, normal in any::<bool>()) {
        let method = if normal { PValueMethod::Normal } else { PValueMethod::Percentile };
        let width = |b: usize| {
            let (lo, hi) = pb_accuracy(method, p, b).unwrap().range95();
            hi - lo
        };
        prop_assert!(width(99_999) <= width(9_999) + 1e-12);
        prop_assert!(width(9_999) <= width(999) + 1e-12);
    }

    #[test]
    fn discontinuation_odds_step_by_the_ratio(y in 0.0..40.0f64, intervention in any::<bool>()) {
        let c = SimConfig::default();
        let g = if intervention { Group::Intervention } else { Group::Control };
        let odds = |y: f64| {
            let p = c.disc_prob(g, y);
            p / (1.0 - p)
        };
        let lo = y.max(c.disc_threshold);
        let ratio = odds(lo + c.disc_step) / odds(lo);
        prop_assert!((ratio / c.disc_odds_ratio - 1.0).abs() < 1e-9);
        if y < c.disc_threshold {
            prop_assert!((odds(y) / odds(c.disc_threshold) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn random_imputations_average_to_the_conditional_mean() {
    let sigma = DMatrix::from_row_slice(4, 4, &[
        4.0, 2.0, 1.5, 1.0, //
        2.0, 5.0, 2.5, 2.0, //
        1.5, 2.5, 6.0, 3.0, //
        1.0, 2.0, 3.0, 7.0,
    ]);
    let mu = DVector::from_vec(vec![1.0, 0.5, 0.0, -1.0]);
    let m = MarginalDistribution { mu, sigma };
    let s = Subject::new("s", Group::Intervention, vec![Some(2.0), None, Some(-1.0), None]);
    let target = conditional_mean_impute(&s, &m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 200_000;
    let mut sum = [0.0; 4];
    for _ in 0..n {
        for (acc, v) in sum.iter_mut().zip(random_impute(&s, &m, &mut rng).unwrap()) {
            *acc += v;
        }
    }
    for v in [1, 3] {
        // Conditional variances are below the marginal ones, so 7/n bounds the MC variance.
        let mc_se = (7.0 / n as f64).sqrt();
        assert!((sum[v] / n as f64 - target[v]).abs() < 4.0 * mc_se, "visit {v}");
    }
    assert_eq!(sum[0] / n as f64, 2.0);
}

#[test]
fn same_seed_gives_same_trial() {
    let c = SimConfig::default();
    assert_eq!(
        generate_trial(&c, Hypothesis::Alternative, 5),
        generate_trial(&c, Hypothesis::Alternative, 5)
    );
    assert_ne!(
        generate_trial(&c, Hypothesis::Alternative, 5),
        generate_trial(&c, Hypothesis::Alternative, 6)
    );
}

#[test]
fn placebo_mean_ignores_outcome_independent_discontinuation() {
    // With the odds ratio at 1, discontinuation carries no information on outcomes.
    let c = SimConfig {
        disc_odds_ratio: 1.0,
        n_per_group: 4000,
        ..SimConfig::default()
    };
    let d = generate_trial(&c, Hypothesis::Null, 21);
    let j = d.n_visits();
    let observed: Vec<f64> = d
        .subjects
        .iter()
        .filter(|s| s.group == Group::Control)
        .filter_map(|s| s.outcomes[j - 1])
        .collect();
    let base: Vec<f64> = d
        .subjects
        .iter()
        .filter(|s| s.group == Group::Control && s.outcomes[j - 1].is_some())
        .map(|s| s.baseline["BASE"])
        .collect();
    let n = observed.len() as f64;
    let change = observed.iter().zip(&base).map(|(y, b)| y - b).sum::<f64>() / n;
    let truth = c.placebo_mean(1.0) - c.placebo_mean(0.0);
    let sd = (observed.iter().zip(&base).map(|(y, b)| (y - b - change).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((change - truth).abs() < 4.0 * sd / n.sqrt(), "{change} vs {truth}");
}
