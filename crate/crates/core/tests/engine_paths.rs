use rand::Rng;

use crt_core::assignment::{stream_rng, Assignment, AssignmentModel, ObservedData, OutcomeSchedule};
use crt_core::conditioning::{
    bayes_conditional_density, partition_by_focal_units, partition_by_function,
    partition_by_order_statistics, ConditioningVariable, DeterministicVariable, IndependentVariable,
    Partition, RandomizedPartitionChoice,
};
use crt_core::engine::{
    averaged_p_value, exact_p_value, imputation_equivalence_check, mc_p_value, post_randomized_p_value, Mode,
    Orientation, Statistic,
};
use crt_core::error::CrtError;
use crt_core::hypothesis::{ExposureMap, NullHypothesis, PartialOutcomes, UnitSet};

fn treated_sum() -> Statistic {
    Statistic::new("treated_sum", Orientation::LargeIsExtreme, |inp| {
        Ok(inp
            .outcomes
            .iter_defined()
            .map(|(i, y)| y * (inp.assignment[i] != 0) as u8 as f64)
            .sum())
    })
}

fn outcomes(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 99);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn neighbour_exposure(n: usize) -> ExposureMap {
    ExposureMap::new(n, vec![0, 1, 2], move |i, z| {
        if z[i] != 0 {
            2
        } else if z[(i + 1) % n] != 0 || z[(i + n - 1) % n] != 0 {
            1
        } else {
            0
        }
    })
}

#[test]
fn monte_carlo_tracks_exact_within_three_standard_errors() {
    let resamples = 4000;
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let n = 6 + (k % 5) as usize;
        let model = if k % 2 == 0 {
            AssignmentModel::complete_randomization(n, n / 2).unwrap()
        } else {
            AssignmentModel::bernoulli(n, 0.4).unwrap()
        };
        let part = if k % 3 == 0 {
            partition_by_order_statistics(&model)
        } else {
            Partition::unconditional(&model)
        };
        let obs = ObservedData::new(model.sample_seeded(k), outcomes(n, k));
        let null = NullHypothesis::fisher_sharp(n);
        let exact = exact_p_value(&model, &part, &null, &treated_sum(), &obs)
            .unwrap()
            .p;
        let mc = mc_p_value(&model, &part, &null, &treated_sum(), &obs, resamples, k)
            .unwrap()
            .p;
        let se = (exact * (1.0 - exact) / resamples as f64).sqrt();
        let gap = (mc - exact).abs();
        assert!(
            gap <= 3.0 * se + 1.0 / resamples as f64,
            "instance {k}: mc {mc} vs exact {exact}"
        );
        worst = worst.max(gap);
    }
    assert!(worst > 0.0);
}

#[test]
fn sharp_null_distribution_is_the_same_from_every_member_of_a_cell() {
    let model = AssignmentModel::complete_randomization(8, 4).unwrap();
    let part = partition_by_function(&model, |z| (z[0] + z[1]) as i64);
    let y = outcomes(8, 5);
    let null = NullHypothesis::fisher_sharp(8);
    for id in 0..part.n_cells().unwrap() {
        let members = part.cell_assignments(id).unwrap();
        let mut reference: Option<Vec<f64>> = None;
        for z in members {
            let r = exact_p_value(
                &model,
                &part,
                &null,
                &treated_sum(),
                &ObservedData::new(z, y.clone()),
            )
            .unwrap();
            let mut d = r.distribution.clone();
            d.sort_by(f64::total_cmp);
            match &reference {
                None => reference = Some(d),
                Some(first) => assert_eq!(first, &d, "cell {id}"),
            }
        }
    }
}

#[test]
fn imputation_matches_the_full_schedule_for_each_null() {
    let n = 8;
    let model = AssignmentModel::complete_randomization(n, 3).unwrap();
    let base = outcomes(n, 1);

    let sharp = OutcomeSchedule::constant(base.clone());
    let b = base.clone();
    let shifted = OutcomeSchedule::new(n, move |z| (0..n).map(|i| b[i] + 1.5 * z[i] as f64).collect());
    let e = neighbour_exposure(n);
    let e2 = e.clone();
    let b = base.clone();
    let spill = OutcomeSchedule::new(n, move |z| {
        (0..n)
            .map(|i| b[i] + if e2.expose(i, z) == 2 { 3.0 } else { 0.0 })
            .collect()
    });

    let cases: Vec<(NullHypothesis, OutcomeSchedule, Partition)> = vec![
        (
            NullHypothesis::fisher_sharp(n),
            sharp,
            Partition::unconditional(&model),
        ),
        (
            NullHypothesis::constant_effect(ExposureMap::own_treatment(n), 1.5).unwrap(),
            shifted,
            partition_by_order_statistics(&model),
        ),
        (
            NullHypothesis::spillover(e.clone()).unwrap(),
            spill,
            partition_by_focal_units(&model, &e, &[0, 3, 6]).unwrap(),
        ),
    ];
    for (k, (null, schedule, part)) in cases.iter().enumerate() {
        let stat = if k == 2 {
            spill_contrast(e.clone())
        } else {
            treated_sum()
        };
        for seed in 0..20 {
            assert!(
                imputation_equivalence_check(&model, part, null, &stat, schedule, seed).unwrap(),
                "null {k} seed {seed}"
            );
        }
    }
}

fn spill_contrast(e: ExposureMap) -> Statistic {
    Statistic::new("spill_contrast", Orientation::LargeIsExtreme, move |inp| {
        let d = e.profile(inp.assignment);
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for (i, y) in inp.outcomes.iter_defined() {
            match d[i] {
                1 => {
                    s1 += y;
                    n1 += 1.0
                }
                0 => {
                    s0 += y;
                    n0 += 1.0
                }
                _ => {}
            }
        }
        Ok(if n1 > 0.0 && n0 > 0.0 {
            s1 / n1 - s0 / n0
        } else {
            0.0
        })
    })
}

#[test]
fn custom_null_with_partial_imputability() {
    // Units 0 and 1 have known outcomes under every assignment; the rest are never imputable.
    let n = 6;
    let model = AssignmentModel::complete_randomization(n, 3).unwrap();
    let null = NullHypothesis::custom(
        n,
        move |_, _| UnitSet::from_indices(n, [0, 1]),
        |obs, _| Ok(PartialOutcomes::full(obs.outcomes.clone())),
    );
    let base = outcomes(n, 8);
    let schedule = OutcomeSchedule::constant(base);
    let part = Partition::unconditional(&model);
    for seed in 0..10 {
        assert!(imputation_equivalence_check(&model, &part, &null, &treated_sum(), &schedule, seed).unwrap());
    }

    let strict = Statistic::new("all_units", Orientation::LargeIsExtreme, |inp| {
        (0..inp.assignment.len()).map(|i| inp.outcomes.get(i)).sum()
    });
    let obs = ObservedData::new(model.sample_seeded(1), outcomes(n, 8));
    match exact_p_value(&model, &part, &null, &strict, &obs) {
        Err(CrtError::Imputability { unit, .. }) => assert_eq!(unit, 2),
        other => panic!("expected an imputability error, got {other:?}"),
    }
}

#[test]
fn observed_assignment_outside_the_space_is_rejected() {
    let model = AssignmentModel::complete_randomization(5, 2).unwrap();
    let obs = ObservedData::new(Assignment::new(vec![1, 1, 1, 0, 0]), vec![0.0; 5]);
    let r = exact_p_value(
        &model,
        &Partition::unconditional(&model),
        &NullHypothesis::fisher_sharp(5),
        &treated_sum(),
        &obs,
    );
    assert!(matches!(r, Err(CrtError::NotInSpace(_))));
}

#[test]
fn deterministic_variable_reproduces_the_conditional_test() {
    let model = AssignmentModel::bernoulli(7, 0.5).unwrap();
    let part = partition_by_function(&model, |z| z.count_nonzero() as i64);
    let variable = DeterministicVariable {
        partition: part.clone(),
    };
    let null = NullHypothesis::fisher_sharp(7);
    for seed in 0..15 {
        let obs = ObservedData::new(model.sample_seeded(seed), outcomes(7, seed));
        let post = post_randomized_p_value(&model, &variable, &null, &treated_sum(), &obs, seed, Mode::Exact)
            .unwrap();
        let direct = exact_p_value(&model, &part, &null, &treated_sum(), &obs).unwrap();
        assert!(
            (post.p - direct.p).abs() < 1e-12,
            "seed {seed}: {} vs {}",
            post.p,
            direct.p
        );
        assert_eq!(post.cell, direct.cell);
    }
}

#[test]
fn independent_variable_leaves_the_design_unchanged() {
    let model = AssignmentModel::bernoulli(6, 0.3).unwrap();
    let variable = IndependentVariable::new(vec![(vec![0], 0.25), (vec![1], 0.75)]).unwrap();
    let null = NullHypothesis::fisher_sharp(6);
    for seed in 0..10 {
        let obs = ObservedData::new(model.sample_seeded(seed), outcomes(6, seed));
        let post = post_randomized_p_value(&model, &variable, &null, &treated_sum(), &obs, seed, Mode::Exact)
            .unwrap();
        let direct = exact_p_value(
            &model,
            &Partition::unconditional(&model),
            &null,
            &treated_sum(),
            &obs,
        )
        .unwrap();
        assert!((post.p - direct.p).abs() < 1e-12);
    }
}

#[test]
fn bayes_density_by_hand() {
    // Bernoulli(0.3) on three units; G = (V, z_V) with V uniform on {0, 1, 2}.
    let model = AssignmentModel::bernoulli(3, 0.3).unwrap();
    let parts: Vec<Partition> = (0..3)
        .map(|v| partition_by_function(&model, move |z| z[v] as i64))
        .collect();
    let variable = RandomizedPartitionChoice::new(parts, vec![1.0, 1.0, 1.0]).unwrap();
    let g = vec![1, 1];
    let w = bayes_conditional_density(&model, &variable, &g).unwrap();
    let mut total = 0.0;
    for (i, z) in model.iter().unwrap().enumerate() {
        let prior: f64 = z.iter().map(|&l| if l == 1 { 0.3 } else { 0.7 }).product();
        let expected = if z[1] == 1 { prior } else { 0.0 };
        total += expected;
        assert!((w[i] * 0.3 - expected).abs() < 1e-12, "{z:?}");
    }
    assert!((total - 0.3).abs() < 1e-12);
    assert!(matches!(
        bayes_conditional_density(&model, &variable, &vec![5, 0]),
        Err(CrtError::UnreachableConditioningValue(_))
    ));
    let kernel_mass: f64 = variable.kernel(&model.get(0)).iter().map(|(_, p)| p).sum();
    assert!((kernel_mass - 1.0).abs() < 1e-12);
}

#[test]
fn post_randomized_monte_carlo_agrees_with_exact() {
    let model = AssignmentModel::bernoulli(8, 0.5).unwrap();
    let parts = vec![
        partition_by_function(&model, |z| z.count_nonzero() as i64),
        partition_by_function(&model, |z| (z[0] + z[1] + z[2] + z[3]) as i64),
    ];
    let variable = RandomizedPartitionChoice::new(parts, vec![0.5, 0.5]).unwrap();
    let null = NullHypothesis::fisher_sharp(8);
    let resamples = 4000;
    let mut reports = Vec::new();
    for seed in 0..10 {
        let obs = ObservedData::new(model.sample_seeded(seed), outcomes(8, seed));
        let exact =
            post_randomized_p_value(&model, &variable, &null, &treated_sum(), &obs, seed, Mode::Exact)
                .unwrap();
        let mc = post_randomized_p_value(
            &model,
            &variable,
            &null,
            &treated_sum(),
            &obs,
            seed,
            Mode::MonteCarlo { resamples },
        )
        .unwrap();
        assert_eq!(exact.cell, mc.cell);
        let se = (exact.p * (1.0 - exact.p) / resamples as f64).sqrt();
        assert!((mc.p - exact.p).abs() <= 3.0 * se + 1.0 / resamples as f64);
        reports.push(exact);
    }
    let avg = averaged_p_value(&reports).unwrap();
    assert_eq!(avg.count, 10);
    assert!(avg.mean > 0.0 && avg.mean <= 1.0);
    assert!(averaged_p_value(&[]).is_err());
}
