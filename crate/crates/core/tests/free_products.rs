//! Free products against independently computed quantities.

use rwalk_core::adapted::AdaptedModel;
use rwalk_core::green::{first_passage, green_derivative, PassageOptions};
use rwalk_core::measures::{adapted_measure, power_sequence};
use rwalk_core::oracles::{cutpoint_identity_oracle, radial_chain_free_group};
use rwalk_core::parabolic::{build_section, displacement_and_eigenpair, first_return_kernel};
use rwalk_core::{AdaptedSpec, GroupElement, GroupSpec, SparseMeasure};

fn srw_free(h0: GroupSpec, h1: GroupSpec, alpha: f64) -> AdaptedSpec {
    AdaptedSpec::new(
        alpha,
        SparseMeasure::simple_random_walk(h0),
        SparseMeasure::simple_random_walk(h1),
    )
    .unwrap()
}

#[test]
fn engine_rows_on_free_group_match_radial_chain() {
    let a = srw_free(GroupSpec::lattice(1), GroupSpec::lattice(1), 0.5);
    let mu = adapted_measure(&a.spec(), &a).unwrap();
    let engine = power_sequence(&mu, 16, 0.0).unwrap();
    let oracle = radial_chain_free_group(2, 16);
    for (x, y) in engine.rows.iter().zip(&oracle.rows) {
        assert!(
            (x.value() - y.value()).abs() <= 1e-14 * y.value().max(1e-300),
            "n = {}",
            x.n
        );
    }
}

#[test]
fn green_function_of_z_star_cyclic() {
    // Z * Z/2: the excursion model against a direct power series far from R
    let a = srw_free(GroupSpec::lattice(1), GroupSpec::cyclic(2), 0.5);
    let model = AdaptedModel::new(a.clone()).unwrap();
    let mu = adapted_measure(&a.spec(), &a).unwrap();
    let series = power_sequence(&mu, 36, 0.0).unwrap();
    let r = 0.3;
    let direct = green_derivative(&series, r, 0).unwrap();
    let sol = model.solve(r).unwrap();
    assert!(
        (direct.value - sol.green).abs() < 1e-12 + direct.uncertainty(),
        "{direct:?} {}",
        sol.green
    );
}

#[test]
fn first_return_mass_matches_w_system() {
    let a = srw_free(GroupSpec::lattice(1), GroupSpec::lattice(1), 0.5);
    let model = AdaptedModel::new(a).unwrap();
    let r = 0.8 * model.radius;
    let sol = model.solve(r).unwrap();
    let section = build_section(&model.adapted.spec(), 0, 0.0).unwrap();
    let k = first_return_kernel(&model, r, &section, &PassageOptions::default()).unwrap();
    let rho = sol.rho_h(&model.adapted, 0);
    assert!((k.total_mass(0) - rho).abs() < 1e-10);
    let d = displacement_and_eigenpair(&k).unwrap();
    assert!((d.lambda - rho).abs() < 1e-10);
}

#[test]
fn passage_to_identity_solves_its_equation() {
    // on Z with r < 1, F(1 -> 0 | r) = (1 - sqrt(1 - r^2)) / r
    let mu = SparseMeasure::simple_random_walk(GroupSpec::lattice(1));
    let target = GroupElement::lattice(&[0]);
    let t = first_passage(
        &mu,
        0.8,
        &[target],
        &|_| false,
        &[GroupElement::lattice(&[1])],
        &PassageOptions::default(),
    )
    .unwrap();
    let f = t.get(&GroupElement::lattice(&[1]));
    assert!(
        (f - (1.0 - (1.0f64 - 0.64).sqrt()) / 0.8).abs() < 1e-12,
        "{f}"
    );
}

#[test]
fn cut_point_identity_on_z_star_z3() {
    let a = srw_free(GroupSpec::lattice(1), GroupSpec::cyclic(3), 0.5);
    let mu = adapted_measure(&a.spec(), &a).unwrap();
    let s = power_sequence(&mu, 10, 0.0).unwrap();
    // C(n + k, k) mu^(n)(e) with n = 6, k = 2
    let v = cutpoint_identity_oracle(&mu, 2, 6).unwrap();
    assert!(
        (v - 28.0 * s.rows[6].a).abs() < 1e-14,
        "{v} {}",
        s.rows[6].a
    );
}
