//! Randomized property tests over arbitrary discrete spectra and regimes.

use proptest::prelude::*;
use spikelab::spectrum::{
    phi, phi_inverse, phi_prime, support_edge, Aspect, DiscreteSpectrum, Regime,
};

fn arb_spectrum() -> impl Strategy<Value = DiscreteSpectrum> {
    prop::collection::vec(0.05f64..8.0, 1..12)
        .prop_map(|eigs| DiscreteSpectrum::from_eigenvalues(&eigs).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectra_stay_normalized_and_sorted(eigs in prop::collection::vec(0.05f64..8.0, 1..20)) {
        let h = DiscreteSpectrum::from_eigenvalues(&eigs).unwrap();
        let total: f64 = h.points().iter().map(|&(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for w in h.points().windows(2) {
            prop_assert!(w[0].0 < w[1].0);
        }
        // Second moment dominates the squared first moment.
        prop_assert!(h.second_moment() + 1e-12 >= h.first_moment().powi(2));
    }

    #[test]
    fn spike_map_round_trips_above_the_edge(
        h in arb_spectrum(),
        c in prop_oneof![Just(Aspect::Infinite), (0.2f64..400.0).prop_map(Aspect::Finite)],
        offset in 0.01f64..6.0,
    ) {
        let r = Regime::from_spectrum(&h, c);
        let edges = support_edge(&h, &r).unwrap();
        let alpha = edges.critical_point + offset;
        prop_assert!(phi_prime(&h, &r, alpha).unwrap() > 0.0);
        let lambda = phi(&h, &r, alpha).unwrap();
        prop_assert!(lambda > edges.right_edge);
        let back = phi_inverse(&h, &r, lambda).unwrap();
        prop_assert!((back - alpha).abs() < 1e-9 * alpha.max(1.0));
    }

    #[test]
    fn edges_are_consistent(h in arb_spectrum(), c in 0.2f64..400.0) {
        let r = Regime::from_spectrum(&h, Aspect::Finite(c));
        let edges = support_edge(&h, &r).unwrap();
        // The critical point sits right of every pole, phi' vanishes there,
        // and the edge is its image.
        let pole = h.max_point() / r.pole_scale().unwrap();
        prop_assert!(edges.critical_point > pole);
        prop_assert!(phi_prime(&h, &r, edges.critical_point).unwrap().abs() < 1e-7);
        prop_assert!((phi(&h, &r, edges.critical_point).unwrap() - edges.right_edge).abs() < 1e-10);
    }
}
