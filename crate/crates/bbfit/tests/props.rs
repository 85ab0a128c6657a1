//! Randomized invariant checks for the data layer, the basis builders and
//! the family numerics.

use bbfit::datastore::{
    ingest_csv_reader, make_batches, read_ecdf_tables, write_ecdf_tables, ColumnStore, EcdfTable,
    Sampling,
};
use bbfit::eval::crps;
use bbfit::families::{by_name, Link};
use bbfit::terms::{basis_size, bspline_row, build_knots, difference_penalty};
use proptest::prelude::*;

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -1e6f64..1e6f64,
        1 => Just(0.0),
        1 => prop_oneof![Just(1e-300), Just(-1e-300), Just(1e300), Just(-1e300)],
    ]
}

fn small_table() -> impl Strategy<Value = (Vec<String>, Vec<Vec<f64>>)> {
    (1usize..5, 1usize..30).prop_flat_map(|(ncol, nrow)| {
        let names: Vec<String> = (0..ncol).map(|i| format!("c{i}")).collect();
        let data = prop::collection::vec(prop::collection::vec(finite_f64(), nrow), ncol);
        (Just(names), data)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn store_file_round_trip_preserves_bits((names, data) in small_table()) {
        let store = ColumnStore::from_columns(names.clone(), data.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bbfc");
        store.write_file(&path).unwrap();
        for reopened in [ColumnStore::load(&path).unwrap(), ColumnStore::open(&path).unwrap()] {
            prop_assert_eq!(reopened.column_names(), &names[..]);
            for (c, expect) in data.iter().enumerate() {
                let got = reopened.read_column(c).unwrap();
                prop_assert_eq!(got.len(), expect.len());
                for (a, b) in got.iter().zip(expect) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn csv_ingest_round_trips_display_formatted_floats((names, data) in small_table()) {
        let nrow = data[0].len();
        let mut text = names.join(",") + "\n";
        for r in 0..nrow {
            let row: Vec<String> = data.iter().map(|c| format!("{}", c[r])).collect();
            text += &(row.join(",") + "\n");
        }
        let store = ingest_csv_reader(text.as_bytes(), None).unwrap();
        prop_assert_eq!(store.column_names(), &names[..]);
        for (c, expect) in data.iter().enumerate() {
            let got = store.read_column(c).unwrap();
            for (a, b) in got.iter().zip(expect) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn batch_plans_are_deterministic_in_range_and_duplicate_free(
        n in 1u64..600,
        t in 2usize..12,
        batch in 1usize..700,
        seed in 0u64..1000,
        epoch in any::<bool>(),
    ) {
        let mode = if epoch { Sampling::Epoch } else { Sampling::WithReplacement };
        let a = make_batches(n, t, batch, mode, seed).unwrap();
        let b = make_batches(n, t, batch, mode, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), t);
        let size = batch.min(n as usize);
        for ids in &a {
            prop_assert!(ids.iter().all(|&i| (i as u64) < n));
            let mut sorted: Vec<u32> = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), ids.len(), "duplicate row inside one batch");
            if !epoch {
                prop_assert_eq!(ids.len(), size);
            }
        }
    }

    #[test]
    fn epoch_batches_partition_every_epoch(
        n in 1u64..400,
        batch in 1usize..500,
        seed in 0u64..1000,
    ) {
        let size = batch.min(n as usize);
        let per_epoch = (n as usize).div_ceil(size);
        let t = 2.max(3 * per_epoch);
        let plan = make_batches(n, t, batch, Sampling::Epoch, seed).unwrap();
        for epoch in plan.chunks(per_epoch).take(plan.len() / per_epoch) {
            let mut seen: Vec<u32> = epoch.iter().flatten().copied().collect();
            seen.sort_unstable();
            let expect: Vec<u32> = (0..n as u32).collect();
            prop_assert_eq!(seen, expect, "one epoch must cover each row exactly once");
        }
    }

    #[test]
    fn links_invert_each_other(eta in -30.0f64..30.0) {
        for link in [Link::Identity, Link::Log, Link::LogSquare, Link::Logit] {
            let theta = link.inverse(eta);
            prop_assert!(theta.is_finite());
            let back = link.apply(theta);
            // Near theta = 1 the logit round trip is ill conditioned: one ulp
            // of theta moves the linear predictor by eps / (1 - theta), so the
            // tolerance has to grow by that factor for strongly positive eta.
            let amp = match link {
                Link::Logit => (1.0 - theta).max(f64::EPSILON).recip(),
                _ => 1.0,
            };
            let tol = 1e-9 * (1.0 + eta.abs()) + 4.0 * f64::EPSILON * amp;
            prop_assert!((back - eta).abs() <= tol,
                "{link:?}: eta {eta} -> theta {theta} -> {back}");
        }
    }

    #[test]
    fn count_pmf_accumulates_to_the_cdf(
        zap in ((0.05f64..4.0), (0.05f64..0.95)),
        dgp in ((0.05f64..1.5), (0.05f64..3.0)),
    ) {
        for (name, theta) in [("ZAP", [zap.0, zap.1]), ("DGP", [dgp.0, dgp.1])] {
            let family = by_name(name).unwrap();
            let mut acc = 0.0;
            let mut prev_cdf = 0.0;
            for k in 0..400u32 {
                let y = k as f64;
                acc += family.logpdf(y, &theta).exp();
                let cdf = family.cdf(y, &theta);
                prop_assert!((0.0..=1.0).contains(&cdf));
                prop_assert!(cdf + 1e-12 >= prev_cdf, "{name}: cdf must be monotone");
                prop_assert!((acc - cdf).abs() <= 1e-8 * (1.0 + acc),
                    "{name} {theta:?}: pmf sum {acc} vs cdf {cdf} at y={y}");
                prev_cdf = cdf;
                if 1.0 - cdf < 1e-13 {
                    break;
                }
            }
        }
    }

    #[test]
    fn continuous_cdf_is_monotone_and_bounded(
        mu in -5.0f64..5.0,
        sigma in 0.1f64..3.0,
        gmu in 0.2f64..5.0,
        gsig in 0.1f64..1.5,
    ) {
        for (name, theta, lo, hi) in [
            ("NO", [mu, sigma], mu - 6.0 * sigma, mu + 6.0 * sigma),
            ("GA", [gmu, gsig], 1e-9, gmu * 8.0),
        ] {
            let family = by_name(name).unwrap();
            let mut prev = -1.0;
            for i in 0..=50 {
                let y = lo + (hi - lo) * i as f64 / 50.0;
                let c = family.cdf(y, &theta);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
                prop_assert!(c + 1e-12 >= prev, "{name}: cdf decreased at y={y}");
                prev = c;
            }
        }
    }

    #[test]
    fn difference_penalty_is_psd_and_kills_low_order_polynomials(
        p in 4usize..20,
        order in 1usize..4,
        x in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        prop_assume!(p > order);
        let k = difference_penalty(p, order).unwrap();
        for i in 0..p {
            for j in 0..p {
                prop_assert!((k[(i, j)] - k[(j, i)]).abs() < 1e-12);
            }
        }
        let v = &x[..p];
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += v[i] * k[(i, j)] * v[j];
            }
        }
        prop_assert!(quad >= -1e-9, "penalty quadratic form went negative: {quad}");
        // Polynomials below the difference order are exactly unpenalized.
        for deg in 0..order {
            let poly: Vec<f64> = (0..p).map(|i| (i as f64).powi(deg as i32)).collect();
            let mut q = 0.0;
            for i in 0..p {
                for j in 0..p {
                    q += poly[i] * k[(i, j)] * poly[j];
                }
            }
            prop_assert!(q.abs() < 1e-8, "degree {deg} polynomial picked up penalty {q}");
        }
    }

    #[test]
    fn bspline_rows_are_a_partition_of_unity(
        lo in -10.0f64..10.0,
        width in 0.5f64..20.0,
        n_knots in 4usize..20,
        frac in 0.0f64..1.0,
    ) {
        let knots = build_knots(lo, lo + width, n_knots, 3).unwrap();
        let p = basis_size(&knots, 3);
        let mut row = vec![0.0; p];
        let x = lo + frac * width;
        bspline_row(x, &knots, 3, &mut row);
        let sum: f64 = row.iter().sum();
        prop_assert!(row.iter().all(|&b| b >= -1e-14));
        prop_assert!((sum - 1.0).abs() < 1e-10, "basis row sums to {sum} at x={x}");
    }

    #[test]
    fn ecdf_tables_survive_the_file_format(
        cols in prop::collection::vec(prop::collection::vec(-1e4f64..1e4, 1..40), 1..4),
    ) {
        let tables: Vec<EcdfTable> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| EcdfTable::from_column(&format!("v{i}"), c).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bbfe");
        write_ecdf_tables(&tables, &path).unwrap();
        let back = read_ecdf_tables(&path).unwrap();
        prop_assert_eq!(back, tables);
    }

    #[test]
    fn ecdf_transform_is_monotone_into_unit_interval(
        col in prop::collection::vec(-100.0f64..100.0, 2..60),
        probe in prop::collection::vec(-150.0f64..150.0, 10),
    ) {
        let table = EcdfTable::from_column("v", &col).unwrap();
        let mut sorted = probe.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = 0.0;
        for x in sorted {
            let u = table.transform(x);
            prop_assert!(u > 0.0 && u <= 1.0);
            prop_assert!(u + 1e-15 >= prev, "transform decreased at {x}");
            prev = u;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn crps_is_nonnegative_and_finite(
        which in 0usize..4,
        a in 0.1f64..3.0,
        b in 0.1f64..0.9,
        y_raw in -4.0f64..8.0,
    ) {
        let (name, theta, y) = match which {
            0 => ("NO", [a * 2.0 - 3.0, 0.2 + b], y_raw),
            1 => ("GA", [a, b], y_raw.abs().max(1e-3)),
            2 => ("ZAP", [a, b], y_raw.abs().floor()),
            _ => ("DGP", [b, a], y_raw.abs().floor()),
        };
        let family = by_name(name).unwrap();
        let score = crps(family.as_ref(), &theta, y).unwrap();
        prop_assert!(score.is_finite(), "{name} {theta:?} y={y}: {score}");
        prop_assert!(score >= -1e-10, "{name} {theta:?} y={y}: negative crps {score}");
    }
}
